//! Append-only record of run attempts in `<output>/ledger.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainers::EvalMetrics;

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Started,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    /// Identity used for no-op detection: the lineage hash for pretraining,
    /// the config hash for fine-tuning.
    pub key: String,
    pub config_hash: String,
    pub lineage: String,
    pub code_version: String,
    /// `pretrain` or `finetune/<tag>`.
    pub task: String,
    pub seed: u64,
    pub status: Status,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub env_steps: u64,
    pub wall_ms: u64,
    pub error: Option<String>,
    /// Final evaluation of a completed task.
    pub metrics: Option<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ledger {
    pub entries: Vec<Entry>,
}

impl Ledger {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(LEDGER_FILE)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = Self::path(dir);
        match fs::read(&p) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::Integrity(format!("unreadable ledger: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(&p, e)),
        }
    }

    /// Appends and persists. A lock file serialises writers from
    /// concurrent seed processes.
    pub fn append(dir: &Path, entry: Entry) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = dir.join("ledger.lock");
        let mut waited = 0;
        while fs::OpenOptions::new().write(true).create_new(true).open(&lock).is_err() {
            if waited > 6000 {
                return Err(Error::Integrity(format!("ledger lock {} is stale", lock.display())));
            }
            std::thread::sleep(std::time::Duration::from_millis(10));
            waited += 1;
        }
        let res = (|| {
            let mut l = Self::load(dir)?;
            l.entries.push(entry);
            let p = Self::path(dir);
            let tmp = p.with_extension("tmp");
            fs::write(&tmp, serde_json::to_vec_pretty(&l)?).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))
        })();
        let _ = fs::remove_file(&lock);
        res
    }

    /// Latest entry for a (key, task, seed).
    pub fn latest(&self, key: &str, task: &str, seed: u64) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key && e.task == task && e.seed == seed)
    }

    pub fn is_completed(&self, key: &str, task: &str, seed: u64) -> bool {
        self.latest(key, task, seed).is_some_and(|e| e.status == Status::Completed)
    }

    /// Latest completed entries, one per (key, task, seed), ordered by last update.
    pub fn completed(&self) -> Vec<&Entry> {
        let mut out: Vec<&Entry> = Vec::new();
        for e in &self.entries {
            let key = |x: &Entry| (x.key.clone(), x.task.clone(), x.seed);
            if let Some(pos) = out.iter().position(|o| key(o) == key(e)) {
                out.remove(pos);
            }
            out.push(e);
        }
        out.retain(|e| e.status == Status::Completed);
        out
    }
}
