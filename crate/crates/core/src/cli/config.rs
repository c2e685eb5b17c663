//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! env.id = hetero-grid
//! regime.kind = ps-lora
//! lora.rank = 2
//! phase.checkpoints = 25%, 50%, 75%
//! seeds = 1, 2, 3
//! ```
//!
//! A `[section]` line prefixes the keys below it with `section.`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::checkpoint::sha256_hex;
use crate::envs::{Env, EnvConfig, EnvId, Environment};
use crate::error::{Error, Result};
use crate::lora::{LoraSpec, Placement, RankSpec};
use crate::nn::DEFAULT_HIDDEN_DIM;
use crate::trainers::{Learner, PhasePlan, RegimeKind, RegimeSpec, TrainHyper, TrainSpec};

pub const RUN_ROOT_ENV: &str = "LORASA_RUN_ROOT";

/// Step counts of the two phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub pretrain_steps: u64,
    /// Pretraining steps at which checkpoints are written (the last step
    /// always is).
    pub checkpoints: Vec<u64>,
    pub finetune_steps: u64,
    /// Pretraining checkpoint fine-tuning starts from.
    pub finetune_from: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub learner: Learner,
    /// As configured; adapter kinds pretrain their backbone kind first.
    pub regime: RegimeSpec,
    pub lora: LoraSpec,
    pub hyper: TrainHyper,
    pub hidden_dim: usize,
    pub phase: PhaseConfig,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub record_wall_ms: bool,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// A step count, or a percentage of `total` rounded to the nearest multiple
/// of `per` (steps per iteration).
fn parse_steps(key: &str, v: &str, total: u64, per: u64) -> Result<u64> {
    let v = v.trim();
    if let Some(p) = v.strip_suffix('%') {
        let p: f64 = parse_num(key, p)?;
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::config(key, format!("percentage {p} out of range")));
        }
        let raw = total as f64 * p / 100.0;
        return Ok(((raw / per as f64).round() as u64) * per);
    }
    parse_num(key, v)
}

/// Sets one field of a serde object from its string form, keeping the
/// field's JSON type.
fn set_field(obj: &mut Value, field: &str, key: &str, raw: &str) -> Result<()> {
    let slot = obj
        .as_object_mut()
        .and_then(|m| m.get_mut(field))
        .ok_or_else(|| Error::config(key, "unknown key"))?;
    *slot = match slot {
        Value::Bool(_) => Value::Bool(parse_bool(key, raw)?),
        Value::Number(n) if n.is_u64() => Value::from(parse_num::<u64>(key, raw)?),
        Value::Number(_) => Value::from(parse_num::<f64>(key, raw)?),
        Value::Array(_) => Value::Array(
            split_list(raw).map(|s| parse_num::<u64>(key, s).map(Value::from)).collect::<Result<_>>()?,
        ),
        Value::String(_) => Value::String(raw.trim().to_string()),
        _ => return Err(Error::config(key, "unsupported field type")),
    };
    Ok(())
}

/// Reads `key = value` lines into an ordered map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(s) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = s.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(key, "key given twice"));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn from_pairs(mut kv: BTreeMap<String, String>) -> Result<Self> {
        let id: EnvId = kv.remove("env.id").ok_or_else(|| Error::config("env.id", "missing environment id"))?.parse()?;
        let mut env = serde_json::to_value(EnvConfig::defaults(id))?;
        let mut hyper = serde_json::to_value(TrainHyper::defaults(id == EnvId::HeteroSpread))?;
        let mut learner = Learner::Mappo;
        let mut kind = RegimeKind::PsLora;
        let mut clusters = Vec::new();
        let mut rank = RankSpec::Fixed(8);
        let mut placement = Placement::All;
        let mut overcomplete = true;
        let mut hidden_dim = DEFAULT_HIDDEN_DIM;
        let mut seeds = vec![1];
        let mut output = PathBuf::from("runs/default");
        let mut record_wall_ms = false;
        let mut phase_raw: BTreeMap<String, String> = BTreeMap::new();
        for (key, v) in &kv {
            match key.as_str() {
                "learner" => learner = v.parse()?,
                "regime.kind" => kind = v.parse()?,
                "regime.clusters" => {
                    clusters = split_list(v).map(|s| parse_num(key, s)).collect::<Result<_>>()?;
                }
                "lora.rank" => rank = v.parse()?,
                "lora.placement" => placement = v.parse()?,
                "lora.allow_overcomplete" => overcomplete = parse_bool(key, v)?,
                "model.hidden_dim" => hidden_dim = parse_num(key, v)?,
                "seeds" => {
                    seeds = split_list(v).map(|s| parse_num(key, s)).collect::<Result<_>>()?;
                }
                "output" => output = PathBuf::from(v),
                "log.wall_ms" => record_wall_ms = parse_bool(key, v)?,
                k if k.starts_with("phase.") => {
                    phase_raw.insert(key.clone(), v.clone());
                }
                k if k.starts_with("env.") => set_field(&mut env, &k[4..], key, v)?,
                k if k.starts_with("hyper.") => set_field(&mut hyper, &k[6..], key, v)?,
                _ => return Err(Error::config(key.clone(), "unknown key")),
            }
        }
        kv.clear();
        let env: EnvConfig = serde_json::from_value(env).map_err(|e| Error::config("env", e.to_string()))?;
        let hyper: TrainHyper = serde_json::from_value(hyper).map_err(|e| Error::config("hyper", e.to_string()))?;
        if !kind.is_clustered() && !clusters.is_empty() {
            return Err(Error::config("regime.clusters", "cluster map given for a non-clustered regime"));
        }
        let lora = LoraSpec { rank, placement, allow_overcomplete: overcomplete };
        let regime = RegimeSpec { kind, clusters, lora: kind.is_lora().then(|| lora.clone()) };

        let per = hyper.steps_per_iteration();
        let mut take = |k: &str| phase_raw.remove(k);
        let pretrain_steps = match take("phase.pretrain_steps") {
            Some(v) => parse_num("phase.pretrain_steps", &v)?,
            None => 400_000,
        };
        let finetune_steps = match take("phase.finetune_steps") {
            Some(v) => parse_num("phase.finetune_steps", &v)?,
            None => 400_000,
        };
        let checkpoints = match take("phase.checkpoints") {
            Some(v) => split_list(&v)
                .map(|s| parse_steps("phase.checkpoints", s, pretrain_steps, per))
                .collect::<Result<Vec<_>>>()?,
            None => ["25%", "50%", "75%"]
                .iter()
                .map(|s| parse_steps("phase.checkpoints", s, pretrain_steps, per))
                .collect::<Result<Vec<_>>>()?,
        };
        let finetune_from = match take("phase.finetune_from") {
            Some(v) => parse_steps("phase.finetune_from", &v, pretrain_steps, per)?,
            None => pretrain_steps,
        };
        if let Some(k) = phase_raw.keys().next() {
            return Err(Error::config(k.clone(), "unknown key"));
        }
        let cfg = RunConfig {
            env,
            learner,
            regime,
            lora,
            hyper,
            hidden_dim,
            phase: PhaseConfig { pretrain_steps, checkpoints, finetune_steps, finetune_from },
            seeds,
            output,
            record_wall_ms,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain_spec().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        self.pretrain_plan().validate(&self.hyper)?;
        PhasePlan { steps: self.phase.finetune_steps, milestones: vec![], record_wall_ms: false }
            .validate(&self.hyper)
            .map_err(|_| Error::config("phase.finetune_steps", "must be a multiple of the steps per iteration"))?;
        if !self.phase.checkpoints.contains(&self.phase.finetune_from) && self.phase.finetune_from != self.phase.pretrain_steps {
            return Err(Error::config("phase.finetune_from", "must be a checkpoint milestone or the final pretraining step"));
        }
        let arch = self.pretrain_spec().arch()?;
        self.lora.resolve(&arch)?;
        Ok(())
    }

    /// Phase-1 training spec: the backbone regime of the configured kind.
    pub fn pretrain_spec(&self) -> TrainSpec {
        let kind = self.regime.kind.backbone_kind();
        let clusters = if kind.is_clustered() { self.regime.clusters.clone() } else { Vec::new() };
        TrainSpec {
            env: self.env.clone(),
            learner: self.learner,
            regime: RegimeSpec { kind, clusters, lora: None },
            hyper: self.hyper.clone(),
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn pretrain_plan(&self) -> PhasePlan {
        PhasePlan {
            steps: self.phase.pretrain_steps,
            milestones: self.phase.checkpoints.clone(),
            record_wall_ms: self.record_wall_ms,
        }
    }

    pub fn finetune_plan(&self) -> PhasePlan {
        PhasePlan { steps: self.phase.finetune_steps, milestones: Vec::new(), record_wall_ms: self.record_wall_ms }
    }

    /// Digest of everything that shapes results (not seeds, output location,
    /// timing or worker count).
    pub fn config_hash(&self) -> String {
        let mut hyper = self.hyper.clone();
        hyper.rollout_workers = 1;
        let v = serde_json::json!({
            "env": self.env,
            "learner": self.learner,
            "regime": self.regime,
            "lora": self.lora,
            "hyper": hyper,
            "hidden_dim": self.hidden_dim,
            "phase": self.phase,
        });
        sha256_hex(v.to_string().as_bytes())
    }

    /// Digest of what determines a pretraining trajectory; fine-tuning
    /// requires the checkpoint's lineage to match.
    pub fn lineage_hash(&self) -> String {
        let spec = self.pretrain_spec();
        let mut hyper = spec.hyper.clone();
        hyper.rollout_workers = 1;
        hyper.eval_episodes = 0;
        hyper.eval_interval = 0;
        let v = serde_json::json!({
            "env": spec.env,
            "learner": spec.learner,
            "regime": spec.regime,
            "hyper": hyper,
            "hidden_dim": spec.hidden_dim,
        });
        sha256_hex(v.to_string().as_bytes())
    }

    /// Output directory, resolved against `LORASA_RUN_ROOT` when relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output)
    }

    pub fn continuous(&self) -> bool {
        Env::new(&self.env).map(|e| e.action_kind().is_continuous()).unwrap_or(false)
    }
}

pub fn resolve_output(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}
