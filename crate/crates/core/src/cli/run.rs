//! Command implementations: run layout, per-seed execution, sweeps,
//! evaluation and analysis exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{self, Dtype, Header};
use super::config::{resolve_output, RunConfig};
use super::ledger::{Entry, Ledger, Status};
use crate::analysis::{
    activation_heatmap, collect_probes, efficiency_report, layer_norms, param_budgets, policy_distance_matrix,
    sparsity_curve, RunTiming, DEFAULT_PROBES, HEATMAP_LAYERS,
};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::lora::{merge, AdapterSet, Placement, RankSpec};
use crate::nn::ActorParams;
use crate::trainers::{
    evaluate, finetune_lora, pretrain_shared, Checkpoint, EvalMetrics, LogRow, Phase, PhaseSink, RegimeKind,
    TrainState,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Flags shared by the training commands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Seed processes run at once; 0 or 1 runs seeds in this process.
    pub parallel_seeds: usize,
    /// Restrict to one seed (used by child processes).
    pub only_seed: Option<u64>,
    /// Extra arguments forwarded to child processes.
    pub forward: Vec<String>,
}

/// Merged per-agent policies for deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyExport {
    pub env: EnvConfig,
    pub id_dim: usize,
    pub seed: u64,
    pub agents: Vec<ActorParams>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn checkpoint_path(out: &Path, seed: u64, step: u64) -> PathBuf {
    seed_dir(out, seed).join("checkpoints").join(format!("step_{step}.ckpt"))
}

pub fn finetune_dir(out: &Path, seed: u64, tag: &str) -> PathBuf {
    seed_dir(out, seed).join("finetune").join(tag)
}

pub fn finetune_tag(from_step: u64, rank: RankSpec, placement: &Placement) -> String {
    format!("step{from_step}_r{rank}_{placement}")
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    let p = out.join("configs").join(format!("{}.json", cfg.config_hash()));
    write_text(&p, &serde_json::to_string_pretty(cfg)?)
}

fn load_saved_config(out: &Path, hash: &str) -> Result<RunConfig> {
    let p = out.join("configs").join(format!("{hash}.json"));
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn header(cfg: &RunConfig, kind: &str, dtype: Dtype, meta: serde_json::Value) -> Header {
    Header { kind: kind.into(), config_hash: cfg.config_hash(), lineage: cfg.lineage_hash(), dtype, meta }
}

/// Streams log rows to CSV and checkpoints to disk.
struct FileSink<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    seed: u64,
    log: String,
    log_path: PathBuf,
    phase: Phase,
    /// Fine-tuning: tag and start checkpoint (relative).
    finetune: Option<(String, String)>,
    artifacts: Vec<String>,
    last: Option<EvalMetrics>,
}

impl<'a> FileSink<'a> {
    fn new(cfg: &'a RunConfig, out: &'a Path, seed: u64, log_path: PathBuf, phase: Phase) -> Self {
        Self {
            cfg,
            out,
            seed,
            log: format!("{},config_hash\n", LogRow::CSV_HEADER),
            log_path,
            phase,
            finetune: None,
            artifacts: Vec::new(),
            last: None,
        }
    }
}

impl PhaseSink for FileSink<'_> {
    fn log(&mut self, row: &LogRow) -> Result<()> {
        let _ = writeln!(self.log, "{},{}", row.csv_row(), self.cfg.config_hash());
        self.last = Some(row.eval);
        write_text(&self.log_path, &self.log)
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let step = ckpt.state.env_steps;
        let meta = json!({ "seed": self.seed, "step": step, "eval": ckpt.eval });
        match (&self.phase, &self.finetune) {
            (Phase::Pretrain, _) => {
                let p = checkpoint_path(self.out, self.seed, step);
                checkpoint::write(&p, ckpt, &header(self.cfg, "train_state", Dtype::F64, meta))?;
                self.artifacts.push(rel(self.out, &p));
            }
            (Phase::Finetune, Some((tag, start))) => {
                let dir = finetune_dir(self.out, self.seed, tag);
                for set in &ckpt.state.policy.adapters {
                    let p = dir.join("adapters").join(format!("agent_{}.ckpt", set.agent));
                    let meta = json!({ "seed": self.seed, "step": step, "agent": set.agent, "tag": tag, "start": start });
                    checkpoint::write(&p, set, &header(self.cfg, "adapters", Dtype::F64, meta))?;
                    self.artifacts.push(rel(self.out, &p));
                }
                let p = dir.join("state.ckpt");
                checkpoint::write(&p, ckpt, &header(self.cfg, "train_state", Dtype::F64, meta.clone()))?;
                self.artifacts.push(rel(self.out, &p));
                let export = export_policy(&ckpt.state)?;
                let p = dir.join("policy.ckpt");
                checkpoint::write(&p, &export, &header(self.cfg, "policy", Dtype::F32, meta))?;
                self.artifacts.push(rel(self.out, &p));
            }
            (Phase::Finetune, None) => return Err(Error::Invariant("fine-tune sink without a tag".into())),
        }
        Ok(())
    }
}

pub fn export_policy(state: &TrainState) -> Result<PolicyExport> {
    let agents = state.agent_policies()?.into_iter().map(|c| c.into_owned()).collect();
    Ok(PolicyExport { env: state.spec.env.clone(), id_dim: state.policy.arch().id_dim, seed: state.seed, agents })
}

fn entry(cfg: &RunConfig, key: &str, task: &str, seed: u64, status: Status) -> Entry {
    Entry {
        key: key.into(),
        config_hash: cfg.config_hash(),
        lineage: cfg.lineage_hash(),
        code_version: CODE_VERSION.into(),
        task: task.into(),
        seed,
        status,
        artifacts: Vec::new(),
        env_steps: 0,
        wall_ms: 0,
        error: None,
        metrics: None,
    }
}

/// Runs `body` under started / completed / failed ledger entries, unless the
/// task already completed.
fn ledgered(
    cfg: &RunConfig,
    out: &Path,
    key: &str,
    task: &str,
    seed: u64,
    force: bool,
    body: impl FnOnce() -> Result<(Vec<String>, u64, Option<EvalMetrics>)>,
) -> Result<bool> {
    if !force && Ledger::load(out)?.is_completed(key, task, seed) {
        return Ok(false);
    }
    Ledger::append(out, entry(cfg, key, task, seed, Status::Started))?;
    let t = Instant::now();
    match body() {
        Ok((artifacts, steps, metrics)) => {
            let mut e = entry(cfg, key, task, seed, Status::Completed);
            e.artifacts = artifacts;
            e.env_steps = steps;
            e.wall_ms = t.elapsed().as_millis() as u64;
            e.metrics = metrics;
            Ledger::append(out, e)?;
            Ok(true)
        }
        Err(err) => {
            let mut e = entry(cfg, key, task, seed, Status::Failed);
            e.wall_ms = t.elapsed().as_millis() as u64;
            e.error = Some(err.to_string());
            Ledger::append(out, e)?;
            Err(err)
        }
    }
}

/// Runs `per_seed` for each seed, in this process or in child processes.
fn for_each_seed(
    cfg: &RunConfig,
    verb: &str,
    config_path: Option<&Path>,
    opts: &RunOptions,
    mut per_seed: impl FnMut(u64) -> Result<()>,
) -> Result<()> {
    let seeds: Vec<u64> = match opts.only_seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    match config_path {
        Some(path) if opts.parallel_seeds > 1 && seeds.len() > 1 => {
            let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
            for group in seeds.chunks(opts.parallel_seeds) {
                let children = group
                    .iter()
                    .map(|s| {
                        let mut c = Command::new(&exe);
                        c.arg(verb).arg(path).arg("--seed").arg(s.to_string()).args(&opts.forward);
                        if opts.force {
                            c.arg("--force");
                        }
                        c.spawn().map_err(|e| Error::io(&exe, e))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut worst = 0;
                for mut ch in children {
                    let code = ch.wait().map_err(|e| Error::io(&exe, e))?.code().unwrap_or(4);
                    worst = worst.max(code);
                }
                match worst {
                    0 => {}
                    2 => return Err(Error::config("config", "a seed process rejected the configuration")),
                    3 => return Err(Error::Lineage("a seed process reported a lineage mismatch".into())),
                    _ => return Err(Error::Invariant("a seed process failed".into())),
                }
            }
            Ok(())
        }
        _ => seeds.into_iter().try_for_each(&mut per_seed),
    }
}

fn check_existing_lineage(cfg: &RunConfig, out: &Path, seed: u64, force: bool) -> Result<()> {
    let p = checkpoint_path(out, seed, cfg.phase.pretrain_steps);
    if force || !p.exists() {
        return Ok(());
    }
    let m = checkpoint::read_manifest(&p)?;
    if m.lineage != cfg.lineage_hash() {
        return Err(Error::Lineage(format!(
            "{} holds a run of a different lineage; choose another output or pass --force",
            out.display()
        )));
    }
    Ok(())
}

pub fn pretrain_seed(cfg: &RunConfig, out: &Path, seed: u64, force: bool) -> Result<bool> {
    check_existing_lineage(cfg, out, seed, force)?;
    let lineage = cfg.lineage_hash();
    ledgered(cfg, out, &lineage, "pretrain", seed, force, || {
        let log = seed_dir(out, seed).join("train_log.csv");
        let mut sink = FileSink::new(cfg, out, seed, log.clone(), Phase::Pretrain);
        let state = pretrain_shared(cfg.pretrain_spec(), seed, &cfg.pretrain_plan(), &mut sink)?;
        sink.artifacts.push(rel(out, &log));
        Ok((sink.artifacts, state.env_steps, sink.last))
    })
}

pub fn cmd_pretrain(cfg: &RunConfig, config_path: Option<&Path>, opts: &RunOptions) -> Result<()> {
    let out = cfg.output_dir();
    save_config(&out, cfg)?;
    for_each_seed(cfg, "pretrain", config_path, opts, |seed| pretrain_seed(cfg, &out, seed, opts.force).map(|_| ()))
}

/// Where fine-tuning starts.
#[derive(Debug, Clone, PartialEq)]
pub enum StartPoint {
    /// Pretraining step, resolved per seed inside the run directory.
    Step(u64),
    /// An explicit checkpoint file (its own seed).
    File(PathBuf),
}

impl StartPoint {
    pub fn parse(s: &str, cfg: &RunConfig) -> Result<Self> {
        let p = PathBuf::from(s);
        if p.is_file() {
            return Ok(StartPoint::File(p));
        }
        let t = s.trim().trim_start_matches("step_").trim_end_matches(".ckpt");
        if let Some(pct) = t.strip_suffix('%') {
            let pct: f64 = pct.parse().map_err(|_| Error::config("--from", format!("cannot parse `{s}`")))?;
            let per = cfg.hyper.steps_per_iteration();
            let raw = cfg.phase.pretrain_steps as f64 * pct / 100.0;
            return Ok(StartPoint::Step(((raw / per as f64).round() as u64) * per));
        }
        t.parse()
            .map(StartPoint::Step)
            .map_err(|_| Error::config("--from", format!("`{s}` is neither a checkpoint file nor a step")))
    }
}

/// Applies fine-tuning overrides and switches the regime to its adapter form.
pub fn finetune_config(base: &RunConfig, rank: Option<RankSpec>, placement: Option<Placement>, from: Option<u64>) -> Result<RunConfig> {
    let mut cfg = base.clone();
    if let Some(r) = rank {
        cfg.lora.rank = r;
    }
    if let Some(p) = placement {
        cfg.lora.placement = p;
    }
    if let Some(f) = from {
        cfg.phase.finetune_from = f;
    }
    cfg.regime.kind = match cfg.regime.kind {
        RegimeKind::PsId => RegimeKind::PsLora,
        RegimeKind::ClusterShared => RegimeKind::ClusterLora,
        k => k,
    };
    if cfg.regime.kind.is_lora() {
        cfg.regime.lora = Some(cfg.lora.clone());
    }
    cfg.lora.resolve(&cfg.pretrain_spec().arch()?)?;
    Ok(cfg)
}

pub fn finetune_seed(cfg: &RunConfig, out: &Path, seed: u64, ckpt_path: &Path, force: bool) -> Result<Option<EvalMetrics>> {
    let manifest = checkpoint::read_manifest(ckpt_path)?;
    if manifest.kind != "train_state" {
        return Err(Error::Lineage(format!("{} is a `{}` file, not a training checkpoint", ckpt_path.display(), manifest.kind)));
    }
    if manifest.lineage != cfg.lineage_hash() {
        return Err(Error::Lineage(format!(
            "checkpoint {} has lineage {}, configuration expects {}",
            ckpt_path.display(),
            &manifest.lineage[..12.min(manifest.lineage.len())],
            &cfg.lineage_hash()[..12]
        )));
    }
    let step = manifest.meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
    let tag = finetune_tag(step, cfg.lora.rank, &cfg.lora.placement);
    let task = format!("finetune/{tag}");
    let hash = cfg.config_hash();
    let ran = ledgered(cfg, out, &hash, &task, seed, force, || {
        let (_, ckpt): (_, Checkpoint) = checkpoint::read(ckpt_path)?;
        if ckpt.state.seed != seed {
            return Err(Error::Lineage(format!("checkpoint belongs to seed {}, not {seed}", ckpt.state.seed)));
        }
        let dir = finetune_dir(out, seed, &tag);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let log = dir.join("eval_log.csv");
        let mut sink = FileSink::new(cfg, out, seed, log.clone(), Phase::Finetune);
        sink.finetune = Some((tag.clone(), rel(out, ckpt_path)));
        let state = finetune_lora(&ckpt, cfg.lora.clone(), cfg.hyper.clone(), &cfg.finetune_plan(), &mut sink)?;
        sink.artifacts.push(rel(out, &log));
        Ok((sink.artifacts, state.env_steps, sink.last))
    })?;
    let _ = ran;
    Ok(Ledger::load(out)?.latest(&hash, &task, seed).and_then(|e| e.metrics))
}

pub fn cmd_finetune(cfg: &RunConfig, from: Option<&str>, config_path: Option<&Path>, opts: &RunOptions) -> Result<()> {
    let out = cfg.output_dir();
    let start = match from {
        Some(s) => StartPoint::parse(s, cfg)?,
        None => StartPoint::Step(cfg.phase.finetune_from),
    };
    match start {
        StartPoint::File(p) => {
            let (_, ckpt): (_, Checkpoint) = checkpoint::read(&p)?;
            let cfg = finetune_config(cfg, None, None, Some(ckpt.state.env_steps))?;
            save_config(&out, &cfg)?;
            finetune_seed(&cfg, &out, ckpt.state.seed, &p, opts.force).map(|_| ())
        }
        StartPoint::Step(step) => {
            let cfg = finetune_config(cfg, None, None, Some(step))?;
            save_config(&out, &cfg)?;
            for_each_seed(&cfg, "finetune", config_path, opts, |seed| {
                let p = checkpoint_path(&out, seed, step);
                if !p.exists() {
                    return Err(Error::Lineage(format!("no pretraining checkpoint at {}; run pretrain first", p.display())));
                }
                finetune_seed(&cfg, &out, seed, &p, opts.force).map(|_| ())
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Rank,
    Checkpoint,
    Placement,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(SweepAxis::Rank),
            "checkpoint" => Ok(SweepAxis::Checkpoint),
            "placement" => Ok(SweepAxis::Placement),
            other => Err(Error::config("--axis", format!("unknown sweep axis `{other}`"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rank => "rank",
            SweepAxis::Checkpoint => "checkpoint",
            SweepAxis::Placement => "placement",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Rank => &["2", "4", "8", "full"],
            SweepAxis::Checkpoint => &["25%", "50%", "75%"],
            SweepAxis::Placement => &["fc1-only", "gru-only", "post-only", "head-only", "all"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

pub const SWEEP_HEADER: &str =
    "axis,value,seed,mean_return,median_return,success_rate,mean_length,cell_median_success_rate,cell_median_return,config_hash";

/// Pretrains (no-op when done), fine-tunes every cell for every seed and
/// writes `sweep_<axis>.csv`.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[String], opts: &RunOptions) -> Result<PathBuf> {
    let out = cfg.output_dir();
    save_config(&out, cfg)?;
    let values = if values.is_empty() { axis.default_values() } else { values.to_vec() };
    for &seed in &cfg.seeds {
        pretrain_seed(cfg, &out, seed, false)?;
    }
    let mut csv = format!("{SWEEP_HEADER}\n");
    for v in &values {
        let cell = match axis {
            SweepAxis::Rank => finetune_config(cfg, Some(v.parse()?), None, None)?,
            SweepAxis::Placement => finetune_config(cfg, None, Some(v.parse()?), None)?,
            SweepAxis::Checkpoint => match StartPoint::parse(v, cfg)? {
                StartPoint::Step(s) => {
                    if !cfg.phase.checkpoints.contains(&s) && s != cfg.phase.pretrain_steps {
                        return Err(Error::config("--values", format!("no pretraining checkpoint at step {s}")));
                    }
                    finetune_config(cfg, None, None, Some(s))?
                }
                StartPoint::File(_) => return Err(Error::config("--values", "checkpoint sweeps take steps or percentages")),
            },
        };
        save_config(&out, &cell)?;
        let mut metrics = Vec::new();
        for &seed in &cfg.seeds {
            let p = checkpoint_path(&out, seed, cell.phase.finetune_from);
            let m = finetune_seed(&cell, &out, seed, &p, opts.force)?
                .ok_or_else(|| Error::Invariant("fine-tune finished without an evaluation".into()))?;
            metrics.push((seed, m));
        }
        let succ: Vec<f64> = metrics.iter().map(|(_, m)| m.success_rate).collect();
        let ret: Vec<f64> = metrics.iter().map(|(_, m)| m.mean_return).collect();
        let (ms, mr) = (crate::trainers::median(&succ), crate::trainers::median(&ret));
        for (seed, m) in &metrics {
            let _ = writeln!(csv, "{},{v},{seed},{},{ms},{mr},{}", axis.name(), m.csv_row(), cell.config_hash());
        }
    }
    let path = out.join(format!("sweep_{}.csv", axis.name()));
    write_text(&path, &csv)?;
    let arch = cfg.pretrain_spec().arch()?;
    let full: Vec<_> = arch.layers().iter().map(|l| json!({ "layer": l.id.name(), "full_rank": l.rows.min(l.cols) })).collect();
    let meta = json!({
        "axis": axis.name(),
        "values": values,
        "seeds": cfg.seeds,
        "hidden_dim": cfg.hidden_dim,
        "full_rank_per_layer": full,
        "note": "desk-scale grid; `full` means min(rows, cols) of each adapted layer",
        "config_hash": cfg.config_hash(),
    });
    write_text(&out.join(format!("sweep_{}.meta.json", axis.name())), &serde_json::to_string_pretty(&meta)?)?;
    Ok(path)
}

/// Evaluates a training checkpoint or an exported policy file.
pub fn cmd_eval(path: &Path, episodes: Option<usize>, seed: Option<u64>) -> Result<EvalMetrics> {
    let manifest = checkpoint::read_manifest(path)?;
    match manifest.kind.as_str() {
        "train_state" => {
            let (_, ckpt): (_, Checkpoint) = checkpoint::read(path)?;
            let owned = ckpt.state.agent_policies()?;
            let refs: Vec<&ActorParams> = owned.iter().map(|c| c.as_ref()).collect();
            let n = episodes.unwrap_or(ckpt.state.spec.hyper.eval_episodes);
            evaluate(&refs, &ckpt.state.spec.env, ckpt.state.policy.arch().id_dim, n, seed.unwrap_or(ckpt.state.seed))
        }
        "policy" => {
            let p = load_policy(path)?;
            let refs: Vec<&ActorParams> = p.agents.iter().collect();
            evaluate(&refs, &p.env, p.id_dim, episodes.unwrap_or(100), seed.unwrap_or(p.seed))
        }
        other => Err(Error::InvalidArgument(format!("cannot evaluate a `{other}` file"))),
    }
}

pub fn load_policy(path: &Path) -> Result<PolicyExport> {
    let (m, p): (_, PolicyExport) = checkpoint::read(path)?;
    if m.kind != "policy" {
        return Err(Error::InvalidArgument(format!("{} is not an exported policy", path.display())));
    }
    for a in &p.agents {
        a.check_shapes()?;
    }
    Ok(p)
}

/// One completed fine-tune found in a run directory.
struct FinetuneRun {
    out: PathBuf,
    cfg: RunConfig,
    seed: u64,
    tag: String,
    start: PathBuf,
    adapter_paths: Vec<PathBuf>,
}

fn discover(dirs: &[PathBuf]) -> Result<(Vec<FinetuneRun>, Vec<(RunConfig, Entry)>)> {
    let mut runs = Vec::new();
    let mut entries = Vec::new();
    for out in dirs {
        let ledger = Ledger::load(out)?;
        if ledger.entries.is_empty() {
            return Err(Error::InvalidArgument(format!("{} has no recorded runs", out.display())));
        }
        for e in ledger.completed() {
            let cfg = load_saved_config(out, &e.config_hash)?;
            entries.push((cfg.clone(), e.clone()));
            let Some(tag) = e.task.strip_prefix("finetune/") else { continue };
            let adapter_paths: Vec<PathBuf> =
                e.artifacts.iter().filter(|a| a.contains("/adapters/")).map(|a| out.join(a)).collect();
            let first = adapter_paths
                .first()
                .ok_or_else(|| Error::Integrity(format!("{} lists no adapters", e.task)))?;
            let m = checkpoint::read_manifest(first)?;
            let start = m.meta.get("start").and_then(|v| v.as_str()).unwrap_or_default();
            runs.push(FinetuneRun { out: out.clone(), cfg, seed: e.seed, tag: tag.to_string(), start: out.join(start), adapter_paths });
        }
    }
    let lineages: std::collections::BTreeSet<String> = entries.iter().map(|(_, e)| e.lineage.clone()).collect();
    if lineages.len() > 1 {
        return Err(Error::Lineage(format!("run directories mix {} lineages", lineages.len())));
    }
    Ok((runs, entries))
}

/// Writes the analysis CSVs for every completed fine-tune in `dirs`.
pub fn cmd_analyze(dirs: &[PathBuf], out: Option<&Path>, probes: usize) -> Result<PathBuf> {
    let dirs: Vec<PathBuf> = dirs.iter().map(|d| resolve_output(d)).collect();
    let first = dirs.first().ok_or_else(|| Error::InvalidArgument("no run directories given".into()))?;
    let target = out.map(resolve_output).unwrap_or_else(|| first.join("analysis"));
    let (runs, entries) = discover(&dirs)?;
    let probes = if probes == 0 { DEFAULT_PROBES } else { probes };

    let mut norms = String::from("run,seed,tag,layer,reference_norm,shared_norm,merged_norm,delta_norm,config_hash\n");
    let mut sparsity = String::from("run,seed,tag,source,index,threshold,percent,config_hash\n");
    let mut dist = String::new();
    let mut heat: Vec<String> = Vec::new();
    let mut similarity = String::from("run,seed,tag,layer,cosine_similarity,config_hash\n");
    let mut arch = None;
    for r in &runs {
        let hash = r.cfg.config_hash();
        let run = r.out.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        let (_, start): (_, Checkpoint) = checkpoint::read(&r.start)?;
        let ref_path = checkpoint_path(&r.out, r.seed, r.cfg.phase.pretrain_steps);
        let (_, reference): (_, Checkpoint) = checkpoint::read(&ref_path)?;
        let sets: Vec<AdapterSet> = r.adapter_paths.iter().map(|p| checkpoint::read(p).map(|(_, s)| s)).collect::<Result<_>>()?;
        let n = start.state.policy.n_agents;
        let a = start.state.policy.arch();
        if *arch.get_or_insert(a) != a {
            return Err(Error::Shape("run directories use different architectures".into()));
        }
        let mut merged = Vec::with_capacity(n);
        for i in 0..n {
            let shared = start.state.policy.backbone_for(i);
            merged.push(match sets.iter().find(|s| s.agent == i) {
                Some(s) => merge(shared, s)?,
                None => shared.clone(),
            });
        }
        // Agents sharing a backbone share norms; report against agent 0's.
        let shared0 = start.state.policy.backbone_for(0);
        let table = layer_norms(reference.state.policy.backbone_for(0), shared0, &sets)?;
        for row in &table.rows {
            let _ = writeln!(
                norms,
                "{run},{},{},{},{},{},{},{},{hash}",
                r.seed,
                r.tag,
                row.layer.name(),
                row.reference,
                row.shared,
                row.merged,
                row.delta
            );
        }
        let shared_w: Vec<&crate::numerics::Matrix> = shared0.weights.iter().collect();
        let deltas: Vec<crate::numerics::Matrix> = sets.iter().flat_map(|s| s.adapters.iter().map(|a| a.delta())).collect();
        for (source, curve) in [("shared", sparsity_curve(shared_w)?), ("delta", sparsity_curve(deltas.iter())?)] {
            for (k, (t, p)) in curve.thresholds.iter().zip(&curve.percent).enumerate() {
                let _ = writeln!(sparsity, "{run},{},{},{source},{k},{t},{p},{hash}", r.seed, r.tag);
            }
        }
        let probe_set = collect_probes(&start.state, probes, r.seed, &checkpoint_path_rel(&r.out, &r.start))?;
        let refs: Vec<&ActorParams> = merged.iter().collect();
        let dm = policy_distance_matrix(&refs, &probe_set)?;
        if dist.is_empty() {
            let cols: Vec<String> = (0..n).map(|j| format!("agent_{j}")).collect();
            let _ = writeln!(dist, "run,seed,tag,agent,{},probe_count,probe_seed,probe_source,config_hash", cols.join(","));
        }
        for (i, row) in dm.values.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                dist,
                "{run},{},{},{i},{},{},{},{},{hash}",
                r.seed,
                r.tag,
                vals.join(","),
                dm.probe_count,
                dm.probe_seed,
                dm.source
            );
        }
        let hm = activation_heatmap(&refs, &probe_set)?;
        if heat.len() < n {
            heat.resize(n, String::from("run,seed,tag,layer,unit,mean_abs_activation,config_hash\n"));
        }
        for (i, layers) in hm.mean_abs.iter().enumerate() {
            for (l, units) in layers.iter().enumerate() {
                for (u, v) in units.iter().enumerate() {
                    let _ = writeln!(heat[i], "{run},{},{},{},{u},{v},{hash}", r.seed, r.tag, HEATMAP_LAYERS[l].1);
                }
            }
        }
        for (l, c) in hm.cosine.iter().enumerate() {
            let _ = writeln!(similarity, "{run},{},{},{},{c},{hash}", r.seed, r.tag, HEATMAP_LAYERS[l].1);
        }
    }
    if dist.is_empty() {
        dist.push_str("run,seed,tag,agent,probe_count,probe_seed,probe_source,config_hash\n");
    }
    let mut eff = String::from("regime,phase,trainable_params,ms_per_1k_steps,config_hash\n");
    if let Some((cfg, _)) = entries.first() {
        let budgets = param_budgets(&cfg.pretrain_spec(), &cfg.lora)?;
        let timings: Vec<RunTiming> = entries
            .iter()
            .map(|(c, e)| {
                let finetune = e.task.starts_with("finetune/");
                let base = c.pretrain_spec().regime.kind;
                let regime = match (finetune, base) {
                    (true, RegimeKind::PsId) => RegimeKind::PsLora,
                    (true, RegimeKind::ClusterShared) => RegimeKind::ClusterLora,
                    (_, k) => k,
                };
                let phase = if finetune { Phase::Finetune } else { Phase::Pretrain };
                RunTiming { regime, phase, env_steps: e.env_steps, wall_ms: e.wall_ms }
            })
            .collect();
        for row in efficiency_report(&budgets, &timings)? {
            let ms = row.ms_per_1k_steps.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(eff, "{},{},{},{ms},{}", row.regime, row.phase, row.trainable, cfg.config_hash());
        }
    }
    write_text(&target.join("norms.csv"), &norms)?;
    write_text(&target.join("sparsity.csv"), &sparsity)?;
    write_text(&target.join("wasserstein.csv"), &dist)?;
    for (i, h) in heat.iter().enumerate() {
        write_text(&target.join(format!("heatmap_agent{i}.csv")), h)?;
    }
    write_text(&target.join("heatmap_similarity.csv"), &similarity)?;
    write_text(&target.join("efficiency.csv"), &eff)?;
    Ok(target)
}

fn checkpoint_path_rel(out: &Path, p: &Path) -> String {
    rel(out, p)
}
