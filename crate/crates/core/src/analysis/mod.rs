//! Diagnostics over trained policies: weight and offset norms, sparsity
//! curves, pairwise policy distances, activation heatmaps and parameter /
//! wall-clock budgets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{merge, AdapterSet, LoraSpec};
use crate::nn::{forward_view, ActorArchitecture, ActorParams, DistBatch, LayerId, SeqInput};
use crate::numerics::{dot, Matrix, RngStream};
use crate::trainers::{agent_input, collect_rollouts, Phase, PolicySet, RegimeKind, RegimeSpec, RolloutState, TrainSpec, TrainState};

/// Number of thresholds in a sparsity curve.
pub const SPARSITY_POINTS: usize = 100;
pub const DEFAULT_PROBES: usize = 512;
const PROBE_STREAM: u64 = 0x7072_6f62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub layer: LayerId,
    /// ‖θ‖ of the reference run.
    pub reference: f64,
    pub shared: f64,
    /// Mean over agents of ‖θ_shared + δθ‖.
    pub merged: f64,
    /// Mean over agents of ‖δθ‖.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTable {
    pub rows: Vec<NormRow>,
}

impl NormTable {
    pub fn row(&self, layer: LayerId) -> Option<&NormRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

fn same_arch(a: &ActorArchitecture, b: &ActorArchitecture) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("architecture mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Frobenius norms per layer, in architecture order.
pub fn layer_norms(reference: &ActorParams, shared: &ActorParams, sets: &[AdapterSet]) -> Result<NormTable> {
    same_arch(&reference.arch, &shared.arch)?;
    let merged: Vec<ActorParams> = sets.iter().map(|s| merge(shared, s)).collect::<Result<_>>()?;
    let n = sets.len().max(1) as f64;
    let rows = shared
        .arch
        .layer_ids()
        .iter()
        .map(|&layer| {
            let delta: f64 =
                sets.iter().map(|s| s.get(layer).map_or(0.0, |a| a.delta().frobenius_norm())).sum::<f64>() / n;
            let merged_norm = if sets.is_empty() {
                shared.weight(layer).frobenius_norm()
            } else {
                merged.iter().map(|m| m.weight(layer).frobenius_norm()).sum::<f64>() / n
            };
            NormRow {
                layer,
                reference: reference.weight(layer).frobenius_norm(),
                shared: shared.weight(layer).frobenius_norm(),
                merged: merged_norm,
                delta,
            }
        })
        .collect();
    Ok(NormTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityCurve {
    pub thresholds: Vec<f64>,
    /// Percentage of |w| at or above each threshold.
    pub percent: Vec<f64>,
}

impl SparsityCurve {
    /// Points (matched by index, i.e. by normalised threshold) where `self`
    /// lies on or below `other`.
    pub fn points_on_or_below(&self, other: &SparsityCurve) -> usize {
        self.percent.iter().zip(&other.percent).filter(|(a, b)| a <= b).count()
    }
}

pub fn sparsity_curve<'a>(weights: impl IntoIterator<Item = &'a Matrix>) -> Result<SparsityCurve> {
    let mut abs: Vec<f64> = weights.into_iter().flat_map(|m| m.as_slice().iter().map(|v| v.abs())).collect();
    if abs.is_empty() {
        return Err(Error::InvalidArgument("sparsity curve of an empty weight collection".into()));
    }
    if abs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weights".into()));
    }
    abs.sort_by(f64::total_cmp);
    let (lo, hi) = (abs[0], abs[abs.len() - 1]);
    let total = abs.len() as f64;
    let last = (SPARSITY_POINTS - 1) as f64;
    let thresholds: Vec<f64> = (0..SPARSITY_POINTS)
        .map(|k| if k == SPARSITY_POINTS - 1 { hi } else { lo + (hi - lo) * k as f64 / last })
        .collect();
    let percent = thresholds
        .iter()
        .map(|&t| {
            let below = abs.partition_point(|&v| v < t);
            (abs.len() - below) as f64 / total * 100.0
        })
        .collect();
    Ok(SparsityCurve { thresholds, percent })
}

/// Fixed actor inputs (observation plus agent id) fed to every policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    /// `count × input_dim`.
    pub inputs: Matrix,
    pub seed: u64,
    pub source: String,
}

impl ProbeSet {
    pub fn count(&self) -> usize {
        self.inputs.rows()
    }
}

/// Samples `count` agent inputs from fresh stochastic rollouts of `state`'s
/// policies.
pub fn collect_probes(state: &TrainState, count: usize, seed: u64, source: &str) -> Result<ProbeSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("probe set must not be empty".into()));
    }
    let spec = &state.spec;
    let arch = state.policy.arch();
    let n = spec.env.n_agents;
    let envs = spec.hyper.rollout_threads;
    let chunk = spec.hyper.chunk_len;
    let per_step = envs * n;
    let steps = count.div_ceil(per_step).div_ceil(chunk) * chunk * 2;
    let mut rollout = RolloutState::new(&spec.env, envs, arch.hidden_dim, arch.id_dim, &RngStream::new(seed, PROBE_STREAM))?;
    let owned = state.agent_policies()?;
    let refs: Vec<&ActorParams> = owned.iter().map(|c| c.as_ref()).collect();
    let batch = collect_rollouts(&refs, &mut rollout, steps, chunk, 1)?;
    let mut pool: Vec<&[f64]> = Vec::with_capacity(steps * per_step);
    for t in 0..steps {
        for e in 0..envs {
            for a in 0..n {
                pool.push(batch.obs[a][t].row(e));
            }
        }
    }
    let mut rng = RngStream::new(seed, PROBE_STREAM).fork(u64::MAX);
    // Partial Fisher-Yates: the first `count` slots are a uniform sample.
    for k in 0..count {
        let j = k + rng.below(pool.len() - k);
        pool.swap(k, j);
    }
    let data: Vec<f64> = pool[..count].iter().flat_map(|r| r.iter().copied()).collect();
    Ok(ProbeSet { inputs: Matrix::from_vec(count, arch.input_dim(), data)?, seed, source: source.to_string() })
}

/// Probe inputs built directly from observations (agent `i` with its id).
pub fn probes_from_observations(obs: &[(usize, Vec<f64>)], id_dim: usize, seed: u64, source: &str) -> Result<ProbeSet> {
    if obs.is_empty() {
        return Err(Error::InvalidArgument("probe set must not be empty".into()));
    }
    let rows: Vec<Vec<f64>> = obs.iter().map(|(i, o)| agent_input(o, *i, id_dim)).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(ProbeSet { inputs: Matrix::from_rows(&refs)?, seed, source: source.to_string() })
}

fn single_step(p: &ActorParams, probes: &ProbeSet) -> Result<crate::nn::ForwardOutput> {
    let b = probes.count();
    if b == 0 {
        return Err(Error::InvalidArgument("probe set must not be empty".into()));
    }
    let input = SeqInput { obs: vec![probes.inputs.clone()], episode_start: vec![vec![true; b]] };
    forward_view(&p.arch, &p.view(), &input, &Matrix::zeros(b, p.arch.hidden_dim))
}

/// Total variation ½Σ|p−q|, the 1-Wasserstein distance under the 0/1 metric.
pub fn discrete_w1(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// 2-Wasserstein distance between diagonal Gaussians.
pub fn gaussian_w2(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> f64 {
    let dm: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let ds: f64 = sigma1.iter().zip(sigma2).map(|(a, b)| (a - b) * (a - b)).sum();
    (dm + ds).sqrt()
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub values: Vec<Vec<f64>>,
    pub probe_count: usize,
    pub probe_seed: u64,
    pub source: String,
}

/// Mean per-probe distance between every pair of policies.
pub fn policy_distance_matrix(policies: &[&ActorParams], probes: &ProbeSet) -> Result<DistanceMatrix> {
    if probes.count() == 0 {
        return Err(Error::InvalidArgument("probe set must not be empty".into()));
    }
    for p in policies {
        same_arch(&p.arch, &policies[0].arch)?;
    }
    let outs: Vec<DistBatch> = policies
        .iter()
        .map(|p| single_step(p, probes).map(|o| o.dists.into_iter().next().expect("one step")))
        .collect::<Result<_>>()?;
    enum Prepared {
        Probs(Matrix),
        Gauss(Matrix, Matrix),
    }
    let prepared: Vec<Prepared> = outs
        .iter()
        .map(|d| match d {
            DistBatch::Discrete { logits } => Prepared::Probs(softmax_rows(logits)),
            DistBatch::Continuous { mean, log_std, .. } => {
                let mut s = log_std.clone();
                s.as_mut_slice().iter_mut().for_each(|v| *v = v.exp());
                Prepared::Gauss(mean.clone(), s)
            }
        })
        .collect();
    let n = policies.len();
    let b = probes.count();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let mut total = 0.0;
            for r in 0..b {
                total += match (&prepared[i], &prepared[j]) {
                    (Prepared::Probs(p), Prepared::Probs(q)) => discrete_w1(p.row(r), q.row(r)),
                    (Prepared::Gauss(m1, s1), Prepared::Gauss(m2, s2)) => {
                        gaussian_w2(m1.row(r), s1.row(r), m2.row(r), s2.row(r))
                    }
                    _ => return Err(Error::Shape("mixed action kinds".into())),
                };
            }
            values[i][j] = total / b as f64;
            values[j][i] = values[i][j];
        }
    }
    Ok(DistanceMatrix { values, probe_count: b, probe_seed: probes.seed, source: probes.source.clone() })
}

/// Hidden layers whose activations are reported, with their labels.
pub const HEATMAP_LAYERS: [(LayerId, &str); 4] =
    [(LayerId::Fc1, "fc1"), (LayerId::Fc2, "fc2"), (LayerId::GruH, "gru"), (LayerId::Post, "post")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// `[agent][layer][unit]` mean |activation| over probes.
    pub mean_abs: Vec<Vec<Vec<f64>>>,
    /// Per layer, mean pairwise cosine similarity across agents.
    pub cosine: Vec<f64>,
}

/// Cosine similarity; two zero vectors count as identical.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    dot(a, b) / (na * nb)
}

pub fn activation_heatmap(policies: &[&ActorParams], probes: &ProbeSet) -> Result<Heatmap> {
    for p in policies {
        same_arch(&p.arch, &policies[0].arch)?;
    }
    let b = probes.count() as f64;
    let mut mean_abs = Vec::with_capacity(policies.len());
    for p in policies {
        let out = single_step(p, probes)?;
        let per_layer: Vec<Vec<f64>> = HEATMAP_LAYERS
            .iter()
            .map(|&(layer, _)| {
                let act = out.trace.activations(0, layer).expect("hidden layer");
                (0..act.cols())
                    .map(|c| (0..act.rows()).map(|r| act.get(r, c).abs()).sum::<f64>() / b)
                    .collect::<Vec<f64>>()
            })
            .collect();
        mean_abs.push(per_layer);
    }
    let n = policies.len();
    let cosine = (0..HEATMAP_LAYERS.len())
        .map(|l| {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..n {
                for j in i + 1..n {
                    total += cosine_similarity(&mean_abs[i][l], &mean_abs[j][l]);
                    pairs += 1;
                }
            }
            if pairs == 0 {
                1.0
            } else {
                total / pairs as f64
            }
        })
        .collect();
    Ok(Heatmap { mean_abs, cosine })
}

/// Trainable parameters of one regime in one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub regime: RegimeKind,
    pub phase: Phase,
    pub trainable: usize,
}

/// Counts enumerated from instantiated policy sets: every non-adapter regime
/// in pretraining, then adapters on the ps-id (and, if clustered,
/// cluster-shared) backbone.
pub fn param_budgets(base: &TrainSpec, lora: &LoraSpec) -> Result<Vec<ParamBudget>> {
    let mut rng = RngStream::new(0, 0);
    let n = base.env.n_agents;
    let mut out = Vec::new();
    let mut backbones = Vec::new();
    for kind in RegimeKind::ALL.iter().copied().filter(|k| !k.is_lora()) {
        if kind.is_clustered() && base.regime.clusters.is_empty() {
            continue;
        }
        let clusters = if kind.is_clustered() { base.regime.clusters.clone() } else { Vec::new() };
        let regime = RegimeSpec { kind, clusters, lora: None };
        let spec = TrainSpec { regime: regime.clone(), ..base.clone() };
        let set = PolicySet::init(regime, spec.arch()?, n, &mut rng)?;
        out.push(ParamBudget { regime: kind, phase: Phase::Pretrain, trainable: set.trainable_param_count() });
        backbones.push(set);
    }
    for set in &backbones {
        if let Ok(adapted) = PolicySet::with_adapters(set, lora.clone(), &mut rng) {
            out.push(ParamBudget {
                regime: adapted.regime.kind,
                phase: Phase::Finetune,
                trainable: adapted.trainable_param_count(),
            });
        }
    }
    Ok(out)
}

/// Measured wall-clock of one completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub regime: RegimeKind,
    pub phase: Phase,
    pub env_steps: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub regime: RegimeKind,
    pub phase: Phase,
    pub trainable: usize,
    /// `None` when no timed run of this regime and phase exists.
    pub ms_per_1k_steps: Option<f64>,
}

pub fn efficiency_report(budgets: &[ParamBudget], timings: &[RunTiming]) -> Result<Vec<EfficiencyRow>> {
    if budgets.is_empty() {
        return Err(Error::InvalidArgument("no runs to report".into()));
    }
    Ok(budgets
        .iter()
        .map(|b| {
            let (steps, ms) = timings
                .iter()
                .filter(|t| t.regime == b.regime && t.phase == b.phase)
                .fold((0u64, 0u64), |(s, m), t| (s + t.env_steps, m + t.wall_ms));
            EfficiencyRow {
                regime: b.regime,
                phase: b.phase,
                trainable: b.trainable,
                ms_per_1k_steps: (steps > 0).then(|| ms as f64 * 1000.0 / steps as f64),
            }
        })
        .collect())
}
