//! Clipped-surrogate actor updates over recurrent chunks, and the critic regression.

use super::hyper::TrainHyper;
use super::regime::{PolicySet, Unit, UnitKind};
use super::rollout::{ActionRecord, RolloutBatch};
use crate::error::{Error, Result};
use crate::nn::dist::{categorical_grads, categorical_entropy, gaussian_entropy, gaussian_grads, log_softmax, squashed_log_prob};
use crate::nn::{backward_view, forward_view, ActorGrads, ActorView, CriticParams, DistBatch, HeadGrad, SeqInput};
use crate::numerics::{AdamState, Matrix};

/// Training sequences for one or more agents: `B` chunks of length `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSeqs {
    /// Agent of each row.
    pub agents: Vec<usize>,
    pub input: SeqInput,
    /// `B × hidden`
    pub h0: Matrix,
    /// `[t']`, `B` rows each
    pub actions: Vec<ActionRecord>,
    /// `[t'][b]`
    pub old_logp: Vec<Vec<f64>>,
    /// `[t'][b]`, already normalised
    pub adv: Vec<Vec<f64>>,
}

impl AgentSeqs {
    pub fn rows(&self) -> usize {
        self.agents.len()
    }

    pub fn samples(&self) -> usize {
        self.rows() * self.input.len()
    }

    /// Chunks of `agent`'s data; row `e·C + c` is chunk `c` of copy `e`.
    pub fn from_batch(batch: &RolloutBatch, agent: usize, adv: &[Vec<f64>]) -> Result<Self> {
        let (l, c_n, e_n) = (batch.chunk_len, batch.n_chunks(), batch.n_envs);
        if adv.len() != batch.steps {
            return Err(Error::Shape("advantages do not match batch length".into()));
        }
        let map: Vec<(usize, usize)> = (0..e_n).flat_map(|e| (0..c_n).map(move |c| (e, c))).collect();
        let mut obs = Vec::with_capacity(l);
        let mut starts = Vec::with_capacity(l);
        let mut actions = Vec::with_capacity(l);
        let mut old_logp = Vec::with_capacity(l);
        let mut advs = Vec::with_capacity(l);
        for tp in 0..l {
            let d = batch.obs[agent][0].cols();
            let mut data = Vec::with_capacity(map.len() * d);
            for &(e, c) in &map {
                data.extend_from_slice(batch.obs[agent][c * l + tp].row(e));
            }
            obs.push(Matrix::from_vec(map.len(), d, data)?);
            starts.push(map.iter().map(|&(e, c)| batch.episode_start[c * l + tp][e]).collect());
            let parts: Vec<ActionRecord> =
                map.iter().map(|&(e, c)| batch.actions[agent][c * l + tp].select(&[e])).collect();
            actions.push(ActionRecord::concat(&parts.iter().collect::<Vec<_>>())?);
            old_logp.push(map.iter().map(|&(e, c)| batch.log_probs[agent][c * l + tp][e]).collect());
            advs.push(map.iter().map(|&(e, c)| adv[c * l + tp][e]).collect());
        }
        let hd = batch.h_chunk[agent][0].cols();
        let h0 = Matrix::from_fn(map.len(), hd, |b, j| {
            let (e, c) = map[b];
            batch.h_chunk[agent][c].get(e, j)
        });
        Ok(Self {
            agents: vec![agent; map.len()],
            input: SeqInput { obs, episode_start: starts },
            h0,
            actions,
            old_logp,
            adv: advs,
        })
    }

    pub fn concat(parts: &[&AgentSeqs]) -> Result<Self> {
        let l = parts.first().map_or(0, |p| p.input.len());
        if parts.iter().any(|p| p.input.len() != l) {
            return Err(Error::Shape("sequence lengths differ".into()));
        }
        let mut out = AgentSeqs {
            agents: parts.iter().flat_map(|p| p.agents.iter().copied()).collect(),
            input: SeqInput { obs: Vec::with_capacity(l), episode_start: Vec::with_capacity(l) },
            h0: Matrix::vstack(&parts.iter().map(|p| &p.h0).collect::<Vec<_>>())?,
            actions: Vec::with_capacity(l),
            old_logp: Vec::with_capacity(l),
            adv: Vec::with_capacity(l),
        };
        for t in 0..l {
            out.input.obs.push(Matrix::vstack(&parts.iter().map(|p| &p.input.obs[t]).collect::<Vec<_>>())?);
            out.input.episode_start.push(parts.iter().flat_map(|p| p.input.episode_start[t].iter().copied()).collect());
            out.actions.push(ActionRecord::concat(&parts.iter().map(|p| &p.actions[t]).collect::<Vec<_>>())?);
            out.old_logp.push(parts.iter().flat_map(|p| p.old_logp[t].iter().copied()).collect());
            out.adv.push(parts.iter().flat_map(|p| p.adv[t].iter().copied()).collect());
        }
        Ok(out)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        AgentSeqs {
            agents: idx.iter().map(|&i| self.agents[i]).collect(),
            input: SeqInput {
                obs: self.input.obs.iter().map(|m| m.select_rows(idx)).collect(),
                episode_start: self.input.episode_start.iter().map(|s| idx.iter().map(|&i| s[i]).collect()).collect(),
            },
            h0: self.h0.select_rows(idx),
            actions: self.actions.iter().map(|a| a.select(idx)).collect(),
            old_logp: self.old_logp.iter().map(|v| idx.iter().map(|&i| v[i]).collect()).collect(),
            adv: self.adv.iter().map(|v| idx.iter().map(|&i| v[i]).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SurrogateStats {
    /// Σ of the per-sample loss (surrogate and entropy terms), already divided by the pool size.
    pub loss: f64,
    pub entropy_sum: f64,
    pub clipped: usize,
    pub samples: usize,
    /// Largest |log π_new − log π_old| seen.
    pub max_logp_drift: f64,
}

impl SurrogateStats {
    fn merge(&mut self, o: &SurrogateStats) {
        self.loss += o.loss;
        self.entropy_sum += o.entropy_sum;
        self.clipped += o.clipped;
        self.samples += o.samples;
        self.max_logp_drift = self.max_logp_drift.max(o.max_logp_drift);
    }
}

/// Gradient of the pooled clipped objective restricted to `seqs`.
///
/// `inv_m` is `1 / (pool size)`; the pool may extend beyond `seqs`.
pub fn surrogate_gradients(
    view: &ActorView<'_>,
    arch: &crate::nn::ActorArchitecture,
    seqs: &AgentSeqs,
    clip: f64,
    entropy_coef: f64,
    inv_m: f64,
) -> Result<(ActorGrads, SurrogateStats)> {
    let out = forward_view(arch, view, &seqs.input, &seqs.h0)?;
    let mut st = SurrogateStats::default();
    let mut upstream = Vec::with_capacity(out.dists.len());
    let w_ent = -entropy_coef * inv_m;
    for (t, d) in out.dists.iter().enumerate() {
        let rows = d.batch();
        let mut g = HeadGrad::zeros(arch.action, rows);
        for b in 0..rows {
            let (logp, ent) = match (d, &seqs.actions[t]) {
                (DistBatch::Discrete { logits }, ActionRecord::Discrete(a)) => {
                    let lp = log_softmax(logits.row(b));
                    (lp[a[b]], categorical_entropy(logits.row(b)))
                }
                (DistBatch::Continuous { mean, log_std, .. }, ActionRecord::Continuous(u)) => {
                    (squashed_log_prob(mean.row(b), log_std.row(b), u.row(b)), gaussian_entropy(log_std.row(b)))
                }
                _ => return Err(Error::Shape("action record does not match head".into())),
            };
            let old = seqs.old_logp[t][b];
            let a = seqs.adv[t][b];
            let ratio = (logp - old).exp();
            let s1 = ratio * a;
            let s2 = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
            let obj = s1.min(s2);
            let w_lp = if s1 <= s2 { -ratio * a * inv_m } else { 0.0 };
            if s2 < s1 {
                st.clipped += 1;
            }
            st.loss += -obj * inv_m - entropy_coef * ent * inv_m;
            st.entropy_sum += ent;
            st.samples += 1;
            st.max_logp_drift = st.max_logp_drift.max((logp - old).abs());
            match (&mut g, d, &seqs.actions[t]) {
                (HeadGrad::Discrete { logits: gl }, DistBatch::Discrete { logits }, ActionRecord::Discrete(act)) => {
                    let row = categorical_grads(logits.row(b), act[b], w_lp, w_ent);
                    gl.row_mut(b).copy_from_slice(&row);
                }
                (
                    HeadGrad::Continuous { mean: gm, log_std: gs },
                    DistBatch::Continuous { mean, log_std, .. },
                    ActionRecord::Continuous(u),
                ) => {
                    let (dm, ds) = gaussian_grads(mean.row(b), log_std.row(b), u.row(b), w_lp, w_ent);
                    gm.row_mut(b).copy_from_slice(&dm);
                    gs.row_mut(b).copy_from_slice(&ds);
                }
                _ => unreachable!("checked above"),
            }
        }
        upstream.push(g);
    }
    if !st.loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite policy loss {}", st.loss)));
    }
    let grads = backward_view(arch, view, &out, &upstream)?;
    Ok((grads, st))
}

/// Arranges per-agent data into the segments a unit evaluates: shared
/// backbones pool every agent into one batch, other units keep agents apart.
pub fn unit_segments(unit: &Unit, per_agent: &[&AgentSeqs]) -> Result<Vec<AgentSeqs>> {
    match unit.kind {
        UnitKind::Backbone(_) => Ok(vec![AgentSeqs::concat(per_agent)?]),
        _ => Ok(per_agent.iter().map(|s| (*s).clone()).collect()),
    }
}

/// Unit-ordered gradient of the pooled loss over `segments`.
pub fn unit_gradients(
    policy: &PolicySet,
    unit: &Unit,
    segments: &[AgentSeqs],
    hyper: &TrainHyper,
) -> Result<(Vec<Matrix>, SurrogateStats)> {
    let total: usize = segments.iter().map(AgentSeqs::samples).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("empty update pool".into()));
    }
    let inv_m = 1.0 / total as f64;
    let arch = policy.arch();
    let mut grads = policy.zero_grads(unit);
    let mut stats = SurrogateStats::default();
    for seg in segments {
        let agent = seg.agents[0];
        let (g, st) = match unit.kind {
            UnitKind::Backbone(b) => {
                let p = &policy.backbones[b];
                surrogate_gradients(&p.view(), &arch, seg, hyper.clip, hyper.entropy_coef, inv_m)?
            }
            UnitKind::MtlJoint => {
                if seg.agents.iter().any(|&a| a != agent) {
                    return Err(Error::Invariant("multi-task segment mixes agents".into()));
                }
                let p = policy.agent_params(agent)?;
                surrogate_gradients(&p.view(), &arch, seg, hyper.clip, hyper.entropy_coef, inv_m)?
            }
            UnitKind::Adapter(i) => {
                if seg.agents.iter().any(|&a| a != i) {
                    return Err(Error::Invariant("adapter segment carries another agent's data".into()));
                }
                let eff = policy.effective_override(i)?.expect("adapter regime");
                let base = policy.backbone_for(i);
                surrogate_gradients(&base.view_with(&eff)?, &arch, seg, hyper.clip, hyper.entropy_coef, inv_m)?
            }
        };
        policy.accumulate(unit, agent, &g, &mut grads)?;
        stats.merge(&st);
    }
    Ok((grads, stats))
}

/// Scales `grads` so their joint norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub clip_frac: f64,
    /// Drift between stored and recomputed log-probs on the first pass.
    pub first_pass_drift: f64,
    pub updates: usize,
}

fn minibatch_rows(rows: usize, parts: usize, k: usize) -> Vec<usize> {
    let per = rows / parts;
    (k * per..(k + 1) * per).collect()
}

/// `epochs × num_minibatch` clipped-surrogate steps on one unit.
pub fn ppo_update(
    policy: &mut PolicySet,
    unit: &Unit,
    segments: &[AgentSeqs],
    hyper: &TrainHyper,
    adam: &mut AdamState,
) -> Result<PpoStats> {
    let mut out = PpoStats::default();
    for epoch in 0..hyper.epochs {
        for k in 0..hyper.num_minibatch {
            let mb: Vec<AgentSeqs>;
            let segs: &[AgentSeqs] = if hyper.num_minibatch == 1 {
                segments
            } else {
                mb = segments
                    .iter()
                    .map(|s| s.select(&minibatch_rows(s.rows(), hyper.num_minibatch, k)))
                    .collect();
                &mb
            };
            let (mut grads, st) = unit_gradients(policy, unit, segs, hyper)?;
            if epoch == 0 && k == 0 {
                out.first_pass_drift = st.max_logp_drift;
            }
            let norm = clip_grad_norm(&mut grads, hyper.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::Diverged("non-finite actor gradient".into()));
            }
            let grefs: Vec<&Matrix> = grads.iter().collect();
            adam.update(&mut policy.trainable_mut(unit), &grefs)?;
            out.policy_loss += st.loss;
            out.entropy += st.entropy_sum / st.samples as f64;
            out.grad_norm += norm;
            out.clip_frac += st.clipped as f64 / st.samples as f64;
            out.updates += 1;
        }
    }
    let n = out.updates.max(1) as f64;
    out.policy_loss /= n;
    out.entropy /= n;
    out.grad_norm /= n;
    out.clip_frac /= n;
    Ok(out)
}

/// Mean-squared-error regression of the critic onto `returns`; returns the mean loss.
pub fn critic_update(
    critic: &mut CriticParams,
    adam: &mut AdamState,
    states: &Matrix,
    returns: &[f64],
    hyper: &TrainHyper,
) -> Result<f64> {
    if states.rows() != returns.len() || returns.is_empty() {
        return Err(Error::Shape("critic targets do not match states".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    let rows = states.rows();
    for _ in 0..hyper.epochs {
        for k in 0..hyper.num_minibatch {
            let idx = minibatch_rows(rows, hyper.num_minibatch, k);
            let (x, y): (Matrix, Vec<f64>) = if hyper.num_minibatch == 1 {
                (states.clone(), returns.to_vec())
            } else {
                (states.select_rows(&idx), idx.iter().map(|&i| returns[i]).collect())
            };
            let (v, trace) = critic.forward(&x)?;
            let m = y.len() as f64;
            let loss = v.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite value loss {loss}")));
            }
            let dv: Vec<f64> = v.iter().zip(&y).map(|(a, b)| 2.0 * (a - b) / m).collect();
            let g = critic.backward(&trace, &dv)?;
            let mut grads: Vec<Matrix> = g.weights.into_iter().chain(g.biases).collect();
            clip_grad_norm(&mut grads, hyper.max_grad_norm);
            let grefs: Vec<&Matrix> = grads.iter().collect();
            let mut params: Vec<&mut Matrix> = critic.weights.iter_mut().chain(critic.biases.iter_mut()).collect();
            adam.update(&mut params, &grefs)?;
            total += loss;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
