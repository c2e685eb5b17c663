//! On-policy trajectory collection over a set of environment copies.
//!
//! Each environment copy owns its random stream, so splitting the copies
//! across worker threads yields the same batch as stepping them all in one.

use serde::{Deserialize, Serialize};

use crate::envs::{Env, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::nn::{forward_view, sample, Action, ActorParams, DistBatch, SampleMode, SeqInput};
use crate::numerics::{Matrix, RngStream};

/// Actions of one agent at one step, one entry per environment copy.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionRecord {
    Discrete(Vec<usize>),
    /// Pre-squash Gaussian draws, `E × act_dim`.
    Continuous(Matrix),
}

impl ActionRecord {
    fn len(&self) -> usize {
        match self {
            ActionRecord::Discrete(v) => v.len(),
            ActionRecord::Continuous(m) => m.rows(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> ActionRecord {
        match self {
            ActionRecord::Discrete(v) => ActionRecord::Discrete(idx.iter().map(|&i| v[i]).collect()),
            ActionRecord::Continuous(m) => ActionRecord::Continuous(m.select_rows(idx)),
        }
    }

    pub fn concat(parts: &[&ActionRecord]) -> Result<ActionRecord> {
        match parts.first() {
            Some(ActionRecord::Discrete(_)) => {
                let mut out = Vec::new();
                for p in parts {
                    match p {
                        ActionRecord::Discrete(v) => out.extend_from_slice(v),
                        _ => return Err(Error::Shape("mixed action records".into())),
                    }
                }
                Ok(ActionRecord::Discrete(out))
            }
            Some(ActionRecord::Continuous(_)) => {
                let mut ms = Vec::new();
                for p in parts {
                    match p {
                        ActionRecord::Continuous(m) => ms.push(m),
                        _ => return Err(Error::Shape("mixed action records".into())),
                    }
                }
                Ok(ActionRecord::Continuous(Matrix::vstack(&ms)?))
            }
            None => Ok(ActionRecord::Discrete(Vec::new())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub ret: f64,
    pub length: usize,
    pub success: bool,
}

/// Time-major trajectories: `T` steps from each of `E` environment copies.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub n_agents: usize,
    pub n_envs: usize,
    pub steps: usize,
    pub chunk_len: usize,
    /// `[agent][t]`, `E × input_dim` (agent id included when used).
    pub obs: Vec<Vec<Matrix>>,
    pub actions: Vec<Vec<ActionRecord>>,
    /// `[agent][t][e]`, recorded at sampling time.
    pub log_probs: Vec<Vec<Vec<f64>>>,
    /// `[t][e]`, shared team reward.
    pub rewards: Vec<Vec<f64>>,
    /// `[t][e]`: the episode ended with this transition.
    pub dones: Vec<Vec<bool>>,
    /// `[t][e]`: the hidden state was reset before this step.
    pub episode_start: Vec<Vec<bool>>,
    /// `[t]`, `E × state_dim`.
    pub states: Vec<Matrix>,
    /// State after the last step, for bootstrapping.
    pub next_states: Matrix,
    /// `[agent][chunk]`, `E × hidden`: hidden state entering each chunk.
    pub h_chunk: Vec<Vec<Matrix>>,
    pub finished: Vec<EpisodeStat>,
}

impl RolloutBatch {
    pub fn n_chunks(&self) -> usize {
        self.steps / self.chunk_len
    }

    /// Joins batches from disjoint environment ranges, in order.
    pub fn concat_envs(parts: Vec<RolloutBatch>) -> Result<RolloutBatch> {
        let mut it = parts.into_iter();
        let mut out = it.next().ok_or_else(|| Error::InvalidArgument("no rollout parts".into()))?;
        for p in it {
            if p.steps != out.steps || p.n_agents != out.n_agents {
                return Err(Error::Shape("rollout parts disagree on layout".into()));
            }
            for a in 0..out.n_agents {
                for t in 0..out.steps {
                    out.obs[a][t] = Matrix::vstack(&[&out.obs[a][t], &p.obs[a][t]])?;
                    out.actions[a][t] = ActionRecord::concat(&[&out.actions[a][t], &p.actions[a][t]])?;
                    out.log_probs[a][t].extend_from_slice(&p.log_probs[a][t]);
                }
                for c in 0..out.h_chunk[a].len() {
                    out.h_chunk[a][c] = Matrix::vstack(&[&out.h_chunk[a][c], &p.h_chunk[a][c]])?;
                }
            }
            for t in 0..out.steps {
                out.rewards[t].extend_from_slice(&p.rewards[t]);
                out.dones[t].extend_from_slice(&p.dones[t]);
                out.episode_start[t].extend_from_slice(&p.episode_start[t]);
                out.states[t] = Matrix::vstack(&[&out.states[t], &p.states[t]])?;
            }
            out.next_states = Matrix::vstack(&[&out.next_states, &p.next_states])?;
            out.n_envs += p.n_envs;
            out.finished.extend(p.finished);
        }
        Ok(out)
    }
}

/// Live environments and recurrent state carried between iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutState {
    pub envs: Vec<Env>,
    pub rngs: Vec<RngStream>,
    /// `[e]`, `n_agents × hidden`.
    pub hidden: Vec<Matrix>,
    pub episode_start: Vec<bool>,
    pub ep_return: Vec<f64>,
    pub ep_len: Vec<usize>,
    pub id_dim: usize,
}

impl RolloutState {
    pub fn new(cfg: &EnvConfig, n_envs: usize, hidden_dim: usize, id_dim: usize, rng: &RngStream) -> Result<Self> {
        if n_envs == 0 {
            return Err(Error::config("hyper.rollout_threads", "need at least one environment copy"));
        }
        let mut envs = Vec::with_capacity(n_envs);
        let mut rngs = Vec::with_capacity(n_envs);
        for e in 0..n_envs {
            let mut r = rng.fork(e as u64);
            let mut env = Env::new(cfg)?;
            env.reset(r.next_u64());
            envs.push(env);
            rngs.push(r);
        }
        let n = cfg.n_agents;
        Ok(Self {
            envs,
            rngs,
            hidden: vec![Matrix::zeros(n, hidden_dim); n_envs],
            episode_start: vec![true; n_envs],
            ep_return: vec![0.0; n_envs],
            ep_len: vec![0; n_envs],
            id_dim,
        })
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }
}

/// Observation row with the one-hot agent id appended when `id_dim > 0`.
pub fn agent_input(obs: &[f64], agent: usize, id_dim: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(obs.len() + id_dim);
    v.extend_from_slice(obs);
    for j in 0..id_dim {
        v.push(if j == agent { 1.0 } else { 0.0 });
    }
    v
}

struct Slice<'a> {
    envs: &'a mut [Env],
    rngs: &'a mut [RngStream],
    hidden: &'a mut [Matrix],
    starts: &'a mut [bool],
    ep_return: &'a mut [f64],
    ep_len: &'a mut [usize],
}

fn collect_slice(
    policies: &[&ActorParams],
    s: Slice<'_>,
    steps: usize,
    chunk_len: usize,
    id_dim: usize,
) -> Result<RolloutBatch> {
    let n_agents = policies.len();
    let ne = s.envs.len();
    let arch = policies[0].arch;
    let hd = arch.hidden_dim;
    let mut b = RolloutBatch {
        n_agents,
        n_envs: ne,
        steps,
        chunk_len,
        obs: vec![Vec::with_capacity(steps); n_agents],
        actions: vec![Vec::with_capacity(steps); n_agents],
        log_probs: vec![Vec::with_capacity(steps); n_agents],
        rewards: Vec::with_capacity(steps),
        dones: Vec::with_capacity(steps),
        episode_start: Vec::with_capacity(steps),
        states: Vec::with_capacity(steps),
        next_states: Matrix::zeros(0, 0),
        h_chunk: vec![Vec::new(); n_agents],
        finished: Vec::new(),
    };
    for t in 0..steps {
        let per_env_obs: Vec<Vec<Vec<f64>>> = s.envs.iter().map(|e| e.observations()).collect();
        let states: Vec<Vec<f64>> = s.envs.iter().map(|e| e.global_state()).collect();
        let sd = states[0].len();
        b.states.push(Matrix::from_vec(ne, sd, states.concat())?);
        b.episode_start.push(s.starts.to_vec());
        let mut joint: Vec<Vec<Action>> = vec![Vec::with_capacity(n_agents); ne];
        for (i, p) in policies.iter().enumerate() {
            let rows: Vec<f64> =
                per_env_obs.iter().flat_map(|o| agent_input(&o[i], i, id_dim)).collect();
            let x = Matrix::from_vec(ne, arch.input_dim(), rows)?;
            let h0 = Matrix::from_fn(ne, hd, |e, j| s.hidden[e].get(i, j));
            if t % chunk_len == 0 {
                b.h_chunk[i].push(h0.clone());
            }
            let input = SeqInput { obs: vec![x.clone()], episode_start: vec![s.starts.to_vec()] };
            let out = forward_view(&arch, &p.view(), &input, &h0)?;
            for e in 0..ne {
                s.hidden[e].row_mut(i).copy_from_slice(out.h_final.row(e));
            }
            let dists = &out.dists[0];
            let mut lps = Vec::with_capacity(ne);
            let record = match dists {
                DistBatch::Discrete { .. } => {
                    let mut acts = Vec::with_capacity(ne);
                    for e in 0..ne {
                        let smp = sample(&dists.row(e), SampleMode::Stochastic, &mut s.rngs[e]);
                        acts.push(smp.action.as_discrete().expect("discrete head"));
                        lps.push(smp.log_prob);
                        joint[e].push(smp.action);
                    }
                    ActionRecord::Discrete(acts)
                }
                DistBatch::Continuous { mean, .. } => {
                    let mut u = Matrix::zeros(ne, mean.cols());
                    for e in 0..ne {
                        let smp = sample(&dists.row(e), SampleMode::Stochastic, &mut s.rngs[e]);
                        u.row_mut(e).copy_from_slice(&smp.presquash);
                        lps.push(smp.log_prob);
                        joint[e].push(smp.action);
                    }
                    ActionRecord::Continuous(u)
                }
            };
            b.obs[i].push(x);
            b.actions[i].push(record);
            b.log_probs[i].push(lps);
        }
        let mut rewards = Vec::with_capacity(ne);
        let mut dones = Vec::with_capacity(ne);
        for e in 0..ne {
            let r = s.envs[e].step(&joint[e])?;
            s.ep_return[e] += r.reward;
            s.ep_len[e] += 1;
            if r.done {
                b.finished.push(EpisodeStat {
                    ret: s.ep_return[e],
                    length: s.ep_len[e],
                    success: s.envs[e].is_success(),
                });
                s.ep_return[e] = 0.0;
                s.ep_len[e] = 0;
                let seed = s.rngs[e].next_u64();
                s.envs[e].reset(seed);
            }
            s.starts[e] = r.done;
            rewards.push(r.reward);
            dones.push(r.done);
        }
        b.rewards.push(rewards);
        b.dones.push(dones);
    }
    let states: Vec<Vec<f64>> = s.envs.iter().map(|e| e.global_state()).collect();
    let sd = states[0].len();
    b.next_states = Matrix::from_vec(ne, sd, states.concat())?;
    Ok(b)
}

/// Collects `steps` joint steps from every environment copy.
///
/// `policies[i]` is the (effective) actor agent `i` acts with; it must stay
/// fixed for the call. `workers > 1` splits the copies across threads.
pub fn collect_rollouts(
    policies: &[&ActorParams],
    state: &mut RolloutState,
    steps: usize,
    chunk_len: usize,
    workers: usize,
) -> Result<RolloutBatch> {
    if policies.is_empty() || state.envs.is_empty() {
        return Err(Error::InvalidArgument("no agents or no environments".into()));
    }
    if policies.len() != state.envs[0].n_agents() {
        return Err(Error::Shape("one policy per agent required".into()));
    }
    if chunk_len == 0 || steps == 0 || steps % chunk_len != 0 {
        return Err(Error::config("hyper.rollout_steps", "rollout length must be a positive multiple of the chunk length"));
    }
    let ne = state.envs.len();
    let workers = workers.clamp(1, ne);
    let per = ne.div_ceil(workers);
    let id_dim = state.id_dim;
    let slices: Vec<Slice<'_>> = state
        .envs
        .chunks_mut(per)
        .zip(state.rngs.chunks_mut(per))
        .zip(state.hidden.chunks_mut(per))
        .zip(state.episode_start.chunks_mut(per))
        .zip(state.ep_return.chunks_mut(per))
        .zip(state.ep_len.chunks_mut(per))
        .map(|(((((envs, rngs), hidden), starts), ep_return), ep_len)| Slice {
            envs,
            rngs,
            hidden,
            starts,
            ep_return,
            ep_len,
        })
        .collect();
    let parts: Vec<Result<RolloutBatch>> = if slices.len() == 1 {
        slices.into_iter().map(|s| collect_slice(policies, s, steps, chunk_len, id_dim)).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = slices
                .into_iter()
                .map(|s| scope.spawn(move || collect_slice(policies, s, steps, chunk_len, id_dim)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invariant("rollout worker panicked".into()))))
                .collect()
        })
    };
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let batch = RolloutBatch::concat_envs(parts)?;
    debug_assert!(batch.actions.iter().all(|a| a.iter().all(|r| r.len() == ne)));
    Ok(batch)
}
