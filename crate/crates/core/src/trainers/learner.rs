//! Simultaneous (MAPPO) and sequential (A2PO-style) learner iterations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::gae::{compute_gae, normalize_advantages};
use super::hyper::TrainHyper;
use super::ppo::{critic_update, ppo_update, unit_segments, AgentSeqs, PpoStats};
use super::regime::{PolicySet, Unit};
use super::rollout::RolloutBatch;
use crate::error::{Error, Result};
use crate::nn::CriticParams;
use crate::numerics::{AdamState, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Learner {
    Mappo,
    A2po,
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Learner::Mappo => "mappo",
            Learner::A2po => "a2po",
        })
    }
}

impl FromStr for Learner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mappo" => Ok(Learner::Mappo),
            "a2po" => Ok(Learner::A2po),
            other => Err(Error::config("learner", format!("unknown learner `{other}`"))),
        }
    }
}

/// One Adam state per unit plus the critic's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub actor: Vec<AdamState>,
    pub critic: AdamState,
}

impl Optimizers {
    pub fn new(policy: &PolicySet, critic: &CriticParams, hyper: &TrainHyper) -> Self {
        let actor = policy
            .units()
            .iter()
            .map(|u| AdamState::new(policy.trainable(u), hyper.actor_lr, hyper.adam_eps))
            .collect();
        let critic = AdamState::new(critic.weights.iter().chain(&critic.biases), hyper.critic_lr, hyper.adam_eps);
        Self { actor, critic }
    }
}

/// Critic values, GAE targets and normalised advantages for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// `[t][e]`
    pub values: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

pub fn prepare(batch: &RolloutBatch, critic: &CriticParams, hyper: &TrainHyper) -> Result<Prepared> {
    let (t_n, e_n) = (batch.steps, batch.n_envs);
    let values: Vec<Vec<f64>> = batch.states.iter().map(|s| critic.values(s)).collect::<Result<_>>()?;
    let boot = critic.values(&batch.next_states)?;
    let mut adv = vec![vec![0.0; e_n]; t_n];
    let mut ret = vec![vec![0.0; e_n]; t_n];
    for e in 0..e_n {
        let r: Vec<f64> = (0..t_n).map(|t| batch.rewards[t][e]).collect();
        let v: Vec<f64> = (0..t_n).map(|t| values[t][e]).collect();
        let d: Vec<bool> = (0..t_n).map(|t| batch.dones[t][e]).collect();
        let (a, rt) = compute_gae(&r, &v, &d, boot[e], hyper.gamma, hyper.gae_lambda)?;
        for t in 0..t_n {
            adv[t][e] = a[t];
            ret[t][e] = rt[t];
        }
    }
    let mut flat: Vec<f64> = adv.concat();
    normalize_advantages(&mut flat);
    let advantages = flat.chunks(e_n).map(<[f64]>::to_vec).collect();
    Ok(Prepared { values, returns: ret, advantages })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub clip_frac: f64,
    /// Largest difference between stored and first-pass recomputed log-probs.
    pub logp_drift: f64,
}

fn fold(stats: &[PpoStats], value_loss: f64) -> IterationStats {
    let n = stats.len().max(1) as f64;
    IterationStats {
        policy_loss: stats.iter().map(|s| s.policy_loss).sum::<f64>() / n,
        value_loss,
        entropy: stats.iter().map(|s| s.entropy).sum::<f64>() / n,
        grad_norm: stats.iter().map(|s| s.grad_norm).sum::<f64>() / n,
        clip_frac: stats.iter().map(|s| s.clip_frac).sum::<f64>() / n,
        logp_drift: stats.iter().map(|s| s.first_pass_drift).fold(0.0, f64::max),
    }
}

fn agent_data(batch: &RolloutBatch, prep: &Prepared) -> Result<Vec<AgentSeqs>> {
    (0..batch.n_agents).map(|i| AgentSeqs::from_batch(batch, i, &prep.advantages)).collect()
}

fn update_critic(
    critic: &mut CriticParams,
    opt: &mut Optimizers,
    batch: &RolloutBatch,
    prep: &Prepared,
    hyper: &TrainHyper,
) -> Result<f64> {
    let states = Matrix::vstack(&batch.states.iter().collect::<Vec<_>>())?;
    let returns: Vec<f64> = prep.returns.concat();
    critic_update(critic, &mut opt.critic, &states, &returns, hyper)
}

/// Every unit updated on its agents' pooled transitions, then the critic.
pub fn mappo_iteration(
    policy: &mut PolicySet,
    critic: &mut CriticParams,
    opt: &mut Optimizers,
    batch: &RolloutBatch,
    hyper: &TrainHyper,
) -> Result<IterationStats> {
    let prep = prepare(batch, critic, hyper)?;
    let data = agent_data(batch, &prep)?;
    let mut stats = Vec::new();
    for (u, unit) in policy.units().iter().enumerate() {
        let mine: Vec<&AgentSeqs> = unit.agents.iter().map(|&i| &data[i]).collect();
        let segs = unit_segments(unit, &mine)?;
        stats.push(ppo_update(policy, unit, &segs, hyper, &mut opt.actor[u])?);
    }
    let vl = update_critic(critic, opt, batch, &prep, hyper)?;
    Ok(fold(&stats, vl))
}

/// Agents updated one after another in `order`, each on its own transitions
/// and stored behaviour log-probs; advantages fixed before the loop, critic after.
pub fn a2po_iteration(
    policy: &mut PolicySet,
    critic: &mut CriticParams,
    opt: &mut Optimizers,
    batch: &RolloutBatch,
    hyper: &TrainHyper,
    order: &[usize],
) -> Result<IterationStats> {
    let prep = prepare(batch, critic, hyper)?;
    let data = agent_data(batch, &prep)?;
    let units = policy.units();
    let mut stats = Vec::new();
    for &agent in order {
        if agent >= policy.n_agents {
            return Err(Error::InvalidArgument(format!("agent {agent} in update order out of range")));
        }
        let u = policy.unit_of(agent);
        let unit = Unit { kind: units[u].kind, agents: vec![agent] };
        let segs = unit_segments(&unit, &[&data[agent]])?;
        stats.push(ppo_update(policy, &units[u], &segs, hyper, &mut opt.actor[u])?);
    }
    let vl = update_critic(critic, opt, batch, &prep, hyper)?;
    Ok(fold(&stats, vl))
}
