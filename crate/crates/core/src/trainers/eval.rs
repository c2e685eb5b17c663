//! Deterministic-action evaluation on a fixed set of episode seeds.

use serde::{Deserialize, Serialize};

use super::rollout::agent_input;
use crate::envs::{Env, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::nn::{forward_view, sample, Action, ActorParams, SampleMode, SeqInput};
use crate::numerics::{Matrix, RngStream};

/// Stream id for evaluation episode seeds; training resets draw from other streams.
pub const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_return: f64,
    pub median_return: f64,
    pub success_rate: f64,
    pub mean_length: f64,
    pub episodes: usize,
}

impl EvalMetrics {
    pub const CSV_HEADER: &'static str = "mean_return,median_return,success_rate,mean_length";

    /// Shortest round-trip formatting, so equal metrics give equal bytes.
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.mean_return, self.median_return, self.success_rate, self.mean_length)
    }

    pub fn from_episodes(returns: &[f64], lengths: &[usize], successes: &[bool]) -> Self {
        let n = returns.len();
        let nf = n as f64;
        Self {
            mean_return: returns.iter().sum::<f64>() / nf,
            median_return: median(returns),
            success_rate: successes.iter().filter(|&&s| s).count() as f64 / nf,
            mean_length: lengths.iter().sum::<usize>() as f64 / nf,
            episodes: n,
        }
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn episode_seed(seed: u64, k: usize) -> u64 {
    RngStream::new(seed, EVAL_STREAM).fork(k as u64).next_u64()
}

/// Runs `n_episodes` episodes in lockstep with deterministic actions.
pub fn evaluate(
    policies: &[&ActorParams],
    env_cfg: &EnvConfig,
    id_dim: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    if policies.len() != env_cfg.n_agents {
        return Err(Error::Shape("one policy per agent required".into()));
    }
    let arch = policies[0].arch;
    let n = env_cfg.n_agents;
    let mut envs: Vec<Env> = (0..n_episodes)
        .map(|k| {
            let mut e = Env::new(env_cfg)?;
            e.reset(episode_seed(seed, k));
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let mut hidden: Vec<Matrix> = vec![Matrix::zeros(n_episodes, arch.hidden_dim); n];
    let mut returns = vec![0.0; n_episodes];
    let mut first = true;
    let mut dummy = RngStream::new(0, 0);
    loop {
        let active: Vec<usize> = (0..n_episodes).filter(|&k| !envs[k].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let obs: Vec<Vec<Vec<f64>>> = active.iter().map(|&k| envs[k].observations()).collect();
        let mut joint: Vec<Vec<Action>> = vec![Vec::with_capacity(n); active.len()];
        for (i, p) in policies.iter().enumerate() {
            let rows: Vec<f64> = obs.iter().flat_map(|o| agent_input(&o[i], i, id_dim)).collect();
            let x = Matrix::from_vec(active.len(), arch.input_dim(), rows)?;
            let h0 = hidden[i].select_rows(&active);
            let input = SeqInput { obs: vec![x], episode_start: vec![vec![first; active.len()]] };
            let out = forward_view(&arch, &p.view(), &input, &h0)?;
            for (r, &k) in active.iter().enumerate() {
                hidden[i].row_mut(k).copy_from_slice(out.h_final.row(r));
                let s = sample(&out.dists[0].row(r), SampleMode::Deterministic, &mut dummy);
                joint[r].push(s.action);
            }
        }
        for (r, &k) in active.iter().enumerate() {
            returns[k] += envs[k].step(&joint[r])?.reward;
        }
        first = false;
    }
    let lengths: Vec<usize> = envs.iter().map(|e| e.steps_taken()).collect();
    let successes: Vec<bool> = envs.iter().map(|e| e.is_success()).collect();
    Ok(EvalMetrics::from_episodes(&returns, &lengths, &successes))
}
