use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub num_minibatch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub chunk_len: usize,
    /// Environment copies stepped per iteration.
    pub rollout_threads: usize,
    /// Steps per copy per iteration.
    pub rollout_steps: usize,
    /// OS threads the copies are split across; does not change results.
    pub rollout_workers: usize,
    pub adam_eps: f64,
    pub eval_episodes: usize,
    /// Env steps between evaluations; 0 evaluates only at milestones.
    pub eval_interval: u64,
    /// Agent order for sequential updates; empty means ascending.
    pub a2po_order: Vec<usize>,
}

impl TrainHyper {
    pub fn discrete() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 5,
            num_minibatch: 1,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            entropy_coef: 0.01,
            max_grad_norm: 10.0,
            chunk_len: 10,
            rollout_threads: 8,
            rollout_steps: 100,
            rollout_workers: 1,
            adam_eps: 1e-5,
            eval_episodes: 100,
            eval_interval: 0,
            a2po_order: Vec::new(),
        }
    }

    pub fn continuous() -> Self {
        Self { gae_lambda: 0.93, actor_lr: 3e-4, critic_lr: 3e-4, entropy_coef: 0.0, ..Self::discrete() }
    }

    pub fn defaults(continuous: bool) -> Self {
        if continuous {
            Self::continuous()
        } else {
            Self::discrete()
        }
    }

    pub fn steps_per_iteration(&self) -> u64 {
        (self.rollout_threads * self.rollout_steps) as u64
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        let pos = |v: f64, f: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(f, "must be a positive finite number"))
            }
        };
        pos(self.actor_lr, "hyper.actor_lr")?;
        pos(self.critic_lr, "hyper.critic_lr")?;
        pos(self.clip, "hyper.clip")?;
        pos(self.max_grad_norm, "hyper.max_grad_norm")?;
        pos(self.adam_eps, "hyper.adam_eps")?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("hyper.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("hyper.gae_lambda", "must lie in [0, 1]"));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::config("hyper.entropy_coef", "must be non-negative"));
        }
        for (v, f) in [
            (self.epochs, "hyper.epochs"),
            (self.num_minibatch, "hyper.num_minibatch"),
            (self.chunk_len, "hyper.chunk_len"),
            (self.rollout_threads, "hyper.rollout_threads"),
            (self.rollout_steps, "hyper.rollout_steps"),
            (self.rollout_workers, "hyper.rollout_workers"),
            (self.eval_episodes, "hyper.eval_episodes"),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if self.rollout_steps % self.chunk_len != 0 {
            return Err(Error::config("hyper.rollout_steps", "must be a multiple of hyper.chunk_len"));
        }
        let sequences = self.rollout_threads * (self.rollout_steps / self.chunk_len);
        if sequences % self.num_minibatch != 0 {
            return Err(Error::config("hyper.num_minibatch", "must divide the number of training sequences"));
        }
        if self.eval_interval % self.steps_per_iteration() != 0 {
            return Err(Error::config("hyper.eval_interval", "must be a multiple of the steps per iteration"));
        }
        if !self.a2po_order.is_empty() {
            let mut sorted = self.a2po_order.clone();
            sorted.sort_unstable();
            if sorted != (0..n_agents).collect::<Vec<_>>() {
                return Err(Error::config("hyper.a2po_order", "must be a permutation of the agent indices"));
            }
        }
        Ok(())
    }

    pub fn agent_order(&self, n_agents: usize) -> Vec<usize> {
        if self.a2po_order.is_empty() {
            (0..n_agents).collect()
        } else {
            self.a2po_order.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainHyper::discrete().validate(3).unwrap();
        TrainHyper::continuous().validate(3).unwrap();
        let mut h = TrainHyper::discrete();
        h.rollout_steps = 15;
        assert!(h.validate(3).is_err());
        let mut h = TrainHyper::discrete();
        h.a2po_order = vec![0, 0, 1];
        assert!(h.validate(3).is_err());
    }
}
