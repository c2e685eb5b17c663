//! Colour-matched goal grid. Agent `i` is rewarded only for reaching goal `i`.
//!
//! Agents spawn on row 0 and may overlap. Goals are drawn from the remaining
//! rows so that no agent starts on a goal.

use serde::{Deserialize, Serialize};

use super::{check_arity, Environment, StepResult};
use crate::error::{Error, Result};
use crate::nn::{Action, ActionKind};
use crate::numerics::RngStream;

/// up, down, left, right, stay
pub const GRID_ACTIONS: usize = 5;
/// Fixed coordinate normaliser, independent of layout.
pub const GRID_OBS_SCALE: f64 = 6.0;
pub const STEP_COST: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridWorld {
    pub size: usize,
    pub n_agents: usize,
    pub limit: usize,
    pub homogeneous: bool,
    /// (x, y) per agent
    pub agents: Vec<(usize, usize)>,
    pub goals: Vec<(usize, usize)>,
    /// Hetero: agent i has reached goal i. Homogeneous: goal j has been covered.
    pub reached: Vec<bool>,
    pub t: usize,
    pub done: bool,
}

impl GridWorld {
    pub fn new(size: usize, n_agents: usize, limit: usize, homogeneous: bool) -> Self {
        let mut g = Self {
            size,
            n_agents,
            limit,
            homogeneous,
            agents: Vec::new(),
            goals: Vec::new(),
            reached: Vec::new(),
            t: 0,
            done: false,
        };
        g.reset(0);
        g
    }

    pub fn spawn_cells(size: usize, n: usize) -> Vec<(usize, usize)> {
        (0..n)
            .map(|i| {
                let x = if n == 1 { (size - 1) / 2 } else { i * (size - 1) / (n - 1) };
                (x, 0)
            })
            .collect()
    }

    /// Explicit layout, for tests and oracles.
    pub fn set_layout(&mut self, agents: Vec<(usize, usize)>, goals: Vec<(usize, usize)>) -> Result<()> {
        if agents.len() != self.n_agents || goals.len() != self.n_agents {
            return Err(Error::Env("layout arity does not match agent count".into()));
        }
        if agents.iter().chain(&goals).any(|&(x, y)| x >= self.size || y >= self.size) {
            return Err(Error::Env("layout cell outside grid".into()));
        }
        self.agents = agents;
        self.goals = goals;
        self.t = 0;
        self.done = false;
        self.reached = vec![false; self.n_agents];
        self.mark_reached();
        self.done = self.reached.iter().all(|&r| r);
        Ok(())
    }

    /// Updates flags; returns how many became true.
    fn mark_reached(&mut self) -> usize {
        let mut newly = 0;
        if self.homogeneous {
            for (j, g) in self.goals.iter().enumerate() {
                if !self.reached[j] && self.agents.iter().any(|a| a == g) {
                    self.reached[j] = true;
                    newly += 1;
                }
            }
        } else {
            for i in 0..self.n_agents {
                if !self.reached[i] && self.agents[i] == self.goals[i] {
                    self.reached[i] = true;
                    newly += 1;
                }
            }
        }
        newly
    }

    pub fn apply_move(size: usize, (x, y): (usize, usize), a: usize) -> (usize, usize) {
        match a {
            0 if y + 1 < size => (x, y + 1),
            1 if y > 0 => (x, y - 1),
            2 if x > 0 => (x - 1, y),
            3 if x + 1 < size => (x + 1, y),
            _ => (x, y),
        }
    }
}

impl Environment for GridWorld {
    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn obs_dim(&self) -> usize {
        2 + 3 * self.n_agents
    }

    fn state_dim(&self) -> usize {
        4 * self.n_agents + self.n_agents
    }

    fn action_kind(&self) -> ActionKind {
        ActionKind::Discrete { n_actions: GRID_ACTIONS }
    }

    fn episode_limit(&self) -> usize {
        self.limit
    }

    fn reset(&mut self, seed: u64) {
        let mut rng = RngStream::new(seed, 0x6772_6964);
        self.agents = Self::spawn_cells(self.size, self.n_agents);
        let mut free: Vec<(usize, usize)> =
            (1..self.size).flat_map(|y| (0..self.size).map(move |x| (x, y))).collect();
        self.goals.clear();
        for _ in 0..self.n_agents {
            let k = rng.below(free.len());
            self.goals.push(free.swap_remove(k));
        }
        self.reached = vec![false; self.n_agents];
        self.t = 0;
        self.done = false;
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("step called after episode end".into()));
        }
        check_arity(actions, self.n_agents)?;
        let mut moves = Vec::with_capacity(self.n_agents);
        for a in actions {
            match a {
                Action::Discrete(k) if *k < GRID_ACTIONS => moves.push(*k),
                other => return Err(Error::Env(format!("invalid grid action {other:?}"))),
            }
        }
        for (pos, &a) in self.agents.iter_mut().zip(&moves) {
            *pos = Self::apply_move(self.size, *pos, a);
        }
        let newly = self.mark_reached();
        self.t += 1;
        let reward = -STEP_COST + newly as f64 / self.n_agents as f64;
        self.done = self.reached.iter().all(|&r| r) || self.t >= self.limit;
        Ok(StepResult { reward, done: self.done })
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        let flags: Vec<f64> = self.reached.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
        self.agents
            .iter()
            .map(|&(x, y)| {
                let mut o = Vec::with_capacity(self.obs_dim());
                o.push(x as f64 / GRID_OBS_SCALE);
                o.push(y as f64 / GRID_OBS_SCALE);
                for &(gx, gy) in &self.goals {
                    o.push((gx as f64 - x as f64) / GRID_OBS_SCALE);
                    o.push((gy as f64 - y as f64) / GRID_OBS_SCALE);
                }
                o.extend_from_slice(&flags);
                o
            })
            .collect()
    }

    fn global_state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.state_dim());
        for &(x, y) in self.agents.iter().chain(&self.goals) {
            s.push(x as f64 / GRID_OBS_SCALE);
            s.push(y as f64 / GRID_OBS_SCALE);
        }
        s.extend(self.reached.iter().map(|&r| if r { 1.0 } else { 0.0 }));
        s
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn is_success(&self) -> bool {
        self.reached.iter().all(|&r| r)
    }

    fn steps_taken(&self) -> usize {
        self.t
    }
}
