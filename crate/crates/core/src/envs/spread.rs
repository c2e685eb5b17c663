//! Point masses steering to landmarks; agent `i` owns landmark `i`.

use serde::{Deserialize, Serialize};

use super::{check_arity, Environment, StepResult};
use crate::error::{Error, Result};
use crate::nn::{Action, ActionKind};
use crate::numerics::RngStream;

pub const SPREAD_DT: f64 = 0.1;
pub const SPREAD_DAMPING: f64 = 0.25;
pub const SPREAD_BOUND: f64 = 2.0;
const ACTION_COST: f64 = 0.01;
const SUCCESS_RADIUS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub n_agents: usize,
    pub limit: usize,
    pub homogeneous: bool,
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub landmarks: Vec<[f64; 2]>,
    pub t: usize,
    pub done: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Spread {
    pub fn new(n_agents: usize, limit: usize, homogeneous: bool) -> Self {
        let mut s = Self {
            n_agents,
            limit,
            homogeneous,
            pos: Vec::new(),
            vel: Vec::new(),
            landmarks: Vec::new(),
            t: 0,
            done: false,
        };
        s.reset(0);
        s
    }

    pub fn set_layout(&mut self, pos: Vec<[f64; 2]>, landmarks: Vec<[f64; 2]>) -> Result<()> {
        if pos.len() != self.n_agents || landmarks.len() != self.n_agents {
            return Err(Error::Env("layout arity does not match agent count".into()));
        }
        self.vel = vec![[0.0; 2]; self.n_agents];
        self.pos = pos;
        self.landmarks = landmarks;
        self.t = 0;
        self.done = false;
        Ok(())
    }

    /// Distance from each agent to its assigned (hetero) or nearest (homogeneous) landmark.
    pub fn assigned_distances(&self) -> Vec<f64> {
        self.pos
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if self.homogeneous {
                    self.landmarks.iter().map(|&l| dist(p, l)).fold(f64::INFINITY, f64::min)
                } else {
                    dist(p, self.landmarks[i])
                }
            })
            .collect()
    }

    pub fn distance_reward(&self) -> f64 {
        -self.assigned_distances().iter().sum::<f64>() / self.n_agents as f64
    }
}

impl Environment for Spread {
    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn obs_dim(&self) -> usize {
        4 + 2 * self.n_agents
    }

    fn state_dim(&self) -> usize {
        6 * self.n_agents
    }

    fn action_kind(&self) -> ActionKind {
        ActionKind::Continuous { act_dim: 2 }
    }

    fn episode_limit(&self) -> usize {
        self.limit
    }

    fn reset(&mut self, seed: u64) {
        let mut rng = RngStream::new(seed, 0x7370_7264);
        self.pos = (0..self.n_agents).map(|_| [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)]).collect();
        self.landmarks =
            (0..self.n_agents).map(|_| [rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5)]).collect();
        self.vel = vec![[0.0; 2]; self.n_agents];
        self.t = 0;
        self.done = false;
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("step called after episode end".into()));
        }
        check_arity(actions, self.n_agents)?;
        let mut effort = 0.0;
        let mut acts = Vec::with_capacity(self.n_agents);
        for a in actions {
            match a {
                Action::Continuous(v) if v.len() == 2 && v.iter().all(|x| x.is_finite() && x.abs() <= 1.0) => {
                    effort += v[0] * v[0] + v[1] * v[1];
                    acts.push([v[0], v[1]]);
                }
                other => return Err(Error::Env(format!("invalid spread action {other:?}"))),
            }
        }
        for ((p, v), a) in self.pos.iter_mut().zip(self.vel.iter_mut()).zip(&acts) {
            for d in 0..2 {
                v[d] = (1.0 - SPREAD_DAMPING) * v[d] + a[d] * SPREAD_DT;
                p[d] = (p[d] + v[d] * SPREAD_DT).clamp(-SPREAD_BOUND, SPREAD_BOUND);
            }
        }
        self.t += 1;
        let reward = self.distance_reward() - ACTION_COST * effort / self.n_agents as f64;
        self.done = self.t >= self.limit;
        Ok(StepResult { reward, done: self.done })
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.n_agents)
            .map(|i| {
                let p = self.pos[i];
                let mut o = vec![p[0], p[1], self.vel[i][0], self.vel[i][1]];
                for l in &self.landmarks {
                    o.push(l[0] - p[0]);
                    o.push(l[1] - p[1]);
                }
                o
            })
            .collect()
    }

    fn global_state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.state_dim());
        for v in self.pos.iter().chain(&self.vel).chain(&self.landmarks) {
            s.extend_from_slice(v);
        }
        s
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn is_success(&self) -> bool {
        self.assigned_distances().iter().all(|&d| d < SUCCESS_RADIUS)
    }

    fn steps_taken(&self) -> usize {
        self.t
    }
}
