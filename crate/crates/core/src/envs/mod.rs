//! Cooperative team-reward environments with index-assigned roles.
//!
//! Both environments share one scalar reward per step across all agents.
//! The `homogeneous` variants replace index assignment with nearest/any
//! assignment so that agent roles become interchangeable.

mod grid;
mod spread;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActionKind, Action};

pub use grid::{GridWorld, GRID_ACTIONS, GRID_OBS_SCALE};
pub use spread::{Spread, SPREAD_BOUND, SPREAD_DAMPING, SPREAD_DT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    HeteroGrid,
    HeteroSpread,
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvId::HeteroGrid => "hetero-grid",
            EnvId::HeteroSpread => "hetero-spread",
        })
    }
}

impl FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hetero-grid" => Ok(EnvId::HeteroGrid),
            "hetero-spread" => Ok(EnvId::HeteroSpread),
            other => Err(Error::config("env.id", format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvConfig {
    pub id: EnvId,
    pub n_agents: usize,
    /// Grid side length; ignored by the spread environment.
    pub grid_size: usize,
    pub episode_limit: usize,
    pub homogeneous: bool,
}

impl EnvConfig {
    pub fn hetero_grid() -> Self {
        Self { id: EnvId::HeteroGrid, n_agents: 3, grid_size: 7, episode_limit: 50, homogeneous: false }
    }

    pub fn hetero_spread() -> Self {
        Self { id: EnvId::HeteroSpread, n_agents: 3, grid_size: 0, episode_limit: 100, homogeneous: false }
    }

    pub fn defaults(id: EnvId) -> Self {
        match id {
            EnvId::HeteroGrid => Self::hetero_grid(),
            EnvId::HeteroSpread => Self::hetero_spread(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::config("env.n_agents", "need at least one agent"));
        }
        if self.episode_limit == 0 {
            return Err(Error::config("env.episode_limit", "must be positive"));
        }
        if self.id == EnvId::HeteroGrid {
            if self.grid_size < 2 {
                return Err(Error::config("env.grid_size", "grid must be at least 2x2"));
            }
            if self.n_agents > self.grid_size || self.n_agents > (self.grid_size - 1) * self.grid_size {
                return Err(Error::config("env.n_agents", "too many agents for this grid"));
            }
        }
        Ok(())
    }
}

/// Outcome of one joint step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    /// Team reward shared by every agent.
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn action_kind(&self) -> ActionKind;
    fn episode_limit(&self) -> usize;
    fn reset(&mut self, seed: u64);
    fn step(&mut self, actions: &[Action]) -> Result<StepResult>;
    /// Per-agent observations of the current state.
    fn observations(&self) -> Vec<Vec<f64>>;
    fn global_state(&self) -> Vec<f64>;
    fn is_done(&self) -> bool;
    /// Whether the task is solved in the current state.
    fn is_success(&self) -> bool;
    fn steps_taken(&self) -> usize;
}

/// Concrete environment instance; cloneable and serializable for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Env {
    Grid(GridWorld),
    Spread(Spread),
}

impl Env {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.id {
            EnvId::HeteroGrid => Env::Grid(GridWorld::new(cfg.grid_size, cfg.n_agents, cfg.episode_limit, cfg.homogeneous)),
            EnvId::HeteroSpread => Env::Spread(Spread::new(cfg.n_agents, cfg.episode_limit, cfg.homogeneous)),
        })
    }

    fn inner(&self) -> &dyn Environment {
        match self {
            Env::Grid(g) => g,
            Env::Spread(s) => s,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Environment {
        match self {
            Env::Grid(g) => g,
            Env::Spread(s) => s,
        }
    }
}

impl Environment for Env {
    fn n_agents(&self) -> usize {
        self.inner().n_agents()
    }
    fn obs_dim(&self) -> usize {
        self.inner().obs_dim()
    }
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn action_kind(&self) -> ActionKind {
        self.inner().action_kind()
    }
    fn episode_limit(&self) -> usize {
        self.inner().episode_limit()
    }
    fn reset(&mut self, seed: u64) {
        self.inner_mut().reset(seed)
    }
    fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        self.inner_mut().step(actions)
    }
    fn observations(&self) -> Vec<Vec<f64>> {
        self.inner().observations()
    }
    fn global_state(&self) -> Vec<f64> {
        self.inner().global_state()
    }
    fn is_done(&self) -> bool {
        self.inner().is_done()
    }
    fn is_success(&self) -> bool {
        self.inner().is_success()
    }
    fn steps_taken(&self) -> usize {
        self.inner().steps_taken()
    }
}

/// Same dynamics as `id` with interchangeable roles.
pub fn homogeneous_variant(id: &str) -> Result<Env> {
    let mut cfg = EnvConfig::defaults(id.parse()?);
    cfg.homogeneous = true;
    Env::new(&cfg)
}

pub(crate) fn check_arity(actions: &[Action], n: usize) -> Result<()> {
    if actions.len() != n {
        return Err(Error::Env(format!("expected {n} actions, got {}", actions.len())));
    }
    Ok(())
}
