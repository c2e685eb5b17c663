//! Shared-backbone multi-agent policy learning with per-agent low-rank adapters.
//!
//! A single recurrent policy is pretrained with parameter sharing, then each
//! agent learns a low-rank offset `A·B` on every adapted weight matrix while the
//! backbone stays frozen. Merged per-agent policies cost one backbone at
//! inference time.
//!
//! Modules:
//! - [`numerics`]: dense matrices, counter-based RNG, Adam, Jacobi SVD, finite differences
//! - [`nn`]: GRU actor and centralized critic with hand-written backward passes
//! - [`lora`]: adapter factors, effective weights, merge, parameter accounting
//! - [`envs`]: two cooperative environments with index-assigned roles
//! - [`trainers`]: rollouts, GAE, PPO, MAPPO/A2PO learners and the two-phase pipeline
//! - [`analysis`]: norm tables, sparsity curves, policy distances, activation maps
//! - [`cli`]: configuration, run layout, checkpoints, sweeps

pub mod analysis;
pub mod cli;
pub mod envs;
mod error;
pub mod lora;
pub mod nn;
pub mod numerics;
pub mod trainers;

pub use error::{Error, Result};
