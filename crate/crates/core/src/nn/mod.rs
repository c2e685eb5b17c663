//! Recurrent actor, centralized critic and action distributions.

mod actor;
mod arch;
mod critic;
pub mod dist;

pub use actor::{
    actor_backward, actor_forward, backward_view, forward_view, ActorGrads, ActorParams,
    ActorTrace, ActorView, DistBatch, ForwardOutput, HeadGrad, SeqInput, StepTrace,
};
pub use arch::{ActionKind, ActorArchitecture, LayerId, LayerSpec, DEFAULT_HIDDEN_DIM};
pub use critic::{CriticGrads, CriticParams, CriticTrace};
pub use dist::{
    evaluate_logprob_entropy, sample, sample_action, Action, DistParams, Sample, SampleMode,
};

use crate::numerics::RngStream;

/// Orthogonally initialised actor parameters.
pub fn init_actor(arch: ActorArchitecture, rng: &mut RngStream) -> ActorParams {
    ActorParams::init(arch, rng)
}

pub fn init_critic(state_dim: usize, hidden_dim: usize, rng: &mut RngStream) -> CriticParams {
    CriticParams::init(state_dim, hidden_dim, rng)
}
