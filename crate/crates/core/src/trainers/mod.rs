//! Rollouts, advantage estimation, clipped policy updates, the two learners,
//! the parameterisation regimes and the pretrain / fine-tune pipeline.

mod eval;
mod gae;
mod hyper;
mod learner;
mod pipeline;
mod ppo;
mod regime;
mod rollout;

pub use eval::{episode_seed, evaluate, median, EvalMetrics, EVAL_STREAM};
pub use gae::{compute_gae, normalize_advantages};
pub use hyper::TrainHyper;
pub use learner::{a2po_iteration, mappo_iteration, prepare, IterationStats, Learner, Optimizers, Prepared};
pub use pipeline::{
    finetune_lora, pretrain_shared, run_phase, Checkpoint, LogRow, MemorySink, Phase, PhasePlan, PhaseSink,
    TrainSpec, TrainState,
};
pub use ppo::{
    clip_grad_norm, critic_update, ppo_update, surrogate_gradients, unit_gradients, unit_segments, AgentSeqs,
    PpoStats, SurrogateStats,
};
pub use regime::{HeadParams, PolicySet, RegimeKind, RegimeSpec, Unit, UnitKind};
pub use rollout::{agent_input, collect_rollouts, ActionRecord, EpisodeStat, RolloutBatch, RolloutState};
