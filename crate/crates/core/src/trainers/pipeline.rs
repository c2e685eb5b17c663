//! Training state, the iteration loop, and the two training phases.

use std::borrow::Cow;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalMetrics};
use super::hyper::TrainHyper;
use super::learner::{a2po_iteration, mappo_iteration, IterationStats, Learner, Optimizers};
use super::regime::{PolicySet, RegimeSpec};
use super::rollout::{collect_rollouts, RolloutState};
use crate::envs::{Env, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::lora::LoraSpec;
use crate::nn::{ActorArchitecture, ActorParams, CriticParams};
use crate::numerics::RngStream;

const ACTOR_STREAM: u64 = 1;
const CRITIC_STREAM: u64 = 2;
const ROLLOUT_STREAM: u64 = 3;
const ADAPTER_STREAM: u64 = 4;

/// Everything that determines a training trajectory except the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub env: EnvConfig,
    pub learner: Learner,
    pub regime: RegimeSpec,
    pub hyper: TrainHyper,
    pub hidden_dim: usize,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.regime.validate(self.env.n_agents)?;
        self.hyper.validate(self.env.n_agents)?;
        if self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be positive"));
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ActorArchitecture> {
        let env = Env::new(&self.env)?;
        ActorArchitecture::new(
            env.obs_dim(),
            self.regime.id_dim(self.env.n_agents),
            self.hidden_dim,
            env.action_kind(),
        )
    }

    pub fn state_dim(&self) -> Result<usize> {
        Ok(Env::new(&self.env)?.state_dim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

/// Complete resumable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Phase,
    pub spec: TrainSpec,
    pub seed: u64,
    pub policy: PolicySet,
    pub critic: CriticParams,
    pub opt: Optimizers,
    pub rollout: RolloutState,
    /// Env steps taken in this phase.
    pub env_steps: u64,
    /// Env steps of earlier phases this state descends from.
    pub prior_env_steps: u64,
    pub iteration: u64,
}

impl TrainState {
    /// Freshly initialised state for a non-adapter regime.
    pub fn new(spec: TrainSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let arch = spec.arch()?;
        let policy = PolicySet::init(spec.regime.clone(), arch, spec.env.n_agents, &mut RngStream::new(seed, ACTOR_STREAM))?;
        let critic = CriticParams::init(spec.state_dim()?, spec.hidden_dim, &mut RngStream::new(seed, CRITIC_STREAM));
        let opt = Optimizers::new(&policy, &critic, &spec.hyper);
        let rollout = RolloutState::new(
            &spec.env,
            spec.hyper.rollout_threads,
            spec.hidden_dim,
            arch.id_dim,
            &RngStream::new(seed, ROLLOUT_STREAM),
        )?;
        Ok(Self { phase: Phase::Pretrain, spec, seed, policy, critic, opt, rollout, env_steps: 0, prior_env_steps: 0, iteration: 0 })
    }

    /// Phase-2 state: frozen backbone, zero-offset adapters, critic and
    /// environments carried over from `pretrained`.
    pub fn finetune_from(pretrained: &TrainState, lora: LoraSpec, hyper: TrainHyper) -> Result<Self> {
        if pretrained.phase != Phase::Pretrain {
            return Err(Error::Lineage("fine-tuning must start from a pretraining checkpoint".into()));
        }
        let mut rng = RngStream::new(pretrained.seed, ADAPTER_STREAM);
        let policy = PolicySet::with_adapters(&pretrained.policy, lora, &mut rng)?;
        let spec = TrainSpec { regime: policy.regime.clone(), hyper, ..pretrained.spec.clone() };
        spec.validate()?;
        let mut opt = Optimizers::new(&policy, &pretrained.critic, &spec.hyper);
        opt.critic = pretrained.opt.critic.clone();
        opt.critic.lr = spec.hyper.critic_lr;
        Ok(Self {
            phase: Phase::Finetune,
            spec,
            seed: pretrained.seed,
            policy,
            critic: pretrained.critic.clone(),
            opt,
            rollout: pretrained.rollout.clone(),
            env_steps: 0,
            prior_env_steps: pretrained.prior_env_steps + pretrained.env_steps,
            iteration: 0,
        })
    }

    pub fn agent_policies(&self) -> Result<Vec<Cow<'_, ActorParams>>> {
        (0..self.policy.n_agents).map(|i| self.policy.agent_params(i)).collect()
    }

    pub fn evaluate(&self, episodes: usize) -> Result<EvalMetrics> {
        let owned = self.agent_policies()?;
        let refs: Vec<&ActorParams> = owned.iter().map(|c| c.as_ref()).collect();
        evaluate(&refs, &self.spec.env, self.policy.arch().id_dim, episodes, self.seed)
    }

    /// One rollout plus one learner update.
    pub fn iterate(&mut self) -> Result<IterationStats> {
        let hyper = self.spec.hyper.clone();
        let batch = {
            let owned: Vec<Cow<'_, ActorParams>> =
                (0..self.policy.n_agents).map(|i| self.policy.agent_params(i)).collect::<Result<_>>()?;
            let refs: Vec<&ActorParams> = owned.iter().map(|c| c.as_ref()).collect();
            collect_rollouts(&refs, &mut self.rollout, hyper.rollout_steps, hyper.chunk_len, hyper.rollout_workers)?
        };
        let before = (self.phase == Phase::Finetune).then(|| self.policy.backbone_checksum());
        let stats = match self.spec.learner {
            Learner::Mappo => mappo_iteration(&mut self.policy, &mut self.critic, &mut self.opt, &batch, &hyper)?,
            Learner::A2po => {
                let order = hyper.agent_order(self.policy.n_agents);
                a2po_iteration(&mut self.policy, &mut self.critic, &mut self.opt, &batch, &hyper, &order)?
            }
        };
        if let Some(sum) = before {
            if sum != self.policy.backbone_checksum() {
                return Err(Error::Invariant("backbone changed during fine-tuning".into()));
            }
        }
        self.env_steps += hyper.steps_per_iteration();
        self.iteration += 1;
        Ok(stats)
    }
}

/// One training-log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub iteration: u64,
    pub eval: EvalMetrics,
    pub stats: IterationStats,
    pub wall_ms: u64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str =
        "step,iteration,mean_return,median_return,success_rate,policy_loss,value_loss,entropy,grad_norm,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.iteration,
            self.eval.mean_return,
            self.eval.median_return,
            self.eval.success_rate,
            self.stats.policy_loss,
            self.stats.value_loss,
            self.stats.entropy,
            self.stats.grad_norm,
            self.wall_ms
        )
    }
}

/// A snapshot emitted at a milestone, with its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub state: TrainState,
    pub eval: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    /// Env steps for this phase.
    pub steps: u64,
    /// Steps (within the phase) at which a checkpoint is emitted; the final
    /// step always is.
    pub milestones: Vec<u64>,
    pub record_wall_ms: bool,
}

impl PhasePlan {
    pub fn validate(&self, hyper: &TrainHyper) -> Result<()> {
        let per = hyper.steps_per_iteration();
        if self.steps % per != 0 {
            return Err(Error::config("phase.steps", format!("must be a multiple of {per} steps per iteration")));
        }
        for &m in &self.milestones {
            if m % per != 0 || m > self.steps {
                return Err(Error::config(
                    "phase.milestones",
                    format!("milestone {m} is not a multiple of {per} within the phase length"),
                ));
            }
        }
        Ok(())
    }

    fn is_checkpoint(&self, step: u64) -> bool {
        step == self.steps || self.milestones.contains(&step)
    }
}

/// Callbacks for log rows and checkpoints.
pub trait PhaseSink {
    fn log(&mut self, row: &LogRow) -> Result<()>;
    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub rows: Vec<LogRow>,
    pub checkpoints: Vec<Checkpoint>,
}

impl PhaseSink for MemorySink {
    fn log(&mut self, row: &LogRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push(ckpt.clone());
        Ok(())
    }
}

/// Trains until the phase length is reached, evaluating at step 0, every
/// `eval_interval` steps and at checkpoints.
pub fn run_phase(state: &mut TrainState, plan: &PhasePlan, sink: &mut dyn PhaseSink) -> Result<()> {
    plan.validate(&state.spec.hyper)?;
    let episodes = state.spec.hyper.eval_episodes;
    let interval = state.spec.hyper.eval_interval;
    let started = Instant::now();
    let wall = |t: &Instant| if plan.record_wall_ms { t.elapsed().as_millis() as u64 } else { 0 };
    let mut stats = IterationStats::default();
    let emit = |state: &TrainState, stats: &IterationStats, sink: &mut dyn PhaseSink| -> Result<()> {
        let step = state.env_steps;
        let due = step == 0 || plan.is_checkpoint(step) || (interval > 0 && step % interval == 0);
        if !due {
            return Ok(());
        }
        let eval = state.evaluate(episodes)?;
        sink.log(&LogRow { step, iteration: state.iteration, eval, stats: *stats, wall_ms: wall(&started) })?;
        if plan.is_checkpoint(step) {
            sink.checkpoint(&Checkpoint { state: state.clone(), eval })?;
        }
        Ok(())
    };
    if state.env_steps == 0 {
        emit(state, &stats, sink)?;
    }
    while state.env_steps < plan.steps {
        stats = state.iterate()?;
        emit(state, &stats, sink)?;
    }
    Ok(())
}

/// Phase 1: trains a shared-backbone (or baseline) policy from scratch.
pub fn pretrain_shared(spec: TrainSpec, seed: u64, plan: &PhasePlan, sink: &mut dyn PhaseSink) -> Result<TrainState> {
    if spec.regime.kind.is_lora() {
        return Err(Error::config("regime.kind", "pretraining uses a non-adapter regime"));
    }
    let mut state = TrainState::new(spec, seed)?;
    run_phase(&mut state, plan, sink)?;
    Ok(state)
}

/// Phase 2: adapters on a frozen backbone. The evaluation at step 0 must
/// reproduce the checkpoint's evaluation exactly.
pub fn finetune_lora(
    ckpt: &Checkpoint,
    lora: LoraSpec,
    hyper: TrainHyper,
    plan: &PhasePlan,
    sink: &mut dyn PhaseSink,
) -> Result<TrainState> {
    let mut state = TrainState::finetune_from(&ckpt.state, lora, hyper)?;
    let frozen = state.policy.backbone_checksum();
    let first = state.evaluate(state.spec.hyper.eval_episodes)?;
    if first.csv_row() != ckpt.eval.csv_row() {
        return Err(Error::Invariant(format!(
            "zero-initialised adapters changed the evaluation: {} vs {}",
            first.csv_row(),
            ckpt.eval.csv_row()
        )));
    }
    run_phase(&mut state, plan, sink)?;
    if state.policy.backbone_checksum() != frozen {
        return Err(Error::Invariant("backbone changed during fine-tuning".into()));
    }
    Ok(state)
}
