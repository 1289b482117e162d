//! The two-level training loop: the higher agent emits a goal every c steps,
//! intermediate goals roll forward through the fixed goal transition, the
//! lower agent is rewarded for tracking the goal, and both levels train
//! off-policy, the higher one on relabeled segments.
//!
//! Every stochastic component owns a named substream of the master seed, so
//! runs are reproducible bit-for-bit and ablations that skip a component do
//! not shift the draws of the others.

use crate::correction::{self, CorrectionKind, CorrectionStrategy};
use crate::envs::{Env, EnvKind};
use crate::error::{Error, Result};
use crate::goal::{Goal, GoalSpace};
use crate::metrics::{MetricRecord, MetricsSink};
use crate::replay::{HighSegment, LowTransition, RingBuffer};
use crate::rng::{Rng, SeedStream};
use crate::td3::{Batch, Td3Agent, Td3Config};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

/// Experiment variants: the full method, its lesions, and the FuN-style
/// comparison points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full method with the configured off-policy correction.
    Hiro,
    /// Higher level trains on stored goals unchanged.
    NoCorrection,
    /// Lower level pretrained against Gaussian goals, then frozen; higher
    /// level trains without correction.
    PretrainLow,
    /// Lower-level goal relabeling instead of the higher-level correction.
    RelabelLow,
    /// One flat agent on the raw environment reward; no goals anywhere.
    NoHrl,
    /// Lower-level reward replaced by cosine similarity to the goal.
    FunCosine,
    /// Higher-level goals relabeled with the realized-delta Gaussian.
    FunTransitionPg,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Hiro,
        Ablation::NoCorrection,
        Ablation::PretrainLow,
        Ablation::RelabelLow,
        Ablation::NoHrl,
        Ablation::FunCosine,
        Ablation::FunTransitionPg,
    ];

    pub fn from_name(name: &str) -> Option<Ablation> {
        Ablation::ALL.iter().copied().find(|a| a.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Hiro => "hiro",
            Ablation::NoCorrection => "no_correction",
            Ablation::PretrainLow => "pretrain_low",
            Ablation::RelabelLow => "relabel_low",
            Ablation::NoHrl => "no_hrl",
            Ablation::FunCosine => "fun_cosine",
            Ablation::FunTransitionPg => "fun_transition_pg",
        }
    }
}

/// Correction actually applied at the higher level once the ablation has its
/// say: the lesions disable it, the transition-PG variant forces its own.
pub fn effective_correction(ablation: Ablation, configured: CorrectionKind) -> CorrectionKind {
    match ablation {
        Ablation::Hiro | Ablation::FunCosine => configured,
        Ablation::NoCorrection | Ablation::PretrainLow | Ablation::RelabelLow | Ablation::NoHrl => {
            CorrectionKind::None
        }
        Ablation::FunTransitionPg => CorrectionKind::TransitionPg,
    }
}

/// Loop hyperparameters. Defaults are desk-scale budgets; `full_scale`
/// restores the published ones.
#[derive(Debug, Clone, PartialEq)]
pub struct HiroConfig {
    /// Goal horizon: a new higher-level goal every c environment steps.
    pub c: usize,
    pub low_reward_scale: f64,
    pub high_reward_scale: f64,
    pub low_train_every: usize,
    pub high_train_every: usize,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Environment-step budget, rounded up to whole episodes.
    pub total_steps: u64,
    pub batch_size: usize,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub ablation: Ablation,
    /// Correction requested by the user; the ablation may override it.
    pub correction: CorrectionKind,
    pub pretrain_steps: u64,
    pub buffer_capacity: usize,
    /// Network and optimizer settings shared by both levels; exploration
    /// sigmas above override per level.
    pub td3: Td3Config,
}

impl Default for HiroConfig {
    fn default() -> Self {
        HiroConfig {
            c: 10,
            low_reward_scale: 1.0,
            high_reward_scale: 0.1,
            low_train_every: 1,
            high_train_every: 10,
            eval_every: 10_000,
            eval_episodes: 20,
            total_steps: 300_000,
            batch_size: 128,
            sigma_low: 1.0,
            sigma_high: 1.0,
            ablation: Ablation::Hiro,
            correction: CorrectionKind::MaxLikelihood,
            pretrain_steps: 100_000,
            buffer_capacity: 200_000,
            td3: Td3Config::default(),
        }
    }
}

impl HiroConfig {
    /// Published budgets: evaluate every 50k steps over 50 episodes, 2M
    /// pretraining steps, 10M total.
    pub fn full_scale() -> Self {
        HiroConfig {
            eval_every: 50_000,
            eval_episodes: 50,
            total_steps: 10_000_000,
            pretrain_steps: 2_000_000,
            ..HiroConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("low_reward_scale", self.low_reward_scale),
            ("high_reward_scale", self.high_reward_scale),
        ];
        for (key, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{key} must be positive, got {v}"
                )));
            }
        }
        let counts = [
            ("c", self.c),
            ("low_train_every", self.low_train_every),
            ("high_train_every", self.high_train_every),
            ("eval_episodes", self.eval_episodes),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{key} must be at least 1")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "eval_every must be at least 1".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument(
                "total_steps must be at least 1".into(),
            ));
        }
        for (key, v) in [
            ("sigma_low", self.sigma_low),
            ("sigma_high", self.sigma_high),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{key} must be >= 0, got {v}"
                )));
            }
        }
        self.td3.validate()
    }
}

fn with_goal(state: &[f64], goal: &Goal) -> Vec<f64> {
    let mut input = Vec::with_capacity(state.len() + goal.delta.len());
    input.extend_from_slice(state);
    input.extend_from_slice(&goal.delta);
    input
}

#[derive(Debug, Default)]
struct LossAccum {
    sum: f64,
    count: u64,
}

impl LossAccum {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.count > 0).then(|| self.sum / self.count as f64);
        self.sum = 0.0;
        self.count = 0;
        out
    }
}

struct TrainerRngs {
    env: Rng,
    explore_low: Rng,
    explore_high: Rng,
    train_low: Rng,
    train_high: Rng,
    correction: Rng,
    eval: Rng,
    pretrain: Rng,
}

impl TrainerRngs {
    fn new(seeds: &SeedStream) -> Self {
        TrainerRngs {
            env: seeds.derive("env"),
            explore_low: seeds.derive("explore_low"),
            explore_high: seeds.derive("explore_high"),
            train_low: seeds.derive("train_low"),
            train_high: seeds.derive("train_high"),
            correction: seeds.derive("correction"),
            eval: seeds.derive("eval"),
            pretrain: seeds.derive("pretrain"),
        }
    }
}

/// One seeded training run: agents, buffers, environment, and counters.
pub struct Trainer {
    config: HiroConfig,
    kind: EnvKind,
    env: Env,
    space: GoalSpace,
    strategy: CorrectionStrategy,
    low: Td3Agent,
    high: Option<Td3Agent>,
    low_buffer: RingBuffer<LowTransition>,
    high_buffer: RingBuffer<HighSegment>,
    rngs: TrainerRngs,
    env_steps: u64,
    episodes: u64,
    low_frozen: bool,
    low_loss: LossAccum,
    high_loss: LossAccum,
    segments_relabeled: u64,
    segments_changed: u64,
    last_eval_step: Option<u64>,
}

impl Trainer {
    pub fn new(kind: EnvKind, config: HiroConfig, master_seed: u64) -> Result<Trainer> {
        config.validate()?;
        let seeds = SeedStream::new(master_seed);
        let rngs = TrainerRngs::new(&seeds);
        let env = Env::new(kind);
        let space = kind.goal_space();
        let obs_dim = kind.observation_dim();
        let flat = config.ablation == Ablation::NoHrl;

        let mut low_cfg = config.td3.clone();
        low_cfg.exploration_sigma = config.sigma_low;
        let low_input = if flat {
            obs_dim
        } else {
            obs_dim + space.dims().len()
        };
        let mut agent_rng = seeds.derive("agent_low");
        let low = Td3Agent::new(low_input, kind.action_bounds(), &low_cfg, &mut agent_rng)?;

        let high = if flat {
            None
        } else {
            let mut high_cfg = config.td3.clone();
            high_cfg.exploration_sigma = config.sigma_high;
            let mut agent_rng = seeds.derive("agent_high");
            Some(Td3Agent::new(
                obs_dim,
                space.range().clone(),
                &high_cfg,
                &mut agent_rng,
            )?)
        };

        let correction_kind = effective_correction(config.ablation, config.correction);
        let strategy = CorrectionStrategy::for_space(correction_kind, &space, config.sigma_low);
        let low_buffer = RingBuffer::new(config.buffer_capacity)?;
        let high_buffer = RingBuffer::new(config.buffer_capacity)?;
        Ok(Trainer {
            config,
            kind,
            env,
            space,
            strategy,
            low,
            high,
            low_buffer,
            high_buffer,
            rngs,
            env_steps: 0,
            episodes: 0,
            low_frozen: false,
            low_loss: LossAccum::default(),
            high_loss: LossAccum::default(),
            segments_relabeled: 0,
            segments_changed: 0,
            last_eval_step: None,
        })
    }

    pub fn config(&self) -> &HiroConfig {
        &self.config
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn low_agent(&self) -> &Td3Agent {
        &self.low
    }

    pub fn high_agent(&self) -> Option<&Td3Agent> {
        self.high.as_ref()
    }

    pub fn low_buffer(&self) -> &RingBuffer<LowTransition> {
        &self.low_buffer
    }

    pub fn high_buffer(&self) -> &RingBuffer<HighSegment> {
        &self.high_buffer
    }

    pub fn low_frozen(&self) -> bool {
        self.low_frozen
    }

    /// Agent checkpoints, one named blob per level.
    pub fn snapshot(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = vec![("low.td3".to_string(), self.low.snapshot())];
        if let Some(high) = &self.high {
            out.push(("high.td3".to_string(), high.snapshot()));
        }
        out
    }

    /// Replaces one level's agent with a checkpointed one. Names match
    /// `snapshot`; dimensions must agree with this trainer's configuration.
    pub fn restore(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let agent = Td3Agent::from_snapshot(bytes)?;
        let slot = match name {
            "low.td3" => &mut self.low,
            "high.td3" => self.high.as_mut().ok_or_else(|| {
                Error::InvalidArgument("no higher level in a flat configuration".into())
            })?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown checkpoint name {other}"
                )))
            }
        };
        if agent.input_dim() != slot.input_dim() || agent.action_dim() != slot.action_dim() {
            return Err(Error::Shape(format!(
                "checkpoint {name} has dims {}x{}, expected {}x{}",
                agent.input_dim(),
                agent.action_dim(),
                slot.input_dim(),
                slot.action_dim()
            )));
        }
        *slot = agent;
        Ok(())
    }

    fn hierarchical(&self) -> bool {
        self.high.is_some()
    }

    /// Full run: optional pretraining, training episodes with periodic
    /// evaluation, and a final evaluation if the budget did not land on a
    /// boundary. `on_eval` fires after each evaluation (checkpoint hook).
    pub fn run_with(
        &mut self,
        sink: &mut dyn MetricsSink,
        mut on_eval: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if self.config.ablation == Ablation::PretrainLow {
            self.pretrain()?;
        }
        while self.env_steps < self.config.total_steps {
            self.run_training_episode(sink, &mut on_eval)?;
        }
        if self.last_eval_step != Some(self.env_steps) {
            self.eval_and_emit(sink)?;
            on_eval(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self, sink: &mut dyn MetricsSink) -> Result<()> {
        self.run_with(sink, |_| Ok(()))
    }

    /// One exploration episode: store transitions at both levels, train on
    /// the configured cadences, evaluate when a boundary is crossed.
    fn run_training_episode(
        &mut self,
        sink: &mut dyn MetricsSink,
        on_eval: &mut impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        let mut obs = self.env.reset(&mut self.rngs.env);
        let mut episode_return = 0.0;
        let mut goal = Goal::new(Vec::new());
        let mut segment_goal = Goal::new(Vec::new());
        let mut segment_states: Vec<Vec<f64>> = Vec::new();
        let mut segment_actions: Vec<Vec<f64>> = Vec::new();
        let mut segment_reward = 0.0;
        let mut t = 0usize;

        loop {
            if self.hierarchical() && t.is_multiple_of(self.config.c) {
                let high = self.high.as_ref().unwrap();
                let raw = high.select_action(&obs, true, &mut self.rngs.explore_high)?;
                goal = Goal::new(raw);
                segment_goal = goal.clone();
            }

            let explore = !self.low_frozen;
            let action = self.low.select_action(
                &with_goal(&obs, &goal),
                explore,
                &mut self.rngs.explore_low,
            )?;
            let step = self.env.step(&action)?;
            episode_return += step.reward;

            if self.hierarchical() {
                let next_goal = self.space.goal_transition(&obs, &goal, &step.observation)?;
                let raw_low_reward = if self.config.ablation == Ablation::FunCosine {
                    self.space.cosine_reward(&obs, &goal, &step.observation)?
                } else {
                    self.space
                        .intrinsic_reward(&obs, &goal, &step.observation)?
                };
                self.low_buffer.insert(LowTransition {
                    state: obs.clone(),
                    goal: goal.clone(),
                    action: action.clone(),
                    reward: self.config.low_reward_scale * raw_low_reward,
                    next_state: step.observation.clone(),
                    next_goal: next_goal.clone(),
                    terminal: step.terminal,
                });
                segment_states.push(obs);
                segment_actions.push(action);
                segment_reward += step.reward;
                goal = next_goal;
                // The segment closes on its c-th step or at episode end, so
                // it is already sampleable by this step's train tick.
                if (t + 1).is_multiple_of(self.config.c) || step.terminal {
                    self.close_segment(
                        &mut segment_states,
                        &mut segment_actions,
                        &mut segment_reward,
                        &segment_goal,
                        &step.observation,
                        step.terminal,
                    )?;
                }
            } else {
                self.low_buffer.insert(LowTransition {
                    state: obs.clone(),
                    goal: Goal::new(Vec::new()),
                    action,
                    reward: self.config.low_reward_scale * step.reward,
                    next_state: step.observation.clone(),
                    next_goal: Goal::new(Vec::new()),
                    terminal: step.terminal,
                });
            }

            obs = step.observation;
            self.env_steps += 1;
            t += 1;
            self.train_tick()?;
            if self.env_steps.is_multiple_of(self.config.eval_every) {
                self.eval_and_emit(sink)?;
                on_eval(self)?;
            }

            if step.terminal {
                break;
            }
        }

        let record = MetricRecord::Train {
            env_steps: self.env_steps,
            episode: self.episodes,
            episode_return,
            low_critic_loss: self.low_loss.take(),
            high_critic_loss: self.high_loss.take(),
        };
        self.episodes += 1;
        sink.record(&record)
    }

    /// Stores the accumulated c-step (or shorter, at episode end) segment.
    fn close_segment(
        &mut self,
        states: &mut Vec<Vec<f64>>,
        actions: &mut Vec<Vec<f64>>,
        reward_sum: &mut f64,
        segment_goal: &Goal,
        final_state: &[f64],
        terminal: bool,
    ) -> Result<()> {
        let mut segment = HighSegment {
            states: std::mem::take(states),
            goal: segment_goal.clone(),
            actions: std::mem::take(actions),
            env_reward_sum: std::mem::take(reward_sum),
            final_state: final_state.to_vec(),
            terminal,
            behavior_sigma: self.config.sigma_low,
            behavior_log_densities: None,
        };
        if self.strategy.kind.needs_behavior_densities() {
            segment.behavior_log_densities = Some(correction::step_log_densities(
                self.low.actor(),
                &segment,
                &self.space,
                &segment.goal,
                self.config.sigma_low,
            )?);
        }
        self.high_buffer.insert(segment);
        Ok(())
    }

    /// Trains each level on its cadence once its buffer can fill a batch.
    fn train_tick(&mut self) -> Result<()> {
        let (low_every, high_every) = (
            self.config.low_train_every as u64,
            self.config.high_train_every as u64,
        );
        let batch = self.config.batch_size;
        if !self.low_frozen
            && self.env_steps.is_multiple_of(low_every)
            && self.low_buffer.len() >= batch
        {
            let report = self.train_low()?;
            self.low_loss.add(report.critic_loss);
        }
        if self.hierarchical()
            && self.env_steps.is_multiple_of(high_every)
            && self.high_buffer.len() >= batch
        {
            let report = self.train_high()?;
            self.high_loss.add(report.critic_loss);
        }
        Ok(())
    }

    fn train_low(&mut self) -> Result<crate::td3::StepReport> {
        let indices = self
            .low_buffer
            .sample_indices(self.config.batch_size, &mut self.rngs.train_low)?;
        let mut sampled: Vec<LowTransition> = indices
            .iter()
            .map(|&i| self.low_buffer.get(i).unwrap().clone())
            .collect();
        if self.config.ablation == Ablation::RelabelLow {
            relabel_low_goals(
                &mut sampled,
                &self.space,
                0.5,
                self.config.low_reward_scale,
                &mut self.rngs.correction,
            )?;
        }
        let states: Vec<Vec<f64>> = sampled
            .iter()
            .map(|tr| with_goal(&tr.state, &tr.goal))
            .collect();
        let actions: Vec<Vec<f64>> = sampled.iter().map(|tr| tr.action.clone()).collect();
        let rewards: Vec<f64> = sampled.iter().map(|tr| tr.reward).collect();
        let next_states: Vec<Vec<f64>> = sampled
            .iter()
            .map(|tr| with_goal(&tr.next_state, &tr.next_goal))
            .collect();
        let terminals: Vec<bool> = sampled.iter().map(|tr| tr.terminal).collect();
        let batch = Batch::new(
            Matrix::from_rows(&states)?,
            Matrix::from_rows(&actions)?,
            rewards,
            Matrix::from_rows(&next_states)?,
            terminals,
            None,
        )?;
        self.low.train_step(&batch, &mut self.rngs.train_low)
    }

    fn train_high(&mut self) -> Result<crate::td3::StepReport> {
        let sampled = self
            .high_buffer
            .sample(self.config.batch_size, &mut self.rngs.train_high)?;
        let entries = correction::relabel_batch(
            self.low.actor(),
            &sampled,
            &self.space,
            &self.strategy,
            self.config.high_reward_scale,
            &mut self.rngs.correction,
        )?;
        self.segments_relabeled += entries.len() as u64;
        self.segments_changed += entries.iter().filter(|e| e.goal_changed).count() as u64;

        let states: Vec<Vec<f64>> = entries.iter().map(|e| e.state.clone()).collect();
        let goals: Vec<Vec<f64>> = entries
            .iter()
            .map(|e| e.relabeled_goal.delta.clone())
            .collect();
        let rewards: Vec<f64> = entries.iter().map(|e| e.scaled_reward).collect();
        let finals: Vec<Vec<f64>> = entries.iter().map(|e| e.final_state.clone()).collect();
        let terminals: Vec<bool> = entries.iter().map(|e| e.terminal).collect();
        let weights: Vec<f64> = entries.iter().map(|e| e.importance_weight).collect();
        let batch = Batch::new(
            Matrix::from_rows(&states)?,
            Matrix::from_rows(&goals)?,
            rewards,
            Matrix::from_rows(&finals)?,
            terminals,
            Some(weights),
        )?;
        self.high
            .as_mut()
            .unwrap()
            .train_step(&batch, &mut self.rngs.train_high)
    }

    /// Trains the lower level alone for exactly `pretrain_steps` steps
    /// against Gaussian goals, then freezes it. The higher level and the
    /// main-phase step counter are untouched.
    fn pretrain(&mut self) -> Result<()> {
        if !self.hierarchical() {
            return Err(Error::Precondition(
                "pretraining needs a hierarchical agent".into(),
            ));
        }
        let half: Vec<f64> = self.space.range().half_widths().to_vec();
        let mut done = 0u64;
        'outer: loop {
            let mut obs = self.env.reset(&mut self.rngs.env);
            let mut goal = Goal::new(Vec::new());
            let mut t = 0usize;
            loop {
                if t.is_multiple_of(self.config.c) {
                    let delta: Vec<f64> = half
                        .iter()
                        .map(|h| self.rngs.pretrain.normal(0.0, 0.5 * h))
                        .collect();
                    goal = self.space.clip_goal(&Goal::new(delta))?;
                }
                let action = self.low.select_action(
                    &with_goal(&obs, &goal),
                    true,
                    &mut self.rngs.explore_low,
                )?;
                let step = self.env.step(&action)?;
                let next_goal = self.space.goal_transition(&obs, &goal, &step.observation)?;
                let reward = self.config.low_reward_scale
                    * self
                        .space
                        .intrinsic_reward(&obs, &goal, &step.observation)?;
                self.low_buffer.insert(LowTransition {
                    state: obs,
                    goal: goal.clone(),
                    action,
                    reward,
                    next_state: step.observation.clone(),
                    next_goal: next_goal.clone(),
                    terminal: step.terminal,
                });
                goal = next_goal;
                obs = step.observation;
                done += 1;
                t += 1;
                if done.is_multiple_of(self.config.low_train_every as u64)
                    && self.low_buffer.len() >= self.config.batch_size
                {
                    self.train_low()?;
                }
                if done >= self.config.pretrain_steps {
                    break 'outer;
                }
                if step.terminal {
                    break;
                }
            }
        }
        self.low_frozen = true;
        Ok(())
    }

    fn eval_and_emit(&mut self, sink: &mut dyn MetricsSink) -> Result<()> {
        let score = self.evaluate()?;
        self.last_eval_step = Some(self.env_steps);
        sink.record(&MetricRecord::Eval {
            env_steps: self.env_steps,
            score,
            episodes: self.config.eval_episodes as u64,
        })?;
        let fraction = if self.segments_relabeled == 0 {
            0.0
        } else {
            self.segments_changed as f64 / self.segments_relabeled as f64
        };
        sink.record(&MetricRecord::CorrectionStats {
            env_steps: self.env_steps,
            relabel_changed_fraction: fraction,
            segments_relabeled: self.segments_relabeled,
        })
    }

    /// Runs `eval_episodes` episodes with exploration off at both levels on
    /// a fresh environment with the pinned evaluation target. Touches no
    /// replay buffer. Returns success rate, or mean return on Gather.
    pub fn evaluate(&mut self) -> Result<f64> {
        let mut env = Env::new(self.kind);
        let mut success_count = 0usize;
        let mut return_sum = 0.0;
        for _ in 0..self.config.eval_episodes {
            let mut obs = env.reset_eval(&mut self.rngs.eval);
            let mut goal = Goal::new(Vec::new());
            let mut t = 0usize;
            loop {
                if self.hierarchical() && t.is_multiple_of(self.config.c) {
                    let high = self.high.as_ref().unwrap();
                    goal = Goal::new(high.select_action(&obs, false, &mut self.rngs.eval)?);
                }
                let action =
                    self.low
                        .select_action(&with_goal(&obs, &goal), false, &mut self.rngs.eval)?;
                let step = env.step(&action)?;
                return_sum += step.reward;
                if self.hierarchical() {
                    goal = self.space.goal_transition(&obs, &goal, &step.observation)?;
                }
                obs = step.observation;
                t += 1;
                if step.terminal {
                    success_count += step.success as usize;
                    break;
                }
            }
        }
        let n = self.config.eval_episodes as f64;
        Ok(match self.kind {
            EnvKind::Gather | EnvKind::Open => return_sum / n,
            _ => success_count as f64 / n,
        })
    }
}

/// Lower-level goal relabeling: with the given probability each entry's goal
/// is replaced by a uniform draw from the goal range, and its reward and
/// next goal are recomputed from the stored states.
pub fn relabel_low_goals(
    transitions: &mut [LowTransition],
    space: &GoalSpace,
    probability: f64,
    low_reward_scale: f64,
    rng: &mut Rng,
) -> Result<()> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::InvalidArgument(format!(
            "relabel probability {probability} outside [0, 1]"
        )));
    }
    for tr in transitions.iter_mut() {
        if rng.uniform() >= probability {
            continue;
        }
        let delta: Vec<f64> = space
            .range()
            .half_widths()
            .iter()
            .map(|h| rng.uniform_in(-h, *h))
            .collect();
        let goal = Goal::new(delta);
        tr.reward = low_reward_scale * space.intrinsic_reward(&tr.state, &goal, &tr.next_state)?;
        tr.next_goal = space.goal_transition(&tr.state, &goal, &tr.next_state)?;
        tr.goal = goal;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EPISODE_LEN;
    use crate::metrics::MemorySink;

    /// Tiny networks and batches keep loop tests fast.
    fn small_config() -> HiroConfig {
        let mut config = HiroConfig::default();
        config.td3.hidden = vec![8, 8];
        config.batch_size = 16;
        config.buffer_capacity = 4_096;
        config.total_steps = 600;
        config.eval_every = 300;
        config.eval_episodes = 2;
        config.pretrain_steps = 120;
        config
    }

    fn run_one_episode(trainer: &mut Trainer) -> MemorySink {
        let mut sink = MemorySink::new();
        trainer
            .run_training_episode(&mut sink, &mut |_| Ok(()))
            .unwrap();
        sink
    }

    #[test]
    fn c_1_yields_one_segment_per_step() {
        let mut config = small_config();
        config.c = 1;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 1).unwrap();
        run_one_episode(&mut trainer);
        assert_eq!(trainer.high_buffer().len(), EPISODE_LEN as usize);
        assert!(trainer.high_buffer().iter().all(|s| s.len() == 1));
    }

    #[test]
    fn default_horizon_yields_fifty_full_segments() {
        let mut trainer = Trainer::new(EnvKind::Maze, small_config(), 2).unwrap();
        run_one_episode(&mut trainer);
        assert_eq!(trainer.high_buffer().len(), 50);
        for (i, seg) in trainer.high_buffer().iter().enumerate() {
            assert_eq!(seg.len(), 10);
            assert_eq!(seg.terminal, i == 49, "only the last segment is terminal");
        }
        assert_eq!(trainer.low_buffer().len(), EPISODE_LEN as usize);
    }

    #[test]
    fn uneven_horizon_stores_a_true_length_tail_segment() {
        let mut config = small_config();
        config.c = 7;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 3).unwrap();
        run_one_episode(&mut trainer);
        // 500 = 71 * 7 + 3.
        assert_eq!(trainer.high_buffer().len(), 72);
        let segments: Vec<_> = trainer.high_buffer().iter().collect();
        assert!(segments[..71].iter().all(|s| s.len() == 7));
        assert_eq!(segments[71].len(), 3);
        assert!(segments[71].terminal);
    }

    #[test]
    fn stored_transitions_are_internally_consistent() {
        let mut config = small_config();
        config.low_reward_scale = 2.0;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 4).unwrap();
        run_one_episode(&mut trainer);
        let space = EnvKind::Maze.goal_space();
        for tr in trainer.low_buffer().iter() {
            let expect = 2.0
                * space
                    .intrinsic_reward(&tr.state, &tr.goal, &tr.next_state)
                    .unwrap();
            assert_eq!(tr.reward, expect);
            let rolled = space
                .goal_transition(&tr.state, &tr.goal, &tr.next_state)
                .unwrap();
            assert_eq!(tr.next_goal, rolled);
            // Conservation: the absolute goal point is fixed across the step.
            let p = space.project(&tr.state).unwrap();
            let q = space.project(&tr.next_state).unwrap();
            for d in 0..p.len() {
                let before = p[d] + tr.goal.delta[d];
                let after = q[d] + tr.next_goal.delta[d];
                assert!((before - after).abs() < 1e-12);
            }
        }
        for seg in trainer.high_buffer().iter() {
            for g in &seg.goal.delta {
                assert!(g.abs() <= 10.0, "stored goal outside range: {g}");
            }
        }
    }

    #[test]
    fn segment_reward_sums_are_raw_and_cover_the_episode() {
        let mut trainer = Trainer::new(EnvKind::Maze, small_config(), 5).unwrap();
        let sink = run_one_episode(&mut trainer);
        let segment_total: f64 = trainer.high_buffer().iter().map(|s| s.env_reward_sum).sum();
        let episode_return = sink
            .records
            .iter()
            .find_map(|r| match r {
                MetricRecord::Train { episode_return, .. } => Some(*episode_return),
                _ => None,
            })
            .unwrap();
        assert!((segment_total - episode_return).abs() < 1e-9);
    }

    #[test]
    fn train_cadence_counts_critic_updates_exactly() {
        let mut config = small_config();
        config.batch_size = 8;
        config.total_steps = 50;
        // One 500-step episode covers the 50-step budget; count ticks over
        // the whole episode.
        let mut trainer = Trainer::new(EnvKind::Maze, config, 6).unwrap();
        run_one_episode(&mut trainer);
        // Lower level trains every step once 8 transitions exist: steps
        // 8..=500. Higher level trains at multiples of 10 once 8 segments
        // exist, i.e. from step 80 on.
        assert_eq!(trainer.low_agent().critic_updates(), 493);
        assert_eq!(trainer.high_agent().unwrap().critic_updates(), 43);
    }

    #[test]
    fn lower_cadence_is_every_step_and_higher_every_ten() {
        // With batch 2 the lower level ticks at steps 2..=500 (499 updates)
        // and the higher at 20, 30, ..., 500 (49 updates): at step 7 the
        // lower level has trained and the higher has not.
        let mut config = small_config();
        config.batch_size = 2;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 7).unwrap();
        run_one_episode(&mut trainer);
        assert_eq!(trainer.low_agent().critic_updates(), 499);
        assert_eq!(trainer.high_agent().unwrap().critic_updates(), 49);
    }

    #[test]
    fn no_correction_stats_report_zero_changed_fraction() {
        let mut config = small_config();
        config.ablation = Ablation::NoCorrection;
        config.total_steps = 500;
        config.eval_every = 500;
        config.eval_episodes = 1;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 8).unwrap();
        let mut sink = MemorySink::new();
        trainer.run(&mut sink).unwrap();
        let stats: Vec<_> = sink
            .records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::CorrectionStats {
                    relabel_changed_fraction,
                    segments_relabeled,
                    ..
                } => Some((*relabel_changed_fraction, *segments_relabeled)),
                _ => None,
            })
            .collect();
        assert!(!stats.is_empty());
        for (fraction, segments) in &stats {
            assert_eq!(*fraction, 0.0);
            assert!(*segments > 0, "higher level must actually have trained");
        }
    }

    #[test]
    fn max_likelihood_changes_some_goals() {
        let mut config = small_config();
        config.total_steps = 500;
        config.eval_every = 500;
        config.eval_episodes = 1;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 9).unwrap();
        let mut sink = MemorySink::new();
        trainer.run(&mut sink).unwrap();
        let fraction = sink
            .records
            .iter()
            .find_map(|r| match r {
                MetricRecord::CorrectionStats {
                    relabel_changed_fraction,
                    ..
                } => Some(*relabel_changed_fraction),
                _ => None,
            })
            .unwrap();
        assert!(
            fraction > 0.0,
            "candidates should beat random initial goals"
        );
    }

    #[test]
    fn no_hrl_runs_one_flat_agent() {
        let mut config = small_config();
        config.ablation = Ablation::NoHrl;
        config.total_steps = 500;
        config.eval_every = 250;
        config.eval_episodes = 1;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 10).unwrap();
        assert!(trainer.high_agent().is_none());
        assert_eq!(
            trainer.low_agent().input_dim(),
            EnvKind::Maze.observation_dim()
        );
        let mut sink = MemorySink::new();
        trainer.run(&mut sink).unwrap();
        assert_eq!(trainer.high_buffer().len(), 0, "no goals anywhere");
        assert!(trainer.low_buffer().len() >= 500);
        for tr in trainer.low_buffer().iter() {
            assert!(tr.goal.delta.is_empty());
        }
        assert!(trainer.low_agent().critic_updates() > 0);
    }

    #[test]
    fn pretrain_freezes_the_lower_level_for_the_main_run() {
        let mut config = small_config();
        config.ablation = Ablation::PretrainLow;
        config.total_steps = 300;
        config.eval_every = 300;
        config.eval_episodes = 1;
        config.pretrain_steps = 150;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 11).unwrap();
        let mut sink = MemorySink::new();
        trainer.pretrain().unwrap();
        assert!(trainer.low_frozen());
        assert_eq!(
            trainer.low_buffer().len(),
            150,
            "exactly pretrain_steps transitions"
        );
        assert_eq!(trainer.env_steps(), 0, "main-phase counter untouched");
        let updates_after_pretrain = trainer.low_agent().critic_updates();
        assert_eq!(updates_after_pretrain, 150 - 16 + 1);
        let frozen_snapshot = trainer.low_agent().snapshot();

        while trainer.env_steps() < trainer.config().total_steps {
            trainer
                .run_training_episode(&mut sink, &mut |_| Ok(()))
                .unwrap();
        }
        assert_eq!(trainer.low_agent().critic_updates(), updates_after_pretrain);
        assert_eq!(trainer.low_agent().snapshot(), frozen_snapshot);
        assert!(trainer.high_agent().unwrap().critic_updates() > 0);
    }

    #[test]
    fn pretrain_goal_draws_respect_the_range() {
        let mut config = small_config();
        config.ablation = Ablation::PretrainLow;
        config.pretrain_steps = 200;
        let mut trainer = Trainer::new(EnvKind::Fall, config, 12).unwrap();
        trainer.pretrain().unwrap();
        let space = EnvKind::Fall.goal_space();
        let half = space.range().half_widths();
        // Transitions at in-episode offsets divisible by c hold freshly
        // drawn goals (rolled goals in between may legally drift outside).
        let mut t = 0usize;
        let mut starts = 0;
        for tr in trainer.low_buffer().iter() {
            assert_eq!(tr.goal.delta.len(), 3);
            if t.is_multiple_of(trainer.config().c) {
                for (g, h) in tr.goal.delta.iter().zip(half) {
                    assert!(g.abs() <= *h, "drawn goal {g} exceeds half-range {h}");
                }
                starts += 1;
            }
            t += 1;
            if tr.terminal {
                t = 0;
            }
        }
        assert!(starts >= 20);
    }

    #[test]
    fn relabel_low_goals_keeps_entries_consistent() {
        let mut config = small_config();
        config.total_steps = 40;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 13).unwrap();
        run_one_episode(&mut trainer);
        let space = EnvKind::Maze.goal_space();
        let mut batch: Vec<LowTransition> = trainer.low_buffer().iter().take(64).cloned().collect();
        let untouched = batch.clone();

        let mut rng = Rng::seed_from(99);
        relabel_low_goals(&mut batch, &space, 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(batch, untouched, "probability 0 changes nothing");

        relabel_low_goals(&mut batch, &space, 1.0, 1.0, &mut rng).unwrap();
        let mut changed = 0;
        for (tr, old) in batch.iter().zip(&untouched) {
            if tr.goal != old.goal {
                changed += 1;
            }
            for (g, h) in tr.goal.delta.iter().zip(space.range().half_widths()) {
                assert!(g.abs() <= *h);
            }
            let expect = space
                .intrinsic_reward(&tr.state, &tr.goal, &tr.next_state)
                .unwrap();
            assert_eq!(tr.reward, expect);
            let rolled = space
                .goal_transition(&tr.state, &tr.goal, &tr.next_state)
                .unwrap();
            assert_eq!(tr.next_goal, rolled);
        }
        assert_eq!(changed, 64, "probability 1 relabels every entry");
        assert!(relabel_low_goals(&mut batch, &space, 1.5, 1.0, &mut rng).is_err());
    }

    #[test]
    fn half_probability_relabels_about_half() {
        let mut config = small_config();
        config.ablation = Ablation::RelabelLow;
        config.total_steps = 40;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 14).unwrap();
        run_one_episode(&mut trainer);
        let space = EnvKind::Maze.goal_space();
        let mut batch: Vec<LowTransition> =
            trainer.low_buffer().iter().take(400).cloned().collect();
        let untouched = batch.clone();
        let mut rng = Rng::seed_from(100);
        relabel_low_goals(&mut batch, &space, 0.5, 1.0, &mut rng).unwrap();
        let changed = batch
            .iter()
            .zip(&untouched)
            .filter(|(a, b)| a.goal != b.goal)
            .count();
        // Binomial(400, 0.5): five sigma is 50.
        assert!((150..=250).contains(&changed), "changed {changed}");
    }

    #[test]
    fn evaluation_is_pure_and_counts_episodes() {
        let mut config = small_config();
        config.eval_episodes = 3;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 15).unwrap();
        run_one_episode(&mut trainer);
        let low_len = trainer.low_buffer().len();
        let high_len = trainer.high_buffer().len();
        let steps = trainer.env_steps();
        let low_updates = trainer.low_agent().critic_updates();
        let score = trainer.evaluate().unwrap();
        assert_eq!(trainer.low_buffer().len(), low_len);
        assert_eq!(trainer.high_buffer().len(), high_len);
        assert_eq!(trainer.env_steps(), steps);
        assert_eq!(trainer.low_agent().critic_updates(), low_updates);
        // Untrained agents do not cross 11 units to the pinned target.
        assert_eq!(score, 0.0);
    }

    #[test]
    fn gather_evaluation_reports_mean_return() {
        let mut config = small_config();
        config.eval_episodes = 2;
        config.total_steps = 10;
        let mut trainer = Trainer::new(EnvKind::Gather, config, 16).unwrap();
        let score = trainer.evaluate().unwrap();
        assert!(score.is_finite());
        assert_eq!((score * 2.0).fract(), 0.0, "mean of two integer returns");
    }

    #[test]
    fn full_runs_are_deterministic_per_seed() {
        let run = |seed: u64| {
            let mut trainer = Trainer::new(EnvKind::Push, small_config(), seed).unwrap();
            let mut sink = MemorySink::new();
            trainer.run(&mut sink).unwrap();
            sink.records.iter().map(|r| r.to_line()).collect::<Vec<_>>()
        };
        let a = run(21);
        assert_eq!(a, run(21), "same seed, same records, byte for byte");
        assert_ne!(a, run(22), "different seed diverges");
        assert!(a.iter().any(|l| l.contains("\"kind\":\"eval\"")));
        assert!(a.iter().any(|l| l.contains("\"kind\":\"train\"")));
    }

    #[test]
    fn eval_boundaries_and_final_eval_are_emitted() {
        let mut config = small_config();
        config.total_steps = 900;
        config.eval_every = 400;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 23).unwrap();
        let mut sink = MemorySink::new();
        let mut eval_hook_calls = 0u32;
        trainer
            .run_with(&mut sink, |_| {
                eval_hook_calls += 1;
                Ok(())
            })
            .unwrap();
        let eval_steps: Vec<u64> = sink
            .records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Eval { env_steps, .. } => Some(*env_steps),
                _ => None,
            })
            .collect();
        // Boundaries at 400 and 800 inside the 1000-step (two-episode) run,
        // plus the final off-boundary evaluation at 1000.
        assert_eq!(eval_steps, vec![400, 800, 1000]);
        assert_eq!(eval_hook_calls, 3, "checkpoint hook fires per evaluation");
        let mut steps_seen = 0;
        for r in &sink.records {
            assert!(r.env_steps() >= steps_seen, "env_steps is monotone");
            steps_seen = r.env_steps();
        }
    }

    #[test]
    fn ablation_names_round_trip_and_corrections_resolve() {
        for ab in Ablation::ALL {
            assert_eq!(Ablation::from_name(ab.name()), Some(ab));
        }
        assert_eq!(Ablation::from_name("none"), None);
        let cfg = CorrectionKind::MaxLikelihood;
        assert_eq!(
            effective_correction(Ablation::Hiro, cfg),
            CorrectionKind::MaxLikelihood
        );
        assert_eq!(
            effective_correction(Ablation::FunCosine, cfg),
            CorrectionKind::MaxLikelihood
        );
        assert_eq!(
            effective_correction(Ablation::Hiro, CorrectionKind::DirectImportance),
            CorrectionKind::DirectImportance
        );
        for ab in [
            Ablation::NoCorrection,
            Ablation::PretrainLow,
            Ablation::RelabelLow,
            Ablation::NoHrl,
        ] {
            assert_eq!(effective_correction(ab, cfg), CorrectionKind::None);
        }
        assert_eq!(
            effective_correction(Ablation::FunTransitionPg, cfg),
            CorrectionKind::TransitionPg
        );
    }

    #[test]
    fn fun_cosine_rewards_are_cosines_not_distances() {
        let mut config = small_config();
        config.ablation = Ablation::FunCosine;
        config.total_steps = 40;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 24).unwrap();
        run_one_episode(&mut trainer);
        let space = EnvKind::Maze.goal_space();
        for tr in trainer.low_buffer().iter() {
            let expect = space
                .cosine_reward(&tr.state, &tr.goal, &tr.next_state)
                .unwrap();
            assert_eq!(tr.reward, expect);
            assert!(tr.reward.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn importance_strategies_get_behavior_densities_stamped() {
        let mut config = small_config();
        config.correction = CorrectionKind::DirectImportance;
        config.total_steps = 40;
        let mut trainer = Trainer::new(EnvKind::Maze, config, 25).unwrap();
        run_one_episode(&mut trainer);
        for seg in trainer.high_buffer().iter() {
            let densities = seg.behavior_log_densities.as_ref().unwrap();
            assert_eq!(densities.len(), seg.len());
            assert!(densities.iter().all(|d| d.is_finite()));
        }

        let mut trainer = Trainer::new(EnvKind::Maze, small_config(), 25).unwrap();
        run_one_episode(&mut trainer);
        for seg in trainer.high_buffer().iter() {
            assert!(
                seg.behavior_log_densities.is_none(),
                "not stamped when unused"
            );
        }
    }

    #[test]
    fn degenerate_configs_are_rejected_by_name() {
        let mut config = small_config();
        config.c = 0;
        let err = Trainer::new(EnvKind::Maze, config, 1).err().unwrap();
        assert!(err.to_string().contains("c must be"), "{err}");
        let mut config = small_config();
        config.high_reward_scale = 0.0;
        assert!(Trainer::new(EnvKind::Maze, config, 1).is_err());
        let mut config = small_config();
        config.total_steps = 0;
        assert!(Trainer::new(EnvKind::Maze, config, 1).is_err());
    }

    #[test]
    fn desk_and_full_budgets_expose_the_documented_defaults() {
        let desk = HiroConfig::default();
        assert_eq!(desk.c, 10);
        assert_eq!(desk.high_reward_scale, 0.1);
        assert_eq!(desk.low_train_every, 1);
        assert_eq!(desk.high_train_every, 10);
        assert_eq!(desk.batch_size, 128);
        assert_eq!(desk.buffer_capacity, 200_000);
        assert_eq!((desk.total_steps, desk.eval_every), (300_000, 10_000));
        assert_eq!((desk.eval_episodes, desk.pretrain_steps), (20, 100_000));
        let full = HiroConfig::full_scale();
        assert_eq!((full.eval_every, full.eval_episodes), (50_000, 50));
        assert_eq!(
            (full.total_steps, full.pretrain_steps),
            (10_000_000, 2_000_000)
        );
        assert_eq!(full.c, desk.c);
    }
}
