//! Twin-delayed deterministic actor-critic, the learner at both hierarchy
//! levels.
//!
//! Two critics regress toward the smaller of the two target-critic
//! bootstraps, with clipped Gaussian smoothing noise on the target action.
//! The actor ascends critic one and is updated, together with all three
//! target networks, every `actor_delay` critic updates.
//!
//! Lower-level agents see `state ++ goal` as their input vector, higher ones
//! the raw state; this module is agnostic to the split.

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::{soft_update, AdamState, Gradients, MlpParams, OutputTransform};
use crate::rng::Rng;
use crate::tensor::{Bounds, Matrix};

const CHECKPOINT_MAGIC: &[u8; 8] = b"HIROTD31";
const MAX_LAYERS: usize = 64;
const MAX_WIDTH: usize = 1 << 20;

/// Hyperparameters; the defaults are the values used by every experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Td3Config {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Actor and target updates happen every this many critic updates.
    pub actor_delay: u64,
    /// Stddev of the Gaussian exploration noise added by `select_action`.
    pub exploration_sigma: f64,
    /// Target-smoothing noise stddev as a fraction of each action half-range.
    pub policy_noise_scale: f64,
    /// Smoothing-noise clip as a fraction of each action half-range.
    pub noise_clip_scale: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            hidden: vec![64, 64],
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            actor_delay: 2,
            exploration_sigma: 1.0,
            policy_noise_scale: 0.2,
            noise_clip_scale: 0.5,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("zero-width hidden layer".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} and tau {} must lie in [0, 1]",
                self.gamma, self.tau
            )));
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        if self.actor_delay == 0 {
            return Err(Error::InvalidArgument(
                "actor_delay must be at least 1".into(),
            ));
        }
        if self.exploration_sigma < 0.0
            || self.policy_noise_scale < 0.0
            || self.noise_clip_scale < 0.0
        {
            return Err(Error::InvalidArgument(
                "noise parameters must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One training minibatch. For lower-level agents the goal is already
/// concatenated into the state input columns.
#[derive(Debug, Clone)]
pub struct Batch {
    state_inputs: Matrix,
    actions: Matrix,
    rewards: Vec<f64>,
    next_state_inputs: Matrix,
    terminals: Vec<bool>,
    /// Per-row importance weights for the critic regression; None means all 1.
    weights: Option<Vec<f64>>,
}

impl Batch {
    pub fn new(
        state_inputs: Matrix,
        actions: Matrix,
        rewards: Vec<f64>,
        next_state_inputs: Matrix,
        terminals: Vec<bool>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let rows = state_inputs.rows();
        if rows == 0 {
            return Err(Error::Precondition("empty batch".into()));
        }
        if actions.rows() != rows
            || rewards.len() != rows
            || next_state_inputs.rows() != rows
            || terminals.len() != rows
        {
            return Err(Error::Shape(format!(
                "batch rows disagree: {} states, {} actions, {} rewards, {} next states, {} terminals",
                rows,
                actions.rows(),
                rewards.len(),
                next_state_inputs.rows(),
                terminals.len()
            )));
        }
        if next_state_inputs.cols() != state_inputs.cols() {
            return Err(Error::Shape("state and next-state widths differ".into()));
        }
        if let Some(w) = &weights {
            if w.len() != rows {
                return Err(Error::Shape(format!("{} weights for {rows} rows", w.len())));
            }
            if w.iter().any(|w| !w.is_finite() || *w <= 0.0) {
                return Err(Error::InvalidArgument(
                    "weights must be finite and positive".into(),
                ));
            }
        }
        Ok(Batch {
            state_inputs,
            actions,
            rewards,
            next_state_inputs,
            terminals,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.state_inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Actor-critic losses reported by one [`Td3Agent::train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean squared Bellman error before the critic update.
    pub critic_loss: f64,
    /// Mean critic-one value before the actor update; None on
    /// critic-only ticks.
    pub actor_mean_q: Option<f64>,
}

pub struct Td3Agent {
    actor: MlpParams,
    actor_target: MlpParams,
    critic1: MlpParams,
    critic2: MlpParams,
    critic1_target: MlpParams,
    critic2_target: MlpParams,
    actor_adam: AdamState,
    critic1_adam: AdamState,
    critic2_adam: AdamState,
    action_range: Bounds,
    input_dim: usize,
    gamma: f64,
    tau: f64,
    actor_delay: u64,
    exploration_sigma: f64,
    /// Per-dim smoothing noise stddev: policy_noise_scale x half-range.
    policy_noise_sigma: Vec<f64>,
    /// Per-dim smoothing noise clip: noise_clip_scale x half-range.
    noise_clip: Vec<f64>,
    critic_updates: u64,
}

fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows(), b.rows());
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

fn bootstrap(reward: f64, terminal: bool, gamma: f64, q1: f64, q2: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * q1.min(q2)
    }
}

/// Target action: deterministic target-actor output plus clipped smoothing
/// noise, re-clipped to the action range.
fn smoothed_action(action: &[f64], noise: &[f64], clip: &[f64], range: &Bounds) -> Vec<f64> {
    let mut out: Vec<f64> = action
        .iter()
        .zip(noise)
        .zip(clip)
        .map(|((a, n), c)| a + n.clamp(-c, *c))
        .collect();
    range.clip(&mut out);
    out
}

impl Td3Agent {
    /// Fresh agent: actor, two critics, and target copies of all three.
    /// Network draws consume the rng in the order actor, critic1, critic2.
    pub fn new(
        input_dim: usize,
        action_range: Bounds,
        config: &Td3Config,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        let action_dim = action_range.dim();
        let mut actor_sizes = vec![input_dim];
        actor_sizes.extend_from_slice(&config.hidden);
        actor_sizes.push(action_dim);
        let mut critic_sizes = vec![input_dim + action_dim];
        critic_sizes.extend_from_slice(&config.hidden);
        critic_sizes.push(1);

        let actor = MlpParams::new(
            &actor_sizes,
            OutputTransform::TanhScaled(action_range.clone()),
            rng,
        )?;
        let critic1 = MlpParams::new(&critic_sizes, OutputTransform::Identity, rng)?;
        let critic2 = MlpParams::new(&critic_sizes, OutputTransform::Identity, rng)?;
        let actor_adam = AdamState::new(&actor, config.actor_lr);
        let critic1_adam = AdamState::new(&critic1, config.critic_lr);
        let critic2_adam = AdamState::new(&critic2, config.critic_lr);
        Ok(Td3Agent {
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            actor_adam,
            critic1_adam,
            critic2_adam,
            policy_noise_sigma: action_range.scaled(config.policy_noise_scale),
            noise_clip: action_range.scaled(config.noise_clip_scale),
            action_range,
            input_dim,
            gamma: config.gamma,
            tau: config.tau,
            actor_delay: config.actor_delay,
            exploration_sigma: config.exploration_sigma,
            critic_updates: 0,
        })
    }

    pub fn actor(&self) -> &MlpParams {
        &self.actor
    }

    pub fn action_range(&self) -> &Bounds {
        &self.action_range
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_range.dim()
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    /// Critic-one estimate for a state-action pair; observation probe.
    pub fn critic_value(&self, state_input: &[f64], action: &[f64]) -> Result<f64> {
        let mut input = state_input.to_vec();
        input.extend_from_slice(action);
        Ok(self.critic1.forward(&input)?[0])
    }

    /// Deterministic action, optionally with clipped exploration noise.
    pub fn select_action(
        &self,
        state_input: &[f64],
        explore: bool,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        let mut action = self.actor.forward(state_input)?;
        if explore {
            for a in action.iter_mut() {
                *a += rng.normal(0.0, self.exploration_sigma);
            }
            self.action_range.clip(&mut action);
        }
        Ok(action)
    }

    /// Bellman target for one transition: reward plus the discounted minimum
    /// of the two target critics at the smoothed target action. Terminal
    /// transitions bootstrap nothing.
    pub fn critic_target(
        &self,
        reward: f64,
        next_state_input: &[f64],
        terminal: bool,
        rng: &mut Rng,
    ) -> Result<f64> {
        let raw = self.actor_target.forward(next_state_input)?;
        let noise: Vec<f64> = self
            .policy_noise_sigma
            .iter()
            .map(|s| rng.normal(0.0, *s))
            .collect();
        let action = smoothed_action(&raw, &noise, &self.noise_clip, &self.action_range);
        let mut input = next_state_input.to_vec();
        input.extend_from_slice(&action);
        let q1 = self.critic1_target.forward(&input)?[0];
        let q2 = self.critic2_target.forward(&input)?[0];
        Ok(bootstrap(reward, terminal, self.gamma, q1, q2))
    }

    /// Batched targets; noise is drawn row by row, dimension by dimension,
    /// so the result is bit-identical to sequential [`Self::critic_target`]
    /// calls sharing the rng.
    fn compute_targets(&self, batch: &Batch, rng: &mut Rng) -> Result<Vec<f64>> {
        let rows = batch.len();
        let raw = self.actor_target.forward_batch(&batch.next_state_inputs)?;
        let mut noisy = Matrix::zeros(rows, self.action_dim());
        for r in 0..rows {
            let noise: Vec<f64> = self
                .policy_noise_sigma
                .iter()
                .map(|s| rng.normal(0.0, *s))
                .collect();
            let action = smoothed_action(raw.row(r), &noise, &self.noise_clip, &self.action_range);
            noisy.row_mut(r).copy_from_slice(&action);
        }
        let inputs = hcat(&batch.next_state_inputs, &noisy);
        let q1 = self.critic1_target.forward_batch(&inputs)?;
        let q2 = self.critic2_target.forward_batch(&inputs)?;
        let targets = (0..rows)
            .map(|r| {
                bootstrap(
                    batch.rewards[r],
                    batch.terminals[r],
                    self.gamma,
                    q1.get(r, 0),
                    q2.get(r, 0),
                )
            })
            .collect();
        Ok(targets)
    }

    fn check_batch_dims(&self, batch: &Batch) -> Result<()> {
        if batch.state_inputs.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "batch state width {} vs agent input {}",
                batch.state_inputs.cols(),
                self.input_dim
            )));
        }
        if batch.actions.cols() != self.action_dim() {
            return Err(Error::Shape(format!(
                "batch action width {} vs agent action {}",
                batch.actions.cols(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    /// One Adam step on both critics toward the smoothed twin-min targets.
    /// Returns the importance-weighted mean squared Bellman error before the
    /// update (both twins averaged).
    pub fn train_critics(&mut self, batch: &Batch, rng: &mut Rng) -> Result<f64> {
        self.check_batch_dims(batch)?;
        let rows = batch.len();
        let targets = self.compute_targets(batch, rng)?;
        let inputs = hcat(&batch.state_inputs, &batch.actions);
        let q1 = self.critic1.forward_batch(&inputs)?;
        let q2 = self.critic2.forward_batch(&inputs)?;

        let scale = 1.0 / rows as f64;
        let mut loss = 0.0;
        let mut grad1 = Matrix::zeros(rows, 1);
        let mut grad2 = Matrix::zeros(rows, 1);
        for r in 0..rows {
            let w = batch.weights.as_ref().map_or(1.0, |w| w[r]);
            let e1 = q1.get(r, 0) - targets[r];
            let e2 = q2.get(r, 0) - targets[r];
            loss += w * 0.5 * (e1 * e1 + e2 * e2) * scale;
            grad1.set(r, 0, w * e1 * scale);
            grad2.set(r, 0, w * e2 * scale);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("critic loss {loss}")));
        }
        let (g1, _) = self.critic1.backward_batch(&inputs, &grad1)?;
        let (g2, _) = self.critic2.backward_batch(&inputs, &grad2)?;
        self.critic1_adam.adam_step(&mut self.critic1, &g1)?;
        self.critic2_adam.adam_step(&mut self.critic2, &g2)?;
        Ok(loss)
    }

    /// One Adam ascent step on the actor through critic one. Returns the
    /// mean critic-one value at the actor's current actions, before the
    /// update. Importance weights do not apply here; they correct the value
    /// regression, not the policy objective.
    pub fn train_actor(&mut self, batch: &Batch) -> Result<f64> {
        self.check_batch_dims(batch)?;
        let rows = batch.len();
        let mu = self.actor.forward_batch(&batch.state_inputs)?;
        let inputs = hcat(&batch.state_inputs, &mu);
        let q = self.critic1.forward_batch(&inputs)?;
        let mut mean_q = 0.0;
        for r in 0..rows {
            mean_q += q.get(r, 0);
        }
        mean_q /= rows as f64;
        if !mean_q.is_finite() {
            return Err(Error::Numeric(format!("actor objective {mean_q}")));
        }

        // Ascent on mean Q == descent on -mean Q.
        let mut outgrad = Matrix::zeros(rows, 1);
        for r in 0..rows {
            outgrad.set(r, 0, -1.0 / rows as f64);
        }
        let (_, input_grads) = self.critic1.backward_batch(&inputs, &outgrad)?;
        let mut action_grads = Matrix::zeros(rows, self.action_dim());
        for r in 0..rows {
            action_grads
                .row_mut(r)
                .copy_from_slice(&input_grads.row(r)[self.input_dim..]);
        }
        let (actor_grads, _) = self
            .actor
            .backward_batch(&batch.state_inputs, &action_grads)?;
        self.actor_adam.adam_step(&mut self.actor, &actor_grads)?;
        Ok(mean_q)
    }

    fn update_targets(&mut self) -> Result<()> {
        soft_update(&mut self.actor_target, &self.actor, self.tau)?;
        soft_update(&mut self.critic1_target, &self.critic1, self.tau)?;
        soft_update(&mut self.critic2_target, &self.critic2, self.tau)?;
        Ok(())
    }

    /// One full training tick: critics every call; actor and targets every
    /// `actor_delay` calls.
    pub fn train_step(&mut self, batch: &Batch, rng: &mut Rng) -> Result<StepReport> {
        let critic_loss = self.train_critics(batch, rng)?;
        self.critic_updates += 1;
        let actor_mean_q = if self.critic_updates.is_multiple_of(self.actor_delay) {
            let q = self.train_actor(batch)?;
            self.update_targets()?;
            Some(q)
        } else {
            None
        };
        Ok(StepReport {
            critic_loss,
            actor_mean_q,
        })
    }

    /// Versioned binary dump of all six networks, the three optimizer
    /// states, and the agent scalars.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(CHECKPOINT_MAGIC);
        w.u64(self.input_dim as u64);
        w.f64(self.gamma);
        w.f64(self.tau);
        w.f64(self.exploration_sigma);
        w.u64(self.actor_delay);
        w.u64(self.critic_updates);
        w.f64_slice(self.action_range.half_widths());
        w.f64_slice(&self.policy_noise_sigma);
        w.f64_slice(&self.noise_clip);
        for net in [
            &self.actor,
            &self.actor_target,
            &self.critic1,
            &self.critic2,
            &self.critic1_target,
            &self.critic2_target,
        ] {
            encode_net(&mut w, net);
        }
        for adam in [&self.actor_adam, &self.critic1_adam, &self.critic2_adam] {
            encode_adam(&mut w, adam);
        }
        w.into_bytes()
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let input_dim = r.count(MAX_WIDTH)?;
        let gamma = r.f64()?;
        let tau = r.f64()?;
        let exploration_sigma = r.f64()?;
        let actor_delay = r.u64()?;
        let critic_updates = r.u64()?;
        let action_range =
            Bounds::new(r.f64_vec()?).map_err(|e| Error::Snapshot(format!("action range: {e}")))?;
        let policy_noise_sigma = r.f64_vec()?;
        let noise_clip = r.f64_vec()?;
        if actor_delay == 0 {
            return Err(Error::Snapshot("actor_delay 0".into()));
        }
        if policy_noise_sigma.len() != action_range.dim() || noise_clip.len() != action_range.dim()
        {
            return Err(Error::Snapshot("noise vectors vs action dim".into()));
        }

        let actor = decode_net(&mut r)?;
        let actor_target = decode_net(&mut r)?;
        let critic1 = decode_net(&mut r)?;
        let critic2 = decode_net(&mut r)?;
        let critic1_target = decode_net(&mut r)?;
        let critic2_target = decode_net(&mut r)?;
        if !actor.congruent_with(&actor_target)
            || !critic1.congruent_with(&critic2)
            || !critic1.congruent_with(&critic1_target)
            || !critic1.congruent_with(&critic2_target)
        {
            return Err(Error::Snapshot("network families not congruent".into()));
        }
        if actor.input_dim() != input_dim
            || actor.output_dim() != action_range.dim()
            || critic1.input_dim() != input_dim + action_range.dim()
            || critic1.output_dim() != 1
        {
            return Err(Error::Snapshot("network dims vs agent dims".into()));
        }
        let actor_adam = decode_adam(&mut r, &actor)?;
        let critic1_adam = decode_adam(&mut r, &critic1)?;
        let critic2_adam = decode_adam(&mut r, &critic2)?;
        r.finish()?;
        Ok(Td3Agent {
            actor,
            actor_target,
            critic1,
            critic2,
            critic1_target,
            critic2_target,
            actor_adam,
            critic1_adam,
            critic2_adam,
            action_range,
            input_dim,
            gamma,
            tau,
            actor_delay,
            exploration_sigma,
            policy_noise_sigma,
            noise_clip,
            critic_updates,
        })
    }
}

fn encode_net(w: &mut ByteWriter, net: &MlpParams) {
    w.u64(net.layer_sizes().len() as u64);
    for s in net.layer_sizes() {
        w.u64(*s as u64);
    }
    match net.output_transform() {
        OutputTransform::Identity => w.u8(0),
        OutputTransform::TanhScaled(bounds) => {
            w.u8(1);
            w.f64_slice(bounds.half_widths());
        }
    }
    for l in 0..net.num_layers() {
        w.f64_slice(net.weights()[l].as_slice());
        w.f64_slice(&net.biases()[l]);
    }
}

fn decode_net(r: &mut ByteReader) -> Result<MlpParams> {
    let n = r.count(MAX_LAYERS)?;
    let mut layer_sizes = Vec::with_capacity(n);
    for _ in 0..n {
        layer_sizes.push(r.count(MAX_WIDTH)?);
    }
    let output = match r.u8()? {
        0 => OutputTransform::Identity,
        1 => OutputTransform::TanhScaled(
            Bounds::new(r.f64_vec()?)
                .map_err(|e| Error::Snapshot(format!("output bounds: {e}")))?,
        ),
        tag => {
            return Err(Error::Snapshot(format!(
                "unknown output transform tag {tag}"
            )))
        }
    };
    if layer_sizes.len() < 2 {
        return Err(Error::Snapshot(format!(
            "{} layer sizes",
            layer_sizes.len()
        )));
    }
    let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
    let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
    for l in 0..layer_sizes.len() - 1 {
        let (rows, cols) = (layer_sizes[l + 1], layer_sizes[l]);
        let data = r.f64_vec()?;
        if data.len() != rows * cols {
            return Err(Error::Snapshot(format!(
                "layer {l}: {} weights for {rows}x{cols}",
                data.len()
            )));
        }
        let mut m = Matrix::zeros(rows, cols);
        m.as_mut_slice().copy_from_slice(&data);
        weights.push(m);
        let bias = r.f64_vec()?;
        if bias.len() != rows {
            return Err(Error::Snapshot(format!(
                "layer {l}: {} biases for {rows}",
                bias.len()
            )));
        }
        biases.push(bias);
    }
    MlpParams::from_raw_parts(layer_sizes, weights, biases, output)
        .map_err(|e| Error::Snapshot(format!("checkpoint network: {e}")))
}

fn encode_adam(w: &mut ByteWriter, adam: &AdamState) {
    let (step, lr, beta1, beta2, eps, m, v) = adam.raw_parts();
    w.u64(step);
    w.f64(lr);
    w.f64(beta1);
    w.f64(beta2);
    w.f64(eps);
    for moments in [m, v] {
        for l in 0..moments.weights.len() {
            w.f64_slice(moments.weights[l].as_slice());
            w.f64_slice(&moments.biases[l]);
        }
    }
}

fn decode_adam(r: &mut ByteReader, params: &MlpParams) -> Result<AdamState> {
    let step = r.u64()?;
    let lr = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Snapshot(format!("optimizer lr {lr}")));
    }
    let mut moments = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut g = Gradients::zeros_like(params);
        for l in 0..params.num_layers() {
            let data = r.f64_vec()?;
            if data.len() != g.weights[l].as_slice().len() {
                return Err(Error::Snapshot(format!("optimizer moment layer {l} size")));
            }
            g.weights[l].as_mut_slice().copy_from_slice(&data);
            let bias = r.f64_vec()?;
            if bias.len() != g.biases[l].len() {
                return Err(Error::Snapshot(format!("optimizer moment bias {l} size")));
            }
            g.biases[l] = bias;
        }
        moments.push(g);
    }
    let v = moments.pop().unwrap();
    let m = moments.pop().unwrap();
    Ok(AdamState::from_raw_parts(step, lr, beta1, beta2, eps, m, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    const IN: usize = 3;
    const ACT: usize = 2;

    fn small_config() -> Td3Config {
        Td3Config {
            hidden: vec![16, 16],
            ..Td3Config::default()
        }
    }

    fn agent(config: &Td3Config, seed: u64) -> Td3Agent {
        let mut rng = Rng::seed_from(seed);
        Td3Agent::new(IN, Bounds::uniform(ACT, 1.0).unwrap(), config, &mut rng).unwrap()
    }

    fn random_batch(rows: usize, rng: &mut Rng) -> Batch {
        let states = Matrix::from_fn(rows, IN, |_, _| rng.uniform_in(-1.0, 1.0));
        let actions = Matrix::from_fn(rows, ACT, |_, _| rng.uniform_in(-1.0, 1.0));
        let rewards = (0..rows).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let next = Matrix::from_fn(rows, IN, |_, _| rng.uniform_in(-1.0, 1.0));
        let terminals = (0..rows).map(|_| rng.uniform() < 0.2).collect();
        Batch::new(states, actions, rewards, next, terminals, None).unwrap()
    }

    fn params_bits(net: &MlpParams) -> Vec<u64> {
        let mut bits = Vec::new();
        for l in 0..net.num_layers() {
            bits.extend(net.weights()[l].as_slice().iter().map(|v| v.to_bits()));
            bits.extend(net.biases()[l].iter().map(|v| v.to_bits()));
        }
        bits
    }

    fn params_close(a: &MlpParams, b: &MlpParams, tol: f64) -> bool {
        for l in 0..a.num_layers() {
            for (x, y) in a.weights()[l]
                .as_slice()
                .iter()
                .zip(b.weights()[l].as_slice())
            {
                if (x - y).abs() > tol {
                    return false;
                }
            }
            for (x, y) in a.biases()[l].iter().zip(&b.biases()[l]) {
                if (x - y).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    fn zero_net(net: &mut MlpParams) {
        for w in net.weights_mut() {
            w.as_mut_slice().fill(0.0);
        }
        for b in net.biases_mut() {
            b.fill(0.0);
        }
    }

    #[test]
    fn construction_initializes_targets_as_copies() {
        let a = agent(&small_config(), 5);
        assert_eq!(params_bits(&a.actor), params_bits(&a.actor_target));
        assert_eq!(params_bits(&a.critic1), params_bits(&a.critic1_target));
        assert_eq!(params_bits(&a.critic2), params_bits(&a.critic2_target));
        assert_ne!(params_bits(&a.critic1), params_bits(&a.critic2));
        assert_eq!(a.critic_updates(), 0);
    }

    #[test]
    fn gamma_zero_target_equals_reward() {
        let config = Td3Config {
            gamma: 0.0,
            ..small_config()
        };
        let a = agent(&config, 6);
        let mut rng = Rng::seed_from(7);
        for _ in 0..10 {
            let next: Vec<f64> = (0..IN).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let reward = rng.uniform_in(-3.0, 3.0);
            let t = a.critic_target(reward, &next, false, &mut rng).unwrap();
            assert_eq!(t, reward);
        }
    }

    #[test]
    fn terminal_target_equals_reward() {
        let a = agent(&small_config(), 8);
        let mut rng = Rng::seed_from(9);
        let next = vec![0.3; IN];
        let t = a.critic_target(-1.5, &next, true, &mut rng).unwrap();
        assert_eq!(t, -1.5);
    }

    #[test]
    fn zero_critics_bootstrap_nothing() {
        let mut a = agent(&small_config(), 10);
        zero_net(&mut a.critic1_target);
        zero_net(&mut a.critic2_target);
        let mut rng = Rng::seed_from(11);
        let t = a.critic_target(2.5, &[0.1; IN], false, &mut rng).unwrap();
        assert_eq!(t, 2.5);
    }

    #[test]
    fn target_uses_the_smaller_twin() {
        let a = agent(&small_config(), 12);
        let next = vec![0.4, -0.2, 0.9];
        // Replay the same smoothing noise through both manual bootstraps.
        let mut rng = Rng::seed_from(13);
        let t = a.critic_target(0.7, &next, false, &mut rng).unwrap();
        let mut rng = Rng::seed_from(13);
        let raw = a.actor_target.forward(&next).unwrap();
        let noise: Vec<f64> = a
            .policy_noise_sigma
            .iter()
            .map(|s| rng.normal(0.0, *s))
            .collect();
        let action = smoothed_action(&raw, &noise, &a.noise_clip, &a.action_range);
        let mut input = next.clone();
        input.extend_from_slice(&action);
        let q1 = a.critic1_target.forward(&input).unwrap()[0];
        let q2 = a.critic2_target.forward(&input).unwrap()[0];
        assert!(t <= 0.7 + a.gamma * q1 + 1e-15);
        assert!(t <= 0.7 + a.gamma * q2 + 1e-15);
        assert_eq!(t, bootstrap(0.7, false, a.gamma, q1, q2));
    }

    #[test]
    fn batched_targets_match_sequential_single_calls_bitwise() {
        let a = agent(&small_config(), 14);
        let mut rng = Rng::seed_from(15);
        let batch = random_batch(5, &mut rng);
        let mut rng_batch = Rng::seed_from(77);
        let batched = a.compute_targets(&batch, &mut rng_batch).unwrap();
        let mut rng_single = Rng::seed_from(77);
        for (r, expected) in batched.iter().enumerate() {
            let single = a
                .critic_target(
                    batch.rewards[r],
                    batch.next_state_inputs.row(r),
                    batch.terminals[r],
                    &mut rng_single,
                )
                .unwrap();
            assert_eq!(expected.to_bits(), single.to_bits(), "row {r}");
        }
    }

    #[test]
    fn fixed_transition_regression_converges() {
        let config = Td3Config {
            gamma: 0.0,
            ..small_config()
        };
        let mut a = agent(&config, 16);
        let state = Matrix::from_fn(1, IN, |_, c| 0.1 * (c as f64 + 1.0));
        let action = Matrix::from_fn(1, ACT, |_, c| 0.2 - 0.1 * c as f64);
        let batch = Batch::new(
            state.clone(),
            action.clone(),
            vec![1.0],
            state.clone(),
            vec![false],
            None,
        )
        .unwrap();
        let mut rng = Rng::seed_from(17);
        let mut converged_at = None;
        for step in 0..2000 {
            a.train_critics(&batch, &mut rng).unwrap();
            let q = a.critic_value(state.row(0), action.row(0)).unwrap();
            if (q - 1.0).abs() < 1e-2 {
                converged_at = Some(step + 1);
                break;
            }
        }
        let q = a.critic_value(state.row(0), action.row(0)).unwrap();
        assert!(
            converged_at.is_some(),
            "critic never reached the fixed target: final Q {q}"
        );
    }

    #[test]
    fn critic_loss_is_nonnegative_and_duplication_invariant() {
        let config = Td3Config {
            policy_noise_scale: 0.0,
            ..small_config()
        };
        let mut rng = Rng::seed_from(18);
        let base = random_batch(6, &mut rng);
        let rows = base.len();
        let dup = {
            let rep = |m: &Matrix| Matrix::from_fn(rows * 3, m.cols(), |r, c| m.get(r % rows, c));
            Batch::new(
                rep(&base.state_inputs),
                rep(&base.actions),
                (0..rows * 3).map(|r| base.rewards[r % rows]).collect(),
                rep(&base.next_state_inputs),
                (0..rows * 3).map(|r| base.terminals[r % rows]).collect(),
                None,
            )
            .unwrap()
        };

        let mut a1 = agent(&config, 19);
        let mut a2 = agent(&config, 19);
        let mut rng1 = Rng::seed_from(20);
        let mut rng2 = Rng::seed_from(20);
        let l1 = a1.train_critics(&base, &mut rng1).unwrap();
        let l2 = a2.train_critics(&dup, &mut rng2).unwrap();
        assert!(l1 >= 0.0);
        assert!((l1 - l2).abs() < 1e-12, "{l1} vs {l2}");
        assert!(params_close(&a1.critic1, &a2.critic1, 1e-12));
        assert!(params_close(&a1.critic2, &a2.critic2, 1e-12));
    }

    #[test]
    fn zero_critic_leaves_actor_unchanged() {
        let mut a = agent(&small_config(), 21);
        zero_net(&mut a.critic1);
        let before = params_bits(&a.actor);
        let mut rng = Rng::seed_from(22);
        let batch = random_batch(4, &mut rng);
        let mean_q = a.train_actor(&batch).unwrap();
        assert_eq!(mean_q, 0.0);
        assert_eq!(params_bits(&a.actor), before);
    }

    #[test]
    fn train_actor_reports_the_pre_update_mean_q() {
        let mut a = agent(&small_config(), 23);
        let mut rng = Rng::seed_from(24);
        let batch = random_batch(7, &mut rng);
        let mut manual = 0.0;
        for r in 0..batch.len() {
            let mu = a.actor.forward(batch.state_inputs.row(r)).unwrap();
            manual += a.critic_value(batch.state_inputs.row(r), &mu).unwrap();
        }
        manual /= batch.len() as f64;
        let reported = a.train_actor(&batch).unwrap();
        assert!((reported - manual).abs() < 1e-12, "{reported} vs {manual}");
    }

    #[test]
    fn actor_converges_on_a_learned_quadratic_critic() {
        // Regress critic one onto Q(s, a) = -(a - 0.3)^2 at s = 0, then let
        // the actor ascend it; the maximizer is 0.3.
        let mut rng = Rng::seed_from(25);
        let mut critic = MlpParams::new(&[2, 64, 1], OutputTransform::Identity, &mut rng).unwrap();
        let mut adam = AdamState::new(&critic, 1e-3);
        // Deterministic dense grid over the action interval.
        let rows = 101;
        let inputs = Matrix::from_fn(
            rows,
            2,
            |r, c| if c == 0 { 0.0 } else { -1.0 + r as f64 * 0.02 },
        );
        for _ in 0..6000 {
            let q = critic.forward_batch(&inputs).unwrap();
            let mut outgrad = Matrix::zeros(rows, 1);
            for r in 0..rows {
                let a = inputs.get(r, 1);
                let target = -(a - 0.3) * (a - 0.3);
                outgrad.set(r, 0, 2.0 * (q.get(r, 0) - target) / rows as f64);
            }
            let (grads, _) = critic.backward_batch(&inputs, &outgrad).unwrap();
            adam.adam_step(&mut critic, &grads).unwrap();
        }
        // The learned surface must peak near 0.3 before the actor test means
        // anything.
        let mut best_a = -1.0;
        let mut best_q = f64::NEG_INFINITY;
        for k in 0..=200 {
            let a = -1.0 + k as f64 * 0.01;
            let q = critic.forward(&[0.0, a]).unwrap()[0];
            if q > best_q {
                best_q = q;
                best_a = a;
            }
        }
        assert!((best_a - 0.3).abs() < 0.04, "critic peak at {best_a}");

        let config = Td3Config {
            hidden: vec![16, 16],
            actor_lr: 1e-3,
            ..Td3Config::default()
        };
        let mut rng2 = Rng::seed_from(26);
        let mut a = Td3Agent::new(1, Bounds::uniform(1, 1.0).unwrap(), &config, &mut rng2).unwrap();
        a.critic1 = critic;
        a.critic1_adam = AdamState::new(&a.critic1, 1e-3);
        let batch = Batch::new(
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            vec![0.0],
            Matrix::zeros(1, 1),
            vec![false],
            None,
        )
        .unwrap();
        for _ in 0..5000 {
            a.train_actor(&batch).unwrap();
        }
        let mut probe_rng = Rng::seed_from(27);
        let out = a.select_action(&[0.0], false, &mut probe_rng).unwrap();
        assert!((out[0] - 0.3).abs() <= 0.05, "actor settled at {}", out[0]);
    }

    #[test]
    fn select_action_is_deterministic_without_exploration() {
        let a = agent(&small_config(), 28);
        let mut rng = Rng::seed_from(29);
        let state = vec![0.2, -0.4, 0.6];
        let x = a.select_action(&state, false, &mut rng).unwrap();
        let y = a.select_action(&state, false, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(a.action_range.contains(&x));

        let config = Td3Config {
            exploration_sigma: 0.0,
            ..small_config()
        };
        let b = agent(&config, 28);
        let z = b.select_action(&state, true, &mut rng).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn exploration_noise_is_centered_and_clipped() {
        let config = Td3Config {
            exploration_sigma: 0.1,
            ..small_config()
        };
        // Wide range so clipping never binds for the mean check.
        let mut rng = Rng::seed_from(30);
        let a = Td3Agent::new(IN, Bounds::uniform(ACT, 50.0).unwrap(), &config, &mut rng).unwrap();
        let state = vec![0.1, 0.2, 0.3];
        let det = a.select_action(&state, false, &mut rng).unwrap();
        let n = 10_000;
        let mut mean = [0.0; ACT];
        for _ in 0..n {
            let s = a.select_action(&state, true, &mut rng).unwrap();
            for d in 0..ACT {
                mean[d] += s[d];
            }
        }
        for d in 0..ACT {
            mean[d] /= n as f64;
            assert!(
                (mean[d] - det[d]).abs() < 5.0 * 0.1 / (n as f64).sqrt(),
                "dim {d}: {} vs {}",
                mean[d],
                det[d]
            );
        }

        // Large sigma: every sample still lands inside the range.
        let config = Td3Config {
            exploration_sigma: 10.0,
            ..small_config()
        };
        let b = agent(&config, 31);
        for _ in 0..1000 {
            let s = b.select_action(&state, true, &mut rng).unwrap();
            assert!(b.action_range.contains(&s));
        }
    }

    #[test]
    fn actor_and_targets_update_on_the_delay_cadence() {
        let mut a = agent(&small_config(), 32);
        let mut rng = Rng::seed_from(33);
        let batch = random_batch(4, &mut rng);
        let actor_before = params_bits(&a.actor);
        let target_before = params_bits(&a.critic1_target);

        let report = a.train_step(&batch, &mut rng).unwrap();
        assert!(report.actor_mean_q.is_none());
        assert_eq!(params_bits(&a.actor), actor_before, "actor moved on tick 1");
        assert_eq!(
            params_bits(&a.critic1_target),
            target_before,
            "targets moved on tick 1"
        );

        let report = a.train_step(&batch, &mut rng).unwrap();
        assert!(report.actor_mean_q.is_some());
        assert_ne!(
            params_bits(&a.actor),
            actor_before,
            "actor frozen on tick 2"
        );
        assert_ne!(
            params_bits(&a.critic1_target),
            target_before,
            "targets frozen on tick 2"
        );
        assert_eq!(a.critic_updates(), 2);
    }

    #[test]
    fn training_is_deterministic_under_a_fixed_seed() {
        let run = || {
            let mut a = agent(&small_config(), 34);
            let mut rng = Rng::seed_from(35);
            let mut losses = Vec::new();
            for _ in 0..6 {
                let batch = random_batch(8, &mut rng);
                let report = a.train_step(&batch, &mut rng).unwrap();
                losses.push(report.critic_loss.to_bits());
                if let Some(q) = report.actor_mean_q {
                    losses.push(q.to_bits());
                }
            }
            (losses, params_bits(&a.actor), params_bits(&a.critic1))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly_and_resumes_identically() {
        let mut a = agent(&small_config(), 36);
        let mut rng = Rng::seed_from(37);
        for _ in 0..5 {
            let batch = random_batch(6, &mut rng);
            a.train_step(&batch, &mut rng).unwrap();
        }
        let snap = a.snapshot();
        let mut b = Td3Agent::from_snapshot(&snap).unwrap();
        assert_eq!(params_bits(&a.actor), params_bits(&b.actor));
        assert_eq!(params_bits(&a.actor_target), params_bits(&b.actor_target));
        assert_eq!(params_bits(&a.critic1), params_bits(&b.critic1));
        assert_eq!(params_bits(&a.critic2), params_bits(&b.critic2));
        assert_eq!(a.critic_updates(), b.critic_updates());
        assert_eq!(a.policy_noise_sigma, b.policy_noise_sigma);
        assert_eq!(a.noise_clip, b.noise_clip);

        // Resumed training must follow the original trajectory exactly.
        let batch = random_batch(6, &mut rng);
        let mut rng_a = Rng::seed_from(38);
        let mut rng_b = Rng::seed_from(38);
        let ra = a.train_step(&batch, &mut rng_a).unwrap();
        let rb = b.train_step(&batch, &mut rng_b).unwrap();
        assert_eq!(ra.critic_loss.to_bits(), rb.critic_loss.to_bits());
        assert_eq!(params_bits(&a.critic1), params_bits(&b.critic1));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let a = agent(&small_config(), 39);
        let snap = a.snapshot();

        let mut bad_magic = snap.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(
            Td3Agent::from_snapshot(&bad_magic),
            Err(Error::Snapshot(_))
        ));

        let truncated = &snap[..snap.len() - 9];
        assert!(matches!(
            Td3Agent::from_snapshot(truncated),
            Err(Error::Snapshot(_))
        ));

        let mut trailing = snap.clone();
        trailing.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(
            Td3Agent::from_snapshot(&trailing),
            Err(Error::Snapshot(_))
        ));
    }

    #[test]
    fn weighted_batches_scale_the_critic_loss() {
        let config = Td3Config {
            policy_noise_scale: 0.0,
            ..small_config()
        };
        let mut rng = Rng::seed_from(40);
        let base = random_batch(4, &mut rng);
        let weighted = Batch::new(
            base.state_inputs.clone(),
            base.actions.clone(),
            base.rewards.clone(),
            base.next_state_inputs.clone(),
            base.terminals.clone(),
            Some(vec![2.0; 4]),
        )
        .unwrap();
        let mut a1 = agent(&config, 41);
        let mut a2 = agent(&config, 41);
        let mut rng1 = Rng::seed_from(42);
        let mut rng2 = Rng::seed_from(42);
        let l1 = a1.train_critics(&base, &mut rng1).unwrap();
        let l2 = a2.train_critics(&weighted, &mut rng2).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12, "{l2} vs {}", 2.0 * l1);
    }

    #[test]
    fn degenerate_configs_and_batches_are_rejected() {
        let mut rng = Rng::seed_from(43);
        let range = Bounds::uniform(ACT, 1.0).unwrap();
        let bad = Td3Config {
            actor_delay: 0,
            ..Td3Config::default()
        };
        assert!(Td3Agent::new(IN, range.clone(), &bad, &mut rng).is_err());
        let bad = Td3Config {
            gamma: 1.5,
            ..Td3Config::default()
        };
        assert!(Td3Agent::new(IN, range.clone(), &bad, &mut rng).is_err());

        assert!(matches!(
            Batch::new(
                Matrix::zeros(0, IN),
                Matrix::zeros(0, ACT),
                vec![],
                Matrix::zeros(0, IN),
                vec![],
                None
            ),
            Err(Error::Precondition(_))
        ));
        assert!(Batch::new(
            Matrix::zeros(2, IN),
            Matrix::zeros(3, ACT),
            vec![0.0; 2],
            Matrix::zeros(2, IN),
            vec![false; 2],
            None
        )
        .is_err());

        // Dim mismatch against the agent is caught before any update.
        let mut a = agent(&small_config(), 44);
        let wrong = Batch::new(
            Matrix::zeros(2, IN + 1),
            Matrix::zeros(2, ACT),
            vec![0.0; 2],
            Matrix::zeros(2, IN + 1),
            vec![false; 2],
            None,
        )
        .unwrap();
        assert!(a.train_critics(&wrong, &mut rng).is_err());
    }
}
