//! Off-policy goal relabeling for the higher level.
//!
//! A stored segment pairs a goal with the action sequence the lower level
//! actually took. As the lower level trains, that pairing goes stale. The
//! maximum-likelihood correction replaces the stored goal with the candidate
//! goal under which the current lower-level actor is most likely to have
//! produced the stored actions. The importance-based and model-based
//! variants are alternative strategies selectable per run.
//!
//! Scoring rolls each candidate through the goal transition against the
//! stored states, so every intermediate goal satisfies the same conservation
//! identity as goals rolled during collection.

use crate::error::{Error, Result};
use crate::goal::{Goal, GoalSpace};
use crate::nn::MlpParams;
use crate::par;
use crate::replay::HighSegment;
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Which relabeling rule to apply to sampled segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionKind {
    /// Keep stored goals untouched.
    None,
    /// Argmax of the stored actions' log-likelihood over candidate goals.
    MaxLikelihood,
    /// Keep the goal, weight the sample by the action-density ratio.
    DirectImportance,
    /// Pick the candidate whose density ratio is closest to one.
    ImportanceRelabel,
    /// Sample the goal from a Gaussian around the realized state delta.
    ModelBased,
    /// Same sampling rule with the narrower sigma used by the
    /// feudal-style transition ablation.
    TransitionPg,
}

impl CorrectionKind {
    pub const ALL: [CorrectionKind; 6] = [
        CorrectionKind::None,
        CorrectionKind::MaxLikelihood,
        CorrectionKind::DirectImportance,
        CorrectionKind::ImportanceRelabel,
        CorrectionKind::ModelBased,
        CorrectionKind::TransitionPg,
    ];

    pub fn from_name(name: &str) -> Option<CorrectionKind> {
        CorrectionKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
    }

    /// Matches the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            CorrectionKind::None => "none",
            CorrectionKind::MaxLikelihood => "max_likelihood",
            CorrectionKind::DirectImportance => "direct_importance",
            CorrectionKind::ImportanceRelabel => "importance_relabel",
            CorrectionKind::ModelBased => "model_based",
            CorrectionKind::TransitionPg => "transition_pg",
        }
    }

    pub fn needs_behavior_densities(self) -> bool {
        matches!(
            self,
            CorrectionKind::DirectImportance | CorrectionKind::ImportanceRelabel
        )
    }
}

/// Relabeling rule plus the constants it draws candidates with.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionStrategy {
    pub kind: CorrectionKind,
    /// Total candidates including the original goal and the state delta.
    pub candidate_count: usize,
    /// Per-dim sigma for Gaussian candidates around the state delta.
    pub candidate_sigma: Vec<f64>,
    /// Per-dim sigma for the model-based sampling rule.
    pub model_sigma: Vec<f64>,
    /// Exploration sigma the orchestrator stamps onto collected segments.
    pub behavior_sigma: f64,
    /// Importance weights are clamped into this interval.
    pub weight_clamp: (f64, f64),
}

impl CorrectionStrategy {
    /// Strategy with the standard constants for `space`: 10 candidates,
    /// candidate sigma at half the goal half-range, model sigma at a tenth.
    pub fn for_space(kind: CorrectionKind, space: &GoalSpace, behavior_sigma: f64) -> Self {
        CorrectionStrategy {
            kind,
            candidate_count: 10,
            candidate_sigma: space.range().scaled(0.5),
            model_sigma: space.range().scaled(0.1),
            behavior_sigma,
            weight_clamp: (1e-3, 1e3),
        }
    }

    fn validate(&self, space: &GoalSpace) -> Result<()> {
        if self.candidate_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "candidate_count {} < 2; the original goal and the state delta are mandatory",
                self.candidate_count
            )));
        }
        if self.candidate_sigma.len() != space.dim() || self.model_sigma.len() != space.dim() {
            return Err(Error::Shape(format!(
                "sigma dims {}/{} vs goal dim {}",
                self.candidate_sigma.len(),
                self.model_sigma.len(),
                space.dim()
            )));
        }
        if self
            .candidate_sigma
            .iter()
            .chain(&self.model_sigma)
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(Error::InvalidArgument(
                "candidate/model sigma must be finite and >= 0".into(),
            ));
        }
        let (lo, hi) = self.weight_clamp;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!(
                "weight clamp [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }
}

/// One relabeled higher-level transition, ready for TD learning.
#[derive(Debug, Clone, PartialEq)]
pub struct RelabeledBatchEntry {
    pub state: Vec<f64>,
    pub relabeled_goal: Goal,
    /// Reward-scale times the segment's raw environment reward sum.
    pub scaled_reward: f64,
    pub final_state: Vec<f64>,
    pub terminal: bool,
    /// 1 for every strategy except the direct importance estimator.
    pub importance_weight: f64,
    /// True when the relabeled goal differs from the stored one.
    pub goal_changed: bool,
}

fn check_segment(segment: &HighSegment, space: &GoalSpace) -> Result<()> {
    if segment.is_empty() {
        return Err(Error::Precondition("segment has no steps".into()));
    }
    if segment.actions.len() != segment.states.len() {
        return Err(Error::Shape(format!(
            "{} actions vs {} states in segment",
            segment.actions.len(),
            segment.states.len()
        )));
    }
    if segment.goal.dim() != space.dim() {
        return Err(Error::Shape(format!(
            "segment goal dim {} vs goal space dim {}",
            segment.goal.dim(),
            space.dim()
        )));
    }
    Ok(())
}

fn check_actor(actor: &MlpParams, segment: &HighSegment, space: &GoalSpace) -> Result<()> {
    let state_dim = segment.states[0].len();
    if actor.input_dim() != state_dim + space.dim() {
        return Err(Error::Shape(format!(
            "actor takes {} inputs, segment provides state {} + goal {}",
            actor.input_dim(),
            state_dim,
            space.dim()
        )));
    }
    let action_dim = segment.actions[0].len();
    if actor.output_dim() != action_dim {
        return Err(Error::Shape(format!(
            "actor emits {} dims, stored actions have {}",
            actor.output_dim(),
            action_dim
        )));
    }
    Ok(())
}

fn check_behavior_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "behavior sigma {sigma} must be finite and > 0"
        )));
    }
    Ok(())
}

/// Re-expresses `initial` at every stored step of the segment via the goal
/// transition. Output pairs with `segment.actions` index for index.
pub fn roll_goals(segment: &HighSegment, space: &GoalSpace, initial: &Goal) -> Result<Vec<Goal>> {
    check_segment(segment, space)?;
    let mut goals = Vec::with_capacity(segment.len());
    goals.push(initial.clone());
    for i in 1..segment.len() {
        let next =
            space.goal_transition(&segment.states[i - 1], &goals[i - 1], &segment.states[i])?;
        goals.push(next);
    }
    Ok(goals)
}

/// Goal-space displacement realized by the segment, before clipping.
fn state_delta(segment: &HighSegment, space: &GoalSpace) -> Result<Vec<f64>> {
    let start = space.project(&segment.states[0])?;
    let end = space.project(&segment.final_state)?;
    Ok(end.iter().zip(&start).map(|(e, s)| e - s).collect())
}

/// Candidate goals for relabeling: the stored goal, the clipped state delta,
/// and `candidate_count - 2` Gaussian draws centered on the raw delta, all
/// clipped to the goal range. Draws consume the rng candidate by candidate,
/// dimension by dimension.
pub fn candidate_goals(
    segment: &HighSegment,
    space: &GoalSpace,
    strategy: &CorrectionStrategy,
    rng: &mut Rng,
) -> Result<Vec<Goal>> {
    check_segment(segment, space)?;
    strategy.validate(space)?;
    let delta = state_delta(segment, space)?;
    let mut candidates = Vec::with_capacity(strategy.candidate_count);
    candidates.push(space.clip_goal(&segment.goal)?);
    candidates.push(Goal::new(space.range().clipped(&delta)));
    for _ in 2..strategy.candidate_count {
        let draw: Vec<f64> = delta
            .iter()
            .zip(&strategy.candidate_sigma)
            .map(|(mean, sigma)| rng.normal(*mean, *sigma))
            .collect();
        candidates.push(Goal::new(space.range().clipped(&draw)));
    }
    Ok(candidates)
}

/// Squared distance between a stored action and the actor's output,
/// accumulated over dimensions in ascending order.
fn residual_sq(action: &[f64], mu: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (a, m) in action.iter().zip(mu) {
        let diff = a - m;
        sum += diff * diff;
    }
    sum
}

fn score_from_residual_sum(residual_sum: f64, sigma: f64) -> f64 {
    -(residual_sum / (2.0 * sigma * sigma))
}

fn log_density_from_residual(residual: f64, sigma: f64, action_dim: usize) -> f64 {
    let norm = -(action_dim as f64 / 2.0) * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    norm - residual / (2.0 * sigma * sigma)
}

/// Log-likelihood (up to a candidate-independent constant) of the segment's
/// stored actions under the actor, were it pursuing `candidate`:
/// -(1 / 2 sigma^2) * sum_i ||a_i - actor(s_i, g_i)||^2 with goals rolled
/// from `candidate` along the stored states. Zero residual gives the maximum,
/// zero.
pub fn action_log_likelihood(
    actor: &MlpParams,
    segment: &HighSegment,
    candidate: &Goal,
    space: &GoalSpace,
    behavior_sigma: f64,
) -> Result<f64> {
    check_segment(segment, space)?;
    check_actor(actor, segment, space)?;
    check_behavior_sigma(behavior_sigma)?;
    let goals = roll_goals(segment, space, candidate)?;
    let mut residual_sum = 0.0;
    for (i, goal) in goals.iter().enumerate() {
        let mut input = segment.states[i].clone();
        input.extend_from_slice(&goal.delta);
        let mu = actor.forward(&input)?;
        residual_sum += residual_sq(&segment.actions[i], &mu);
    }
    Ok(score_from_residual_sum(residual_sum, behavior_sigma))
}

/// Per-step squared residuals for every candidate, computed in one batched
/// actor pass over `candidates.len() * segment.len()` rows. Row order is
/// candidate-major, step-minor, so entry (k, i) matches candidate k at step i.
fn candidate_step_residuals(
    actor: &MlpParams,
    segment: &HighSegment,
    space: &GoalSpace,
    candidates: &[Goal],
) -> Result<Matrix> {
    check_actor(actor, segment, space)?;
    let len = segment.len();
    let mut inputs = Matrix::zeros(candidates.len() * len, actor.input_dim());
    for (k, candidate) in candidates.iter().enumerate() {
        let goals = roll_goals(segment, space, candidate)?;
        for (i, goal) in goals.iter().enumerate() {
            let row = inputs.row_mut(k * len + i);
            row[..segment.states[i].len()].copy_from_slice(&segment.states[i]);
            row[segment.states[i].len()..].copy_from_slice(&goal.delta);
        }
    }
    let mus = actor.forward_batch(&inputs)?;
    let mut residuals = Matrix::zeros(candidates.len(), len);
    for k in 0..candidates.len() {
        for i in 0..len {
            residuals.set(k, i, residual_sq(&segment.actions[i], mus.row(k * len + i)));
        }
    }
    Ok(residuals)
}

/// [`action_log_likelihood`] for every candidate at once through a single
/// batched actor pass. Bit-identical to calling the scalar form per
/// candidate.
pub fn candidate_scores(
    actor: &MlpParams,
    segment: &HighSegment,
    space: &GoalSpace,
    candidates: &[Goal],
    behavior_sigma: f64,
) -> Result<Vec<f64>> {
    check_segment(segment, space)?;
    check_behavior_sigma(behavior_sigma)?;
    let residuals = candidate_step_residuals(actor, segment, space, candidates)?;
    let scores = (0..candidates.len())
        .map(|k| {
            let mut sum = 0.0;
            for i in 0..segment.len() {
                sum += residuals.get(k, i);
            }
            score_from_residual_sum(sum, behavior_sigma)
        })
        .collect();
    Ok(scores)
}

/// Per-step log densities of the stored actions under isotropic Gaussians
/// centered on the actor's outputs, with goals rolled from `initial`.
/// The orchestrator stamps these (with the collection-time actor) onto
/// segments destined for the importance-based corrections.
pub fn step_log_densities(
    actor: &MlpParams,
    segment: &HighSegment,
    space: &GoalSpace,
    initial: &Goal,
    sigma: f64,
) -> Result<Vec<f64>> {
    check_segment(segment, space)?;
    check_actor(actor, segment, space)?;
    check_behavior_sigma(sigma)?;
    let action_dim = segment.actions[0].len();
    let goals = roll_goals(segment, space, initial)?;
    let mut densities = Vec::with_capacity(segment.len());
    for (i, goal) in goals.iter().enumerate() {
        let mut input = segment.states[i].clone();
        input.extend_from_slice(&goal.delta);
        let mu = actor.forward(&input)?;
        let residual = residual_sq(&segment.actions[i], &mu);
        densities.push(log_density_from_residual(residual, sigma, action_dim));
    }
    Ok(densities)
}

fn make_entry(
    segment: &HighSegment,
    goal: Goal,
    reward_scale: f64,
    weight: f64,
) -> RelabeledBatchEntry {
    let goal_changed = goal.delta != segment.goal.delta;
    RelabeledBatchEntry {
        state: segment.states[0].clone(),
        relabeled_goal: goal,
        scaled_reward: reward_scale * segment.env_reward_sum,
        final_state: segment.final_state.clone(),
        terminal: segment.terminal,
        importance_weight: weight,
        goal_changed,
    }
}

/// Maximum-likelihood relabeling: evaluates every candidate's score and keeps
/// the argmax, ties resolved toward the lowest candidate index (the original
/// goal first).
pub fn relabel_max_likelihood(
    actor: &MlpParams,
    segment: &HighSegment,
    space: &GoalSpace,
    strategy: &CorrectionStrategy,
    reward_scale: f64,
    rng: &mut Rng,
) -> Result<RelabeledBatchEntry> {
    check_behavior_sigma(segment.behavior_sigma)?;
    let candidates = candidate_goals(segment, space, strategy, rng)?;
    let scores = candidate_scores(actor, segment, space, &candidates, segment.behavior_sigma)?;
    let mut best = 0;
    for (k, score) in scores.iter().enumerate() {
        if !score.is_finite() {
            return Err(Error::Numeric(format!("candidate {k} scored {score}")));
        }
        if *score > scores[best] {
            best = k;
        }
    }
    Ok(make_entry(
        segment,
        candidates[best].clone(),
        reward_scale,
        1.0,
    ))
}

/// Keeps the stored goal and attaches the clamped product of per-step action
/// density ratios between the current actor and the collection-time actor.
pub fn relabel_direct_importance(
    actor: &MlpParams,
    segment: &HighSegment,
    space: &GoalSpace,
    weight_clamp: (f64, f64),
    reward_scale: f64,
) -> Result<RelabeledBatchEntry> {
    let stored = segment
        .behavior_log_densities
        .as_ref()
        .ok_or_else(|| Error::Precondition("segment lacks stored behavior log densities".into()))?;
    if stored.len() != segment.len() {
        return Err(Error::Precondition(format!(
            "{} stored densities vs {} steps",
            stored.len(),
            segment.len()
        )));
    }
    let current = step_log_densities(actor, segment, space, &segment.goal, segment.behavior_sigma)?;
    let log_ratio: f64 = current.iter().zip(stored).map(|(cur, old)| cur - old).sum();
    let weight = log_ratio.exp().clamp(weight_clamp.0, weight_clamp.1);
    if !weight.is_finite() {
        return Err(Error::Numeric(format!("importance weight {weight}")));
    }
    Ok(make_entry(
        segment,
        segment.goal.clone(),
        reward_scale,
        weight,
    ))
}

/// Importance-based action relabeling: over the same candidate set as the
/// maximum-likelihood rule, minimizes the squared total log density ratio
/// between the current actor and the stored behavior densities. Zero drift
/// makes the original goal an exact minimizer at objective zero.
pub fn relabel_importance_relabel(
    actor: &MlpParams,
    segment: &HighSegment,
    space: &GoalSpace,
    strategy: &CorrectionStrategy,
    reward_scale: f64,
    rng: &mut Rng,
) -> Result<RelabeledBatchEntry> {
    let stored = segment
        .behavior_log_densities
        .as_ref()
        .ok_or_else(|| Error::Precondition("segment lacks stored behavior log densities".into()))?;
    if stored.len() != segment.len() {
        return Err(Error::Precondition(format!(
            "{} stored densities vs {} steps",
            stored.len(),
            segment.len()
        )));
    }
    check_behavior_sigma(segment.behavior_sigma)?;
    let candidates = candidate_goals(segment, space, strategy, rng)?;
    let residuals = candidate_step_residuals(actor, segment, space, &candidates)?;
    let action_dim = segment.actions[0].len();
    let mut best = 0;
    let mut best_objective = f64::INFINITY;
    for k in 0..candidates.len() {
        let mut log_ratio = 0.0;
        for (i, old) in stored.iter().enumerate() {
            let cur =
                log_density_from_residual(residuals.get(k, i), segment.behavior_sigma, action_dim);
            log_ratio += cur - old;
        }
        let objective = log_ratio * log_ratio;
        if !objective.is_finite() {
            return Err(Error::Numeric(format!(
                "candidate {k} objective {objective}"
            )));
        }
        if objective < best_objective {
            best = k;
            best_objective = objective;
        }
    }
    Ok(make_entry(
        segment,
        candidates[best].clone(),
        reward_scale,
        1.0,
    ))
}

/// Samples the relabeled goal from a per-dim Gaussian centered on the
/// realized state delta, then clips. Sigma zero returns the delta exactly.
pub fn relabel_model_based(
    segment: &HighSegment,
    space: &GoalSpace,
    model_sigma: &[f64],
    reward_scale: f64,
    rng: &mut Rng,
) -> Result<RelabeledBatchEntry> {
    check_segment(segment, space)?;
    if model_sigma.len() != space.dim() {
        return Err(Error::Shape(format!(
            "model sigma dim {} vs goal dim {}",
            model_sigma.len(),
            space.dim()
        )));
    }
    let delta = state_delta(segment, space)?;
    let draw: Vec<f64> = delta
        .iter()
        .zip(model_sigma)
        .map(|(mean, sigma)| rng.normal(*mean, *sigma))
        .collect();
    let goal = Goal::new(space.range().clipped(&draw));
    Ok(make_entry(segment, goal, reward_scale, 1.0))
}

/// Applies the strategy's relabeling rule to one segment.
pub fn relabel_segment(
    actor: &MlpParams,
    segment: &HighSegment,
    space: &GoalSpace,
    strategy: &CorrectionStrategy,
    reward_scale: f64,
    rng: &mut Rng,
) -> Result<RelabeledBatchEntry> {
    check_segment(segment, space)?;
    strategy.validate(space)?;
    match strategy.kind {
        CorrectionKind::None => Ok(make_entry(segment, segment.goal.clone(), reward_scale, 1.0)),
        CorrectionKind::MaxLikelihood => {
            relabel_max_likelihood(actor, segment, space, strategy, reward_scale, rng)
        }
        CorrectionKind::DirectImportance => {
            relabel_direct_importance(actor, segment, space, strategy.weight_clamp, reward_scale)
        }
        CorrectionKind::ImportanceRelabel => {
            relabel_importance_relabel(actor, segment, space, strategy, reward_scale, rng)
        }
        CorrectionKind::ModelBased | CorrectionKind::TransitionPg => {
            relabel_model_based(segment, space, &strategy.model_sigma, reward_scale, rng)
        }
    }
}

/// Relabels a sampled minibatch. One seed is pre-drawn per segment so the
/// per-entry work can run in parallel while reproducing the sequential
/// result bit for bit; seeds are consumed even by strategies that ignore
/// them, keeping downstream draws aligned across strategies.
pub fn relabel_batch(
    actor: &MlpParams,
    segments: &[&HighSegment],
    space: &GoalSpace,
    strategy: &CorrectionStrategy,
    reward_scale: f64,
    rng: &mut Rng,
) -> Result<Vec<RelabeledBatchEntry>> {
    let seeds: Vec<u64> = (0..segments.len()).map(|_| rng.next_u64()).collect();
    let results = par::map_slice(segments, |i, segment| {
        let mut entry_rng = Rng::seed_from(seeds[i]);
        relabel_segment(
            actor,
            segment,
            space,
            strategy,
            reward_scale,
            &mut entry_rng,
        )
    });
    results.into_iter().collect()
}

/// Fraction of entries whose goal was actually replaced.
pub fn relabeled_fraction(entries: &[RelabeledBatchEntry]) -> f64 {
    if entries.is_empty() {
        return 0.0;
    }
    entries.iter().filter(|e| e.goal_changed).count() as f64 / entries.len() as f64
}
