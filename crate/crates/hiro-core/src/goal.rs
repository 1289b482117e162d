//! Goal algebra for the two-level hierarchy.
//!
//! A goal is a desired *relative* change of the agent's positional
//! observation: the higher level asks the lower level to move the projected
//! state by `delta`. As the agent moves, the goal is re-expressed relative to
//! the new state ([`GoalSpace::goal_transition`]) so the absolute target point
//! `project(s_t) + g_t` stays fixed until the next goal is emitted.

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Bounds};

/// Relative goal in projection coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Goal {
    pub delta: Vec<f64>,
}

impl Goal {
    pub fn new(delta: Vec<f64>) -> Self {
        Goal { delta }
    }

    pub fn dim(&self) -> usize {
        self.delta.len()
    }
}

/// Which observation dimensions goals live in, and their symmetric range.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalSpace {
    dims: Vec<usize>,
    range: Bounds,
}

impl GoalSpace {
    pub fn new(dims: Vec<usize>, range: Bounds) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("goal space: no dimensions".into()));
        }
        if range.dim() != dims.len() {
            return Err(Error::Shape(format!(
                "goal range dim {} vs {} projection dims",
                range.dim(),
                dims.len()
            )));
        }
        let mut seen = dims.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "goal space: duplicate dims {dims:?}"
            )));
        }
        Ok(GoalSpace { dims, range })
    }

    /// Positional (x, y) goals with the given half range.
    pub fn planar(half_range: f64) -> Self {
        GoalSpace::new(vec![0, 1], Bounds::uniform(2, half_range).unwrap()).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn range(&self) -> &Bounds {
        &self.range
    }

    /// Extracts the goal-space view of a full observation.
    pub fn project(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dims.len());
        for &d in &self.dims {
            match state.get(d) {
                Some(v) => out.push(*v),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "project: dim {d} out of range for state of len {}",
                        state.len()
                    )))
                }
            }
        }
        Ok(out)
    }

    fn check_goal(&self, goal: &Goal) -> Result<()> {
        if goal.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "goal dim {} vs space dim {}",
                goal.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Re-expresses `goal` (set at `state`) relative to `next_state`:
    /// h = project(s) + g - project(s'), keeping the absolute goal point fixed.
    pub fn goal_transition(&self, state: &[f64], goal: &Goal, next_state: &[f64]) -> Result<Goal> {
        self.check_goal(goal)?;
        let p = self.project(state)?;
        let pn = self.project(next_state)?;
        let delta = p
            .iter()
            .zip(&goal.delta)
            .zip(&pn)
            .map(|((a, g), b)| a + g - b)
            .collect();
        Ok(Goal::new(delta))
    }

    /// Negative distance between where the goal asked the agent to be and
    /// where it ended up: -|project(s) + g - project(s')|. Zero iff attained.
    pub fn intrinsic_reward(&self, state: &[f64], goal: &Goal, next_state: &[f64]) -> Result<f64> {
        let residual = self.goal_transition(state, goal, next_state)?;
        Ok(-l2_norm(&residual.delta))
    }

    /// Cosine between the realized projected displacement and the goal
    /// direction. Zero when either vector has zero norm.
    pub fn cosine_reward(&self, state: &[f64], goal: &Goal, next_state: &[f64]) -> Result<f64> {
        self.check_goal(goal)?;
        let p = self.project(state)?;
        let pn = self.project(next_state)?;
        let moved: Vec<f64> = pn.iter().zip(&p).map(|(b, a)| b - a).collect();
        let nm = l2_norm(&moved);
        let ng = l2_norm(&goal.delta);
        if nm == 0.0 || ng == 0.0 {
            return Ok(0.0);
        }
        let dot: f64 = moved.iter().zip(&goal.delta).map(|(a, b)| a * b).sum();
        Ok(dot / (nm * ng))
    }

    /// Goal clipped into the space's range.
    pub fn clip_goal(&self, goal: &Goal) -> Result<Goal> {
        self.check_goal(goal)?;
        Ok(Goal::new(self.range.clipped(&goal.delta)))
    }
}
