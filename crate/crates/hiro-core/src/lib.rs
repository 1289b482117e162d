//! Two-level goal-conditioned reinforcement learning on kinematic
//! navigation tasks (HIRO with off-policy goal relabeling).
//!
//! A higher-level policy emits a goal every `c` steps: a desired change in
//! the agent's positional observation. A lower-level policy, conditioned on
//! that goal, is rewarded for realizing it. Both levels train off-policy with
//! TD3; higher-level experience is relabeled at sampling time so that stale
//! goals remain consistent with the current lower-level behavior.

mod codec;
pub mod correction;
pub mod envs;
pub mod error;
pub mod goal;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod par;
pub mod replay;
pub mod rng;
pub mod td3;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{soft_update, AdamState, Gradients, MlpParams, OutputTransform};
pub use rng::{Rng, SeedStream};
pub use tensor::{Bounds, Matrix};
