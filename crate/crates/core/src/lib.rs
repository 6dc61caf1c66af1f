//! State-constrained stochastic optimal control via deep FBSDE rollouts.
//!
//! The library trains a recurrent value-gradient network by unrolling the
//! coupled forward-backward SDE of a controlled diffusion, enforcing state
//! constraints through an adaptively steepened soft penalty, and saturating
//! controls through an odd sigmoid. See the crate-level binary (`fbsde`)
//! for the experiment front end.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod dynamics;
pub mod matrix;
pub mod net;
pub mod rollout;
pub mod scheduler;
pub mod streams;
pub mod tape;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{Experiment, ExperimentConfig};
pub use cost::{ConstraintMap, CostSpec, PenaltySpec, SaturationSpec};
pub use dynamics::{CartPole, CartPoleParams, Dynamics};
pub use matrix::Mat;
pub use net::{NetConfig, NetParams};
pub use rollout::{EvalData, EvalSummary, FbsdeProblem, RolloutConfig, RolloutResult};
pub use scheduler::{SchedulerConfig, SchedulerState};
pub use tape::{grad_check, Tape, Tensor};
pub use trainer::{TrainConfig, TrainOutcome, TrainSession};
