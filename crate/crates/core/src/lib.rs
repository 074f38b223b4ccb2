//! Straight constant-speed transformations of linear-process flows, ODE
//! solvers that step in the transformed frame, a small MLP trainer and a 2D
//! toy experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod gmm;
pub mod nn;
pub mod schedules;
pub mod solvers;
pub mod transforms;
pub mod velocity;

pub use error::{Error, Result};
pub use gmm::{GaussianMixture, GmmOracle};
pub use nn::{train, Mlp, MlpParams, TrainConfig};
pub use schedules::{clip_denominator, PhiForm, Schedule, ScheduleValues};
pub use solvers::{run, run_with, Integration, SolverConfig, SolverMethod, TimeGrid, WarmUp};
pub use transforms::{TransformKind, TransformedField};
pub use velocity::{FieldKind, VelocitySource};
