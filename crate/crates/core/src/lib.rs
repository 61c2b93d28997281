//! Retraining dynamics under performative linear distribution shifts.
//!
//! The crate simulates repeated (empirical, optionally regularized) risk
//! minimization when the data law reacts to the deployed model, and pairs every
//! simulation with closed-form ground truth so the dynamics can be checked
//! numerically:
//!
//! - [`shift_model`]: the distribution map and reproducible sampling
//! - [`loss`]: quadratic losses and their exact minimizers
//! - [`oracle`]: stable point, optimal point, performative risk, gap, `lambda*`
//! - [`dynamics`]: the four retraining procedures and their trajectories
//! - [`experiments`]: replicated Monte Carlo checks with pass/fail verdicts

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod loss;
pub mod oracle;
pub mod shift_model;
pub mod stats;
pub mod stream;

pub use error::{Error, Result};
pub use loss::{QuadraticLoss, Regularizer};
pub use shift_model::{BaseNoise, LinearShiftModel, ScalarShiftModel};
pub use stream::RngStream;

pub use nalgebra::{DMatrix, DVector};
