//! Post-training correction of time-series forecasts.
//!
//! Given a base forecaster's predictions and held-out ground truth, the
//! engine searches a catalog of parameterized transformations (plus a
//! closed-form affine correction) for the plan that minimizes validation
//! error, guarded by a consistency check on the training split.
//!
//! The crate is organized by concern:
//!
//! - [`metrics`]: forecast batches, MSE and relative improvement reports.
//! - [`actions`]: the transformation catalog and correction plans.
//! - [`affine`]: closed-form affine calibration and its risk accounting.
//! - [`optimize`]: the search loop and its four strategies.
//! - [`data`]: CSV ingestion, splits, windows, prediction files and baselines.
//! - [`feedback`]: turning human feedback into restricted search spaces.
//! - [`synthetic`]: seeded fixtures used by tests, demos and benchmarks.

pub mod actions;
pub mod affine;
pub mod data;
pub mod error;
pub mod feedback;
pub mod metrics;
pub mod optimize;
pub mod seed;
pub mod synthetic;

pub use actions::{apply_plan, ActionInstance, ActionKind, CorrectionPlan, ParamRange};
pub use affine::{AffineFit, AffineScope, AffineTail};
pub use error::{Error, Result};
pub use metrics::{mse, per_channel_report, relative_improvement, EvalReport, ForecastBatch, SplitSpec};
pub use optimize::{Objective, OptimizerConfig, SearchSpace, SearchTrace, Strategy};
