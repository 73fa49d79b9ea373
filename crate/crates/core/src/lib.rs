//! Online detection of abrupt changes in conditional average treatment
//! effects (CATE) from streaming panels of covariates, treatments and outcomes.
//!
//! The detector compares kernel CATE estimates on two adjacent windows of `w`
//! periods and alarms when their sup-distance over the evaluation points
//! reaches a threshold calibrated to a target average run length.
//!
//! ```
//! use cate_cpd::{run_stream, DetectorConfig, Observation, PropensityModel, TimeBatch};
//!
//! // Effect 0 up to t = 20, then 1; one treated and one control unit per period.
//! let stream: Vec<TimeBatch> = (1..=40)
//!     .map(|t| {
//!         let tau = if t > 20 { 1.0 } else { 0.0 };
//!         TimeBatch::new(t, vec![
//!             Observation::new(t, 1, tau, vec![0.5], 1),
//!             Observation::new(t, 2, 0.0, vec![0.5], 0),
//!         ])
//!     })
//!     .collect();
//! let config = DetectorConfig::new(6, 1.0, 0.5, PropensityModel::constant(0.5));
//! assert_eq!(run_stream(&stream, &config).unwrap().alarm_time(), Some(23));
//! ```

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod detector;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod model;
pub mod monitor;
pub mod propensity;
pub mod simulate;

pub use calibrate::{
    calibrate_epsilon, estimate_arl, ArlEstimate, CalibrationResult, CalibrationSpec, EpsilonSearch,
};
pub use detector::{
    run_stream, statistic_path, Alert, Detector, DetectorConfig, Estimator, EvalPolicy,
};
pub use harness::{onek_twok_curves, run_experiment, ExperimentConfig, ExperimentSummary};
pub use kernels::{dk_cate, nw_cate, EstimateWindow, KernelSpec};
pub use model::{Observation, TimeBatch};
pub use propensity::{fit_constant, fit_logistic, PropensityModel};
pub use simulate::{generate, Scenario, ScenarioSpec};
