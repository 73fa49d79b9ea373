//! Monitoring an external stream whose propensity model may be unknown.
//!
//! When no propensity model is supplied, one is fitted on a burn-in prefix
//! (default `2w` periods) that is then excluded from monitoring, so that the
//! fitted model is independent of the monitored data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Alert, Detector, DetectorConfig, DetectorError, Estimator, EvalPolicy};
use crate::io::IoError;
use crate::kernels::KernelSpec;
use crate::model::TimeBatch;
use crate::propensity::{FitMethod, PropensityError, PropensityModel};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error(transparent)]
    Io(#[from] IoError),

    #[error(transparent)]
    Detector(#[from] DetectorError),

    #[error(transparent)]
    Propensity(#[from] PropensityError),

    #[error("stream ended during the {0}-period burn-in")]
    BurnInIncomplete(usize),
}

/// A detector configuration whose propensity model is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorSpec {
    pub w: usize,
    pub h: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub propensity: Option<PropensityModel>,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default)]
    pub eval_policy: EvalPolicy,
    /// Burn-in periods used to fit a missing propensity model.
    #[serde(default)]
    pub burn_in: Option<usize>,
    #[serde(default = "default_fit")]
    pub fit: FitMethod,
}

fn default_estimator() -> Estimator {
    Estimator::OneK
}

fn default_fit() -> FitMethod {
    FitMethod::Logistic
}

impl From<DetectorConfig> for MonitorSpec {
    fn from(c: DetectorConfig) -> Self {
        Self {
            w: c.w,
            h: c.h,
            epsilon: c.epsilon,
            kernel: c.kernel,
            propensity: Some(c.propensity),
            estimator: c.estimator,
            eval_policy: c.eval_policy,
            burn_in: None,
            fit: default_fit(),
        }
    }
}

impl MonitorSpec {
    pub fn burn_in_periods(&self) -> usize {
        if self.propensity.is_some() {
            0
        } else {
            self.burn_in.unwrap_or(2 * self.w)
        }
    }

    fn config(&self, propensity: PropensityModel) -> DetectorConfig {
        DetectorConfig {
            w: self.w,
            h: self.h,
            epsilon: self.epsilon,
            kernel: self.kernel,
            propensity,
            estimator: self.estimator,
            eval_policy: self.eval_policy.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonitorReport {
    pub alert: Option<Alert>,
    pub propensity: PropensityModel,
    /// Periods consumed by the propensity burn-in.
    pub burn_in: usize,
    /// Periods pushed to the detector.
    pub monitored: usize,
}

/// Consumes `batches` until the first alarm or the end of the stream.
pub fn monitor<I>(batches: I, spec: &MonitorSpec) -> Result<MonitorReport, MonitorError>
where
    I: IntoIterator<Item = Result<TimeBatch, IoError>>,
{
    let mut batches = batches.into_iter();
    let burn_in = spec.burn_in_periods();
    let propensity = match &spec.propensity {
        Some(m) => m.clone(),
        None => {
            let prefix = batches
                .by_ref()
                .take(burn_in)
                .collect::<Result<Vec<_>, _>>()?;
            if prefix.len() < burn_in {
                return Err(MonitorError::BurnInIncomplete(burn_in));
            }
            spec.fit.fit(&prefix)?
        }
    };
    let mut detector = Detector::new(spec.config(propensity.clone()))?;
    let mut monitored = 0;
    for batch in batches {
        let batch = batch?;
        monitored += 1;
        if let Some(alert) = detector.push(&batch)? {
            return Ok(MonitorReport {
                alert: Some(alert),
                propensity,
                burn_in,
                monitored,
            });
        }
    }
    Ok(MonitorReport {
        alert: None,
        propensity,
        burn_in,
        monitored,
    })
}
