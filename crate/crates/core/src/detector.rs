//! Online CATE change-point detector.
//!
//! The detector keeps the most recent `2w` periods. Once the buffer is full it
//! estimates the CATE separately on the older half `(t-2w, t-w]` and the newer
//! half `(t-w, t]`, takes the largest absolute difference over a set of
//! evaluation points, and raises an alarm when that difference reaches the
//! threshold `epsilon`. After an alarm the detector is frozen.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{transformed_outcome, weighted_mean, Kernel, KernelError, KernelSpec};
use crate::model::{StreamError, TimeBatch};
use crate::propensity::PropensityModel;

/// Below this many kernel evaluations per statistic the scan stays sequential.
const PARALLEL_WORK_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("non-contiguous time index: expected t={expected}, found t={found}")]
    NonContiguousTime { expected: u64, found: u64 },

    #[error("detector already alarmed; restart it to continue monitoring")]
    AlreadyAlarmed,

    #[error("buffer holds {have} of the {need} periods needed for a statistic")]
    BufferNotFull { have: usize, need: usize },

    #[error("every evaluation point lacked kernel mass in at least one half-window")]
    AllPointsSkipped,

    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Stream(#[from] StreamError),

    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    /// Single regression of the inverse-propensity transformed outcome.
    #[serde(rename = "one-k")]
    OneK,
    /// Difference of treated and control regressions.
    #[serde(rename = "dk")]
    Dk,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::OneK => "one-k",
            Estimator::Dk => "dk",
        })
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "one-k" | "onek" => Ok(Estimator::OneK),
            "dk" | "two-k" | "twok" => Ok(Estimator::Dk),
            other => Err(format!("unknown estimator `{other}`")),
        }
    }
}

/// Where the two half-window estimates are compared.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "points")]
pub enum EvalPolicy {
    /// Every covariate vector currently buffered, scanned time-major.
    #[default]
    CurrentWindow,
    /// A fixed set of points supplied up front.
    FixedGrid(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub w: usize,
    pub h: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub kernel: KernelSpec,
    pub propensity: PropensityModel,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default)]
    pub eval_policy: EvalPolicy,
}

fn default_estimator() -> Estimator {
    Estimator::OneK
}

impl DetectorConfig {
    /// Gaussian kernel, One-K estimator, current-window evaluation.
    pub fn new(w: usize, h: f64, epsilon: f64, propensity: PropensityModel) -> Self {
        Self {
            w,
            h,
            epsilon,
            kernel: KernelSpec::gaussian(),
            propensity,
            estimator: Estimator::OneK,
            eval_policy: EvalPolicy::CurrentWindow,
        }
    }

    pub fn with_kernel(mut self, kernel: KernelSpec) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_estimator(mut self, estimator: Estimator) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn with_eval_policy(mut self, policy: EvalPolicy) -> Self {
        self.eval_policy = policy;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_string()));
        if self.w == 0 {
            return bad("w must be at least 1");
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return bad("h must be positive and finite");
        }
        // epsilon = 0 and +inf are accepted: they are useful calibration limits.
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be non-negative");
        }
        if self.kernel.is_compact() && !(self.kernel.support > 0.0) {
            return bad("kernel support must be positive");
        }
        if let EvalPolicy::FixedGrid(points) = &self.eval_policy {
            if points.is_empty() {
                return bad("fixed grid must contain at least one point");
            }
            if points.iter().any(|p| p.len() != points[0].len()) {
                return bad("fixed grid points must share a dimension");
            }
        }
        Ok(())
    }
}

/// Alarm raised when the statistic reaches the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    /// Period at which the alarm fired.
    pub delta_hat: u64,
    pub statistic: f64,
    pub argmax_x: Vec<f64>,
    /// Half-open range `(t - 2w, t]` of the buffered periods.
    pub window: (u64, u64),
}

impl Alert {
    pub fn to_ndjson(&self) -> String {
        serde_json::to_string(self).expect("alert serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatisticReport {
    pub value: f64,
    pub argmax_point: Vec<f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

/// A buffered period with its covariates flattened and transformed outcomes
/// precomputed under the detector's propensity model.
#[derive(Debug, Clone)]
struct PreparedBatch {
    t: u64,
    x: Vec<f64>,
    y: Vec<f64>,
    treated: Vec<bool>,
    yhat: Vec<f64>,
}

impl PreparedBatch {
    fn points(&self, d: usize) -> impl Iterator<Item = &[f64]> {
        self.x.chunks_exact(d)
    }
}

#[derive(Debug, Clone, Default)]
pub struct DetectorState {
    buffer: VecDeque<PreparedBatch>,
    d: Option<usize>,
    t_now: Option<u64>,
    alarmed: bool,
    last: Option<StatisticReport>,
}

impl DetectorState {
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn t_now(&self) -> Option<u64> {
        self.t_now
    }

    pub fn alarmed(&self) -> bool {
        self.alarmed
    }

    pub fn last_statistic(&self) -> Option<f64> {
        self.last.as_ref().map(|r| r.value)
    }

    pub fn argmax_point(&self) -> Option<&[f64]> {
        self.last.as_ref().map(|r| r.argmax_point.as_slice())
    }

    pub fn last_report(&self) -> Option<&StatisticReport> {
        self.last.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    state: DetectorState,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        Ok(Self {
            config,
            state: DetectorState::default(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn state(&self) -> &DetectorState {
        &self.state
    }

    /// Clears the buffer and alarm, keeping the configuration.
    pub fn reset(&mut self) {
        self.state = DetectorState::default();
    }

    fn prepare(&self, batch: &TimeBatch, d: usize) -> Result<PreparedBatch, DetectorError> {
        batch.check(d)?;
        let mut prepared = PreparedBatch {
            t: batch.t,
            x: Vec::with_capacity(batch.len() * d),
            y: Vec::with_capacity(batch.len()),
            treated: Vec::with_capacity(batch.len()),
            yhat: Vec::with_capacity(batch.len()),
        };
        for row in &batch.rows {
            prepared.x.extend_from_slice(&row.x);
            prepared.y.push(row.y);
            prepared.treated.push(row.treated());
            if self.config.estimator == Estimator::OneK {
                let p = self
                    .config
                    .propensity
                    .predict(&row.x)
                    .map_err(KernelError::from)?;
                prepared
                    .yhat
                    .push(transformed_outcome(row.y, row.treated(), p)?);
            }
        }
        Ok(prepared)
    }

    /// Ingests the next period. Returns an alert if the statistic computed on
    /// the updated buffer reaches `epsilon`.
    pub fn push(&mut self, batch: &TimeBatch) -> Result<Option<Alert>, DetectorError> {
        if self.state.alarmed {
            return Err(DetectorError::AlreadyAlarmed);
        }
        if let Some(t) = self.state.t_now {
            if batch.t != t + 1 {
                return Err(DetectorError::NonContiguousTime {
                    expected: t + 1,
                    found: batch.t,
                });
            }
        }
        let d = match self.state.d.or_else(|| batch.dim()) {
            Some(d) => d,
            None => {
                // An empty first batch carries no dimension yet.
                self.state.t_now = Some(batch.t);
                self.state.buffer.push_back(PreparedBatch {
                    t: batch.t,
                    x: vec![],
                    y: vec![],
                    treated: vec![],
                    yhat: vec![],
                });
                self.evict();
                return Ok(None);
            }
        };
        let prepared = self.prepare(batch, d)?;
        self.state.d = Some(d);
        self.state.t_now = Some(batch.t);
        self.state.buffer.push_back(prepared);
        self.evict();

        if self.state.buffer.len() < 2 * self.config.w {
            self.state.last = None;
            return Ok(None);
        }
        match self.statistic() {
            Ok(report) => {
                let alert = (report.value >= self.config.epsilon).then(|| Alert {
                    delta_hat: batch.t,
                    statistic: report.value,
                    argmax_x: report.argmax_point.clone(),
                    window: (self.state.buffer[0].t - 1, batch.t),
                });
                self.state.alarmed = alert.is_some();
                self.state.last = Some(report);
                Ok(alert)
            }
            Err(DetectorError::AllPointsSkipped) => {
                self.state.last = None;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn evict(&mut self) {
        while self.state.buffer.len() > 2 * self.config.w {
            self.state.buffer.pop_front();
        }
    }

    fn half_estimate(&self, half: &[&PreparedBatch], x: &[f64]) -> Option<f64> {
        let d = x.len();
        let n: usize = half.iter().map(|b| b.y.len()).sum();
        let (k, h) = (&self.config.kernel, self.config.h);
        match self.config.estimator {
            Estimator::OneK => weighted_mean(
                k,
                h,
                x,
                half.iter()
                    .flat_map(|b| b.points(d).zip(b.yhat.iter().copied())),
                n,
            ),
            Estimator::Dk => {
                let group = |treated: bool| {
                    weighted_mean(
                        k,
                        h,
                        x,
                        half.iter().flat_map(|b| {
                            b.points(d)
                                .zip(b.y.iter().copied())
                                .zip(b.treated.iter())
                                .filter(move |(_, &z)| z == treated)
                                .map(|(p, _)| p)
                        }),
                        n,
                    )
                };
                Some(group(true)? - group(false)?)
            }
        }
    }

    /// Maximum absolute discrepancy between the two half-window estimates over
    /// the evaluation points. Points where either estimate has no kernel mass
    /// are skipped; ties go to the first point in scan order.
    pub fn statistic(&self) -> Result<StatisticReport, DetectorError> {
        let need = 2 * self.config.w;
        if self.state.buffer.len() < need {
            return Err(DetectorError::BufferNotFull {
                have: self.state.buffer.len(),
                need,
            });
        }
        let Some(d) = self.state.d else {
            return Err(DetectorError::AllPointsSkipped);
        };
        let all: Vec<&PreparedBatch> = self.state.buffer.iter().collect();
        let (older, newer) = all.split_at(self.config.w);
        let points: Vec<&[f64]> = match &self.config.eval_policy {
            EvalPolicy::CurrentWindow => all.iter().flat_map(|b| b.points(d)).collect(),
            EvalPolicy::FixedGrid(grid) => {
                if grid[0].len() != d {
                    return Err(StreamError::DimensionMismatch {
                        t: self.state.t_now.unwrap_or(0),
                        subject: 0,
                        expected: grid[0].len(),
                        found: d,
                    }
                    .into());
                }
                grid.iter().map(Vec::as_slice).collect()
            }
        };
        let n_obs: usize = all.iter().map(|b| b.y.len()).sum();
        let eval = |x: &&[f64]| -> Option<f64> {
            let a = self.half_estimate(older, x)?;
            let b = self.half_estimate(newer, x)?;
            Some((a - b).abs())
        };
        let values: Vec<Option<f64>> = if points.len() * n_obs >= PARALLEL_WORK_THRESHOLD {
            points.par_iter().map(eval).collect()
        } else {
            points.iter().map(eval).collect()
        };

        let mut best: Option<(f64, usize)> = None;
        let mut skipped = 0;
        for (idx, v) in values.iter().enumerate() {
            match v {
                Some(v) if best.is_none_or(|(b, _)| *v > b) => best = Some((*v, idx)),
                Some(_) => {}
                None => skipped += 1,
            }
        }
        let (value, idx) = best.ok_or(DetectorError::AllPointsSkipped)?;
        Ok(StatisticReport {
            value,
            argmax_point: points[idx].to_vec(),
            evaluated: points.len() - skipped,
            skipped,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RunOutcome {
    Alert(Alert),
    RanToEnd { t_last: Option<u64> },
}

impl RunOutcome {
    pub fn alarm_time(&self) -> Option<u64> {
        match self {
            RunOutcome::Alert(a) => Some(a.delta_hat),
            RunOutcome::RanToEnd { .. } => None,
        }
    }
}

/// Feeds `batches` in order and returns the first alert, if any.
pub fn run_stream(
    batches: &[TimeBatch],
    config: &DetectorConfig,
) -> Result<RunOutcome, DetectorError> {
    let mut det = Detector::new(config.clone())?;
    for batch in batches {
        if let Some(alert) = det.push(batch)? {
            return Ok(RunOutcome::Alert(alert));
        }
    }
    Ok(RunOutcome::RanToEnd {
        t_last: batches.last().map(|b| b.t),
    })
}

/// The statistic at every period of a stream, computed without alarming.
///
/// Because the statistic does not depend on `epsilon`, the alarm time of a
/// detector with any threshold is the first period whose value reaches it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatisticPath {
    pub times: Vec<u64>,
    pub values: Vec<Option<f64>>,
}

impl StatisticPath {
    pub fn first_crossing(&self, epsilon: f64) -> Option<u64> {
        self.times
            .iter()
            .zip(&self.values)
            .find(|(_, v)| v.is_some_and(|v| v >= epsilon))
            .map(|(&t, _)| t)
    }

    /// Largest value observed up to and including each period.
    pub fn running_max(&self) -> Vec<f64> {
        let mut m = f64::NEG_INFINITY;
        self.values
            .iter()
            .map(|v| {
                if let Some(v) = v {
                    m = m.max(*v);
                }
                m
            })
            .collect()
    }
}

pub fn statistic_path(
    batches: &[TimeBatch],
    config: &DetectorConfig,
) -> Result<StatisticPath, DetectorError> {
    let mut det = Detector::new(config.clone().with_epsilon(f64::INFINITY))?;
    let mut path = StatisticPath {
        times: Vec::with_capacity(batches.len()),
        values: Vec::with_capacity(batches.len()),
    };
    for batch in batches {
        det.push(batch)?;
        path.times.push(batch.t);
        path.values.push(det.state().last_statistic());
    }
    Ok(path)
}

/// Kernel-generic statistic over explicit half windows, used by tests and by
/// callers that hold windows outside a detector.
pub fn discrepancy<K: Kernel + ?Sized>(
    older: &crate::kernels::EstimateWindow<'_>,
    newer: &crate::kernels::EstimateWindow<'_>,
    points: &[Vec<f64>],
    config: &DetectorConfig,
    kernel: &K,
) -> Result<StatisticReport, DetectorError> {
    use crate::kernels::{dk_cate, nw_cate};
    let estimate = |w: &crate::kernels::EstimateWindow<'_>, x: &[f64]| match config.estimator {
        Estimator::OneK => nw_cate(w, &config.propensity, kernel, config.h, x),
        Estimator::Dk => dk_cate(w, kernel, config.h, x),
    };
    let mut best: Option<(f64, usize)> = None;
    let mut skipped = 0;
    for (idx, x) in points.iter().enumerate() {
        let pair = (estimate(older, x), estimate(newer, x));
        match pair {
            (Ok(a), Ok(b)) => {
                let v = (a - b).abs();
                if best.is_none_or(|(m, _)| v > m) {
                    best = Some((v, idx));
                }
            }
            (Err(KernelError::NoMass | KernelError::NoGroupMass(_)), _)
            | (_, Err(KernelError::NoMass | KernelError::NoGroupMass(_))) => skipped += 1,
            (Err(e), _) | (_, Err(e)) => return Err(e.into()),
        }
    }
    let (value, idx) = best.ok_or(DetectorError::AllPointsSkipped)?;
    Ok(StatisticReport {
        value,
        argmax_point: points[idx].clone(),
        evaluated: points.len() - skipped,
        skipped,
    })
}
