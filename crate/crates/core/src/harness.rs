//! Paired delay studies over seeded replications, summary reporting, and the
//! One-K versus Two-K estimation curves.
//!
//! Delay convention: an alarm at `t > delta` has delay `t - delta`; an alarm at
//! or before `delta` is a false alarm and contributes no delay; a run without
//! any alarm contributes the censored value `T - delta` and is counted as
//! missed. Means and standard deviations are taken over detected and censored
//! runs.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{
    calibrate_epsilon, CalibrationError, CalibrationSpec, EpsilonSearch, ScenarioSource,
};
use crate::detector::{run_stream, DetectorConfig, DetectorError, Estimator, EvalPolicy};
use crate::kernels::{
    select_bandwidth, transformed_outcome, weighted_mean, KernelError, KernelSpec,
};
use crate::propensity::{
    fit_constant, FitMethod, PropensityError, PropensityFit, PropensityModel, DEFAULT_CLIP,
};
use crate::simulate::{
    curve_dataset_with, curve_tau, derive_seed, generate, CurveDataOptions, Scenario, ScenarioSpec,
    SimError,
};

/// Seed-path tags keeping calibration and monitoring streams disjoint.
const CALIBRATION_TAG: u64 = 0xCA1;
const MONITOR_TAG: u64 = 0x0B5;

/// Number of evaluation points of the estimation curves.
pub const CURVE_POINTS: usize = 512;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Calibration(#[from] CalibrationError),

    #[error(transparent)]
    Detector(#[from] DetectorError),

    #[error(transparent)]
    Simulation(#[from] SimError),

    #[error(transparent)]
    Propensity(#[from] PropensityError),

    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Monte-Carlo settings of the per-cell threshold calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Run length cap; defaults to `ceil(10 * gamma)`.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub search: EpsilonSearch,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            n_mc: default_n_mc(),
            horizon: None,
            search: EpsilonSearch::Exact,
        }
    }
}

/// Where `experiment` writes its artifacts. Unset paths are skipped.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputPaths {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub json: Option<PathBuf>,
    #[serde(default)]
    pub markdown: Option<PathBuf>,
    /// Per-replicate NDJSON log.
    #[serde(default)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_delta")]
    pub delta: u64,
    pub d_list: Vec<usize>,
    pub h_list: Vec<f64>,
    pub gamma_list: Vec<f64>,
    #[serde(default = "default_w")]
    pub w: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub eval_policy: EvalPolicy,
    /// Propensity wiring; defaults to a pooled fit chosen per scenario.
    #[serde(default)]
    pub propensity: Option<PropensityFit>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub share_errors: bool,
    #[serde(default)]
    pub outputs: OutputPaths,
}

fn default_n_mc() -> usize {
    100
}
fn default_horizon() -> usize {
    100
}
fn default_n() -> usize {
    40
}
fn default_delta() -> u64 {
    50
}
fn default_w() -> usize {
    3
}
fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::OneK, Estimator::Dk]
}
fn default_reps() -> usize {
    50
}

/// Pooled constant for the randomised designs, pooled logistic otherwise.
pub fn default_propensity_fit(scenario: Scenario) -> PropensityFit {
    let method = if scenario.randomised() {
        FitMethod::Constant
    } else {
        FitMethod::Logistic
    };
    PropensityFit::Pooled { method }
}

impl ExperimentConfig {
    /// The standard delay grid: `d` in {3, 6}, `h` in {4, 20},
    /// `gamma` in {20, 40}, `w = 3`, both estimators.
    pub fn delay_grid(scenario: Scenario) -> Self {
        Self {
            scenario,
            horizon: default_horizon(),
            n: default_n(),
            delta: default_delta(),
            d_list: vec![3, 6],
            h_list: vec![4.0, 20.0],
            gamma_list: vec![20.0, 40.0],
            w: default_w(),
            estimators: default_estimators(),
            reps: default_reps(),
            calibration: CalibrationSettings::default(),
            kernel: KernelSpec::gaussian(),
            eval_policy: EvalPolicy::CurrentWindow,
            propensity: None,
            base_seed: 0,
            share_errors: false,
            outputs: OutputPaths::default(),
        }
    }

    /// As [`ExperimentConfig::delay_grid`] with `w = 7`.
    pub fn wide_window_grid(scenario: Scenario) -> Self {
        Self {
            w: 7,
            ..Self::delay_grid(scenario)
        }
    }

    /// A single cell.
    pub fn cell(scenario: Scenario, d: usize, h: f64, gamma: f64) -> Self {
        Self {
            d_list: vec![d],
            h_list: vec![h],
            gamma_list: vec![gamma],
            ..Self::delay_grid(scenario)
        }
    }

    pub fn propensity_fit(&self) -> PropensityFit {
        self.propensity
            .unwrap_or_else(|| default_propensity_fit(self.scenario))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.reps == 0 {
            return bad("reps must be at least 1");
        }
        if self.d_list.is_empty() || self.h_list.is_empty() || self.gamma_list.is_empty() {
            return bad("d, h and gamma lists must be non-empty");
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required");
        }
        if self.w == 0 || 2 * self.w as u64 > self.delta {
            return bad("need 1 <= 2w <= delta");
        }
        for &d in &self.d_list {
            self.stream_spec(d, 0).validate()?;
        }
        Ok(())
    }

    fn stream_spec(&self, d: usize, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            scenario: self.scenario,
            d,
            horizon: self.horizon,
            n: self.n,
            delta: Some(self.delta),
            seed,
            share_errors: self.share_errors,
        }
    }

    /// Seed of monitoring replicate `rep` at dimension `d`; shared by every
    /// estimator, bandwidth and target so that comparisons are paired.
    pub fn replicate_seed(&self, d: usize, rep: usize) -> u64 {
        derive_seed(self.base_seed, &[MONITOR_TAG, d as u64, rep as u64])
    }

    /// Base seed of the calibration runs at dimension `d`, also shared by
    /// every estimator (common random numbers).
    pub fn calibration_seed(&self, d: usize) -> u64 {
        derive_seed(self.base_seed, &[CALIBRATION_TAG, d as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RepOutcome {
    Detected { alarm: u64, delay: u64 },
    FalseAlarm { alarm: u64 },
    Missed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub outcome: RepOutcome,
    /// Value entering the delay mean: the delay, or `T - delta` when missed.
    pub delay: Option<f64>,
}

impl RepRecord {
    pub fn classify(rep: usize, seed: u64, alarm: Option<u64>, delta: u64, horizon: usize) -> Self {
        let (outcome, delay) = match alarm {
            Some(t) if t > delta => (
                RepOutcome::Detected {
                    alarm: t,
                    delay: t - delta,
                },
                Some((t - delta) as f64),
            ),
            Some(t) => (RepOutcome::FalseAlarm { alarm: t }, None),
            None => (RepOutcome::Missed, Some(horizon as f64 - delta as f64)),
        };
        Self {
            rep,
            seed,
            outcome,
            delay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: Scenario,
    pub d: usize,
    pub h: f64,
    pub gamma: f64,
    pub w: usize,
    pub estimator: Estimator,
    pub epsilon: f64,
    pub arl_estimate: f64,
    pub mean_delay: Option<f64>,
    pub sd_delay: Option<f64>,
    pub detected: usize,
    pub false_alarms: usize,
    pub missed: usize,
    pub reps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<RepRecord>,
}

impl CellSummary {
    pub fn delays(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.delay).collect()
    }

    fn aggregate(mut self) -> Self {
        let delays: Vec<f64> = self.records.iter().filter_map(|r| r.delay).collect();
        let (mean, sd) = mean_sd(&delays);
        self.mean_delay = mean;
        self.sd_delay = sd;
        self.reps = self.records.len();
        self.detected = 0;
        self.false_alarms = 0;
        self.missed = 0;
        for r in &self.records {
            match r.outcome {
                RepOutcome::Detected { .. } => self.detected += 1,
                RepOutcome::FalseAlarm { .. } => self.false_alarms += 1,
                RepOutcome::Missed => self.missed += 1,
            }
        }
        self
    }
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(sd))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub cells: Vec<CellSummary>,
}

impl ExperimentSummary {
    pub fn find(&self, d: usize, h: f64, gamma: f64, estimator: Estimator) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.d == d && c.h == h && c.gamma == gamma && c.estimator == estimator)
    }
}

/// Calibrates one threshold per (d, h, gamma, estimator) and monitors the
/// same `reps` change streams with every configuration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary, HarnessError> {
    config.validate()?;
    let wiring = config.propensity_fit();
    let mut cells = Vec::new();
    for &d in &config.d_list {
        let seeds: Vec<u64> = (0..config.reps)
            .map(|r| config.replicate_seed(d, r))
            .collect();
        let streams = seeds
            .par_iter()
            .map(|&s| {
                let stream = generate(&config.stream_spec(d, s))?;
                let (model, skip) = wiring.resolve(&stream, config.w)?;
                Ok((stream, model, skip))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let source = ScenarioSource {
            scenario: config.scenario,
            d,
            n: config.n,
            share_errors: config.share_errors,
        };
        for &h in &config.h_list {
            for &gamma in &config.gamma_list {
                for &estimator in &config.estimators {
                    let base = DetectorConfig::new(
                        config.w,
                        h,
                        f64::INFINITY,
                        PropensityModel::constant(0.5),
                    )
                    .with_kernel(config.kernel)
                    .with_estimator(estimator)
                    .with_eval_policy(config.eval_policy.clone());
                    let spec = CalibrationSpec {
                        gamma,
                        n_mc: config.calibration.n_mc,
                        horizon: config.calibration.horizon,
                        search: config.calibration.search.clone(),
                        base_seed: config.calibration_seed(d),
                        propensity: wiring,
                    };
                    let cal = calibrate_epsilon(&source, &base, &spec)?;
                    let detector = base.with_epsilon(cal.epsilon);
                    let records = streams
                        .par_iter()
                        .enumerate()
                        .map(|(rep, (stream, model, skip))| {
                            let mut cfg = detector.clone();
                            if let Some(m) = model {
                                cfg.propensity = m.clone();
                            }
                            let outcome = run_stream(&stream[*skip..], &cfg)?;
                            Ok(RepRecord::classify(
                                rep,
                                seeds[rep],
                                outcome.alarm_time(),
                                config.delta,
                                config.horizon,
                            ))
                        })
                        .collect::<Result<Vec<_>, HarnessError>>()?;
                    cells.push(
                        CellSummary {
                            scenario: config.scenario,
                            d,
                            h,
                            gamma,
                            w: config.w,
                            estimator,
                            epsilon: cal.epsilon,
                            arl_estimate: cal.arl_estimate,
                            mean_delay: None,
                            sd_delay: None,
                            detected: 0,
                            false_alarms: 0,
                            missed: 0,
                            reps: 0,
                            records,
                        }
                        .aggregate(),
                    );
                }
            }
        }
    }
    Ok(ExperimentSummary { cells })
}

/// Exact one-sided sign test of "the first sample tends to be smaller".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs where the first value is strictly smaller.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Pairs dropped because either value is missing.
    pub undefined: usize,
    /// `P(Binomial(wins + losses, 1/2) >= wins)`.
    pub p_value: f64,
}

impl SignTest {
    pub fn rejects(&self, level: f64) -> bool {
        self.p_value <= level
    }
}

pub fn paired_sign_test(first: &[Option<f64>], second: &[Option<f64>]) -> SignTest {
    let (mut wins, mut losses, mut ties, mut undefined) = (0, 0, 0, 0);
    for (a, b) in first.iter().zip(second) {
        match (a, b) {
            (Some(a), Some(b)) if a < b => wins += 1,
            (Some(a), Some(b)) if a > b => losses += 1,
            (Some(_), Some(_)) => ties += 1,
            _ => undefined += 1,
        }
    }
    SignTest {
        wins,
        losses,
        ties,
        undefined,
        p_value: binomial_upper_tail(wins + losses, wins),
    }
}

/// `P(Binomial(n, 1/2) >= k)`.
fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    // Accumulate log pmf terms through the ratio C(n, j+1) / C(n, j).
    let ln_half = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut tail = 0.0;
    for j in 0..=n {
        if j >= k {
            tail += (ln_c + ln_half).exp();
        }
        ln_c += ((n - j) as f64).ln() - ((j + 1) as f64).ln();
    }
    tail.min(1.0)
}

/// Bandwidths of the estimation curves: one for the single transformed-outcome
/// regression and one per group for the difference of two regressions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveBandwidths {
    pub one_k: f64,
    pub treated: f64,
    pub control: f64,
}

impl Default for CurveBandwidths {
    /// Leave-one-out cross-validated orders of magnitude on the default
    /// dataset: the transformed outcome is smooth in `x`, while each group
    /// mean inherits the fast oscillation of `cos(100/x)`.
    fn default() -> Self {
        Self {
            one_k: 0.05,
            treated: 0.002,
            control: 0.002,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub x: f64,
    pub true_tau: f64,
    pub one_k: f64,
    pub two_k: f64,
}

impl CurveBandwidths {
    /// Chooses each bandwidth by leave-one-out cross-validation on the
    /// comparison dataset: the One-K bandwidth for the regression of the
    /// transformed outcome, the others for the per-arm outcome regressions.
    pub fn cross_validated(
        n: usize,
        seed: u64,
        candidates: &[f64],
        kernel: &KernelSpec,
    ) -> Result<Self, HarnessError> {
        let batch = curve_dataset_with(n, seed, CurveDataOptions::default());
        let p = fit_constant(std::slice::from_ref(&batch), DEFAULT_CLIP)?.predict(&[0.0])?;
        let pick = |treated: Option<bool>| -> Result<f64, HarnessError> {
            let rows: Vec<_> = batch
                .rows
                .iter()
                .filter(|r| treated.is_none_or(|t| r.treated() == t))
                .collect();
            let xs: Vec<&[f64]> = rows.iter().map(|r| r.x.as_slice()).collect();
            let ys = rows
                .iter()
                .map(|r| match treated {
                    None => transformed_outcome(r.y, r.treated(), p),
                    Some(_) => Ok(r.y),
                })
                .collect::<Result<Vec<_>, _>>()?;
            select_bandwidth(kernel, candidates, &xs, &ys).ok_or_else(|| KernelError::NoMass.into())
        };
        Ok(Self {
            one_k: pick(None)?,
            treated: pick(Some(true))?,
            control: pick(Some(false))?,
        })
    }
}

/// Grid point `i` of the curves, the midpoint `(i + 1/2) / 512`.
pub fn curve_grid() -> impl Iterator<Item = f64> {
    (0..CURVE_POINTS).map(|i| (i as f64 + 0.5) / CURVE_POINTS as f64)
}

/// One-K and Two-K estimates on the default comparison dataset.
pub fn onek_twok_curves(
    n: usize,
    seed: u64,
    bandwidths: CurveBandwidths,
    kernel: &KernelSpec,
) -> Result<Vec<CurveRow>, HarnessError> {
    onek_twok_curves_with(n, seed, bandwidths, kernel, CurveDataOptions::default())
}

pub fn onek_twok_curves_with(
    n: usize,
    seed: u64,
    bandwidths: CurveBandwidths,
    kernel: &KernelSpec,
    options: CurveDataOptions,
) -> Result<Vec<CurveRow>, HarnessError> {
    if n < 10 {
        return Err(HarnessError::InvalidConfig("curves need n >= 10".into()));
    }
    for h in [bandwidths.one_k, bandwidths.treated, bandwidths.control] {
        if !(h > 0.0) || !h.is_finite() {
            return Err(KernelError::InvalidBandwidth(h).into());
        }
    }
    let batch = curve_dataset_with(n, seed, options);
    let data = std::slice::from_ref(&batch);
    let p = fit_constant(data, DEFAULT_CLIP)?.predict(&[0.0])?;
    let yhat = batch
        .rows
        .iter()
        .map(|r| transformed_outcome(r.y, r.treated(), p))
        .collect::<Result<Vec<_>, _>>()?;

    let rows = &batch.rows;
    curve_grid()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&x| {
            let at = [x];
            let one_k = weighted_mean(
                kernel,
                bandwidths.one_k,
                &at,
                rows.iter().zip(&yhat).map(|(r, &v)| (r.x.as_slice(), v)),
                n,
            )
            .ok_or(KernelError::NoMass)?;
            let group = |treated: bool, h: f64| {
                weighted_mean(
                    kernel,
                    h,
                    &at,
                    rows.iter()
                        .filter(|r| r.treated() == treated)
                        .map(|r| (r.x.as_slice(), r.y)),
                    n,
                )
            };
            let m1 = group(true, bandwidths.treated)
                .ok_or(KernelError::NoGroupMass(crate::kernels::Group::Treated))?;
            let m0 = group(false, bandwidths.control)
                .ok_or(KernelError::NoGroupMass(crate::kernels::Group::Control))?;
            Ok(CurveRow {
                x,
                true_tau: curve_tau(x),
                one_k,
                two_k: m1 - m0,
            })
        })
        .collect()
}

/// Mean squared errors of the One-K and Two-K curves against the true effect.
pub fn curve_mse(rows: &[CurveRow]) -> (f64, f64) {
    let n = rows.len() as f64;
    let one = rows
        .iter()
        .map(|r| (r.one_k - r.true_tau).powi(2))
        .sum::<f64>()
        / n;
    let two = rows
        .iter()
        .map(|r| (r.two_k - r.true_tau).powi(2))
        .sum::<f64>()
        / n;
    (one, two)
}

pub fn write_curves_csv<W: Write>(rows: &[CurveRow], out: W) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" | "markdown-table" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// One CSV line per cell; per-replicate records are not part of the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRow {
    scenario: Scenario,
    d: usize,
    h: f64,
    gamma: f64,
    w: usize,
    estimator: Estimator,
    epsilon: f64,
    arl_estimate: f64,
    mean_delay: Option<f64>,
    sd_delay: Option<f64>,
    detected: usize,
    false_alarms: usize,
    missed: usize,
    reps: usize,
}

const CSV_HEADER: [&str; 14] = [
    "scenario",
    "d",
    "h",
    "gamma",
    "w",
    "estimator",
    "epsilon",
    "arl_estimate",
    "mean_delay",
    "sd_delay",
    "detected",
    "false_alarms",
    "missed",
    "reps",
];

impl From<&CellSummary> for CellRow {
    fn from(c: &CellSummary) -> Self {
        Self {
            scenario: c.scenario,
            d: c.d,
            h: c.h,
            gamma: c.gamma,
            w: c.w,
            estimator: c.estimator,
            epsilon: c.epsilon,
            arl_estimate: c.arl_estimate,
            mean_delay: c.mean_delay,
            sd_delay: c.sd_delay,
            detected: c.detected,
            false_alarms: c.false_alarms,
            missed: c.missed,
            reps: c.reps,
        }
    }
}

impl From<CellRow> for CellSummary {
    fn from(r: CellRow) -> Self {
        Self {
            scenario: r.scenario,
            d: r.d,
            h: r.h,
            gamma: r.gamma,
            w: r.w,
            estimator: r.estimator,
            epsilon: r.epsilon,
            arl_estimate: r.arl_estimate,
            mean_delay: r.mean_delay,
            sd_delay: r.sd_delay,
            detected: r.detected,
            false_alarms: r.false_alarms,
            missed: r.missed,
            reps: r.reps,
            records: Vec::new(),
        }
    }
}

pub fn write_summary_csv<W: Write>(
    summary: &ExperimentSummary,
    out: W,
) -> Result<(), HarnessError> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    wtr.write_record(CSV_HEADER)?;
    for c in &summary.cells {
        wtr.serialize(CellRow::from(c))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses a summary written by [`write_summary_csv`]; records are empty.
pub fn read_summary_csv<R: Read>(input: R) -> Result<ExperimentSummary, HarnessError> {
    let mut rdr = csv::Reader::from_reader(input);
    let cells = rdr
        .deserialize::<CellRow>()
        .map(|r| r.map(CellSummary::from))
        .collect::<Result<_, _>>()?;
    Ok(ExperimentSummary { cells })
}

fn fmt_cell(c: Option<&CellSummary>) -> String {
    match c.and_then(|c| c.mean_delay.zip(c.sd_delay)) {
        Some((m, s)) => format!("{m:.1} ({s:.1})"),
        None => "–".to_string(),
    }
}

/// Markdown table per scenario: rows `d x h`, columns `gamma x estimator`,
/// entries `mean (sd)` of the delay.
pub fn summary_markdown(summary: &ExperimentSummary) -> String {
    let mut out = String::new();
    let mut scenarios: Vec<Scenario> = summary.cells.iter().map(|c| c.scenario).collect();
    scenarios.dedup();
    let uniq = |f: &dyn Fn(&CellSummary) -> String, s: Scenario| {
        let mut v: Vec<String> = Vec::new();
        for c in summary.cells.iter().filter(|c| c.scenario == s) {
            let k = f(c);
            if !v.contains(&k) {
                v.push(k);
            }
        }
        v
    };
    if scenarios.is_empty() {
        out.push_str("| d | h |\n|---|---|\n");
        return out;
    }
    for s in scenarios {
        let rows = uniq(&|c| format!("{}|{}", c.d, c.h), s);
        let cols = uniq(&|c| format!("{}|{}", c.gamma, c.estimator), s);
        let _ = writeln!(out, "Scenario {s}\n");
        out.push_str("| d | h |");
        for col in &cols {
            let (g, e) = col.split_once('|').expect("column key");
            let _ = write!(out, " Γ={g} {e} |");
        }
        out.push_str("\n|---|---|");
        for _ in &cols {
            out.push_str("---|");
        }
        out.push('\n');
        for row in &rows {
            let (d, h) = row.split_once('|').expect("row key");
            let _ = write!(out, "| {d} | {h} |");
            for col in &cols {
                let cell = summary.cells.iter().find(|c| {
                    c.scenario == s
                        && format!("{}|{}", c.d, c.h) == *row
                        && format!("{}|{}", c.gamma, c.estimator) == *col
                });
                let _ = write!(out, " {} |", fmt_cell(cell));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// One JSON object per (cell, replicate).
pub fn write_rep_log<W: Write>(
    summary: &ExperimentSummary,
    mut out: W,
) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Line<'a> {
        scenario: Scenario,
        d: usize,
        h: f64,
        gamma: f64,
        w: usize,
        estimator: Estimator,
        epsilon: f64,
        #[serde(flatten)]
        record: &'a RepRecord,
    }
    for c in &summary.cells {
        for r in &c.records {
            let line = Line {
                scenario: c.scenario,
                d: c.d,
                h: c.h,
                gamma: c.gamma,
                w: c.w,
                estimator: c.estimator,
                epsilon: c.epsilon,
                record: r,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn report(
    summary: &ExperimentSummary,
    format: ReportFormat,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Csv => write_summary_csv(summary, &mut out)?,
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, summary)?;
            out.write_all(b"\n")?;
        }
        ReportFormat::Markdown => out.write_all(summary_markdown(summary).as_bytes())?,
    }
    out.flush()?;
    Ok(())
}

/// Writes every artifact configured in `config.outputs`.
pub fn write_outputs(
    summary: &ExperimentSummary,
    outputs: &OutputPaths,
) -> Result<(), HarnessError> {
    if let Some(p) = &outputs.csv {
        report(summary, ReportFormat::Csv, p)?;
    }
    if let Some(p) = &outputs.json {
        report(summary, ReportFormat::Json, p)?;
    }
    if let Some(p) = &outputs.markdown {
        report(summary, ReportFormat::Markdown, p)?;
    }
    if let Some(p) = &outputs.log {
        write_rep_log(summary, BufWriter::new(File::create(p)?))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(d: usize, gamma: f64, estimator: Estimator, delays: &[Option<u64>]) -> CellSummary {
        CellSummary {
            scenario: Scenario::S1,
            d,
            h: 20.0,
            gamma,
            w: 3,
            estimator,
            epsilon: 0.123_456_789,
            arl_estimate: 21.37,
            mean_delay: None,
            sd_delay: None,
            detected: 0,
            false_alarms: 0,
            missed: 0,
            reps: 0,
            records: delays
                .iter()
                .enumerate()
                .map(|(i, a)| RepRecord::classify(i, i as u64, a.map(|v| v + 50), 50, 100))
                .collect(),
        }
        .aggregate()
    }

    #[test]
    fn delay_convention() {
        let c = cell(
            3,
            20.0,
            Estimator::OneK,
            &[Some(4), None, Some(0), Some(10)],
        );
        // Alarms at 54 and 60 are detections, 50 is a false alarm, None is censored at 50.
        assert_eq!((c.detected, c.false_alarms, c.missed, c.reps), (2, 1, 1, 4));
        assert_eq!(c.mean_delay, Some((4.0 + 50.0 + 10.0) / 3.0));
    }

    #[test]
    fn single_rep_has_zero_sd() {
        let c = cell(3, 20.0, Estimator::OneK, &[Some(7)]);
        assert_eq!(c.mean_delay, Some(7.0));
        assert_eq!(c.sd_delay, Some(0.0));
    }

    #[test]
    fn sign_test_counts_and_p_values() {
        let a = [Some(1.0), Some(2.0), Some(3.0), None, Some(5.0)];
        let b = [Some(2.0), Some(2.0), Some(4.0), Some(1.0), Some(1.0)];
        let t = paired_sign_test(&a, &b);
        assert_eq!((t.wins, t.losses, t.ties, t.undefined), (2, 1, 1, 1));
        assert!((t.p_value - 0.5).abs() < 1e-15);
        assert!((binomial_upper_tail(10, 9) - 11.0 / 1024.0).abs() < 1e-15);
        assert_eq!(binomial_upper_tail(5, 0), 1.0);
        assert!((binomial_upper_tail(50, 32) - 0.032_454_323_536_136_09).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_empty() {
        let summary = ExperimentSummary {
            cells: vec![
                cell(3, 20.0, Estimator::OneK, &[Some(4), Some(9)]),
                cell(3, 20.0, Estimator::Dk, &[Some(0)]),
            ],
        };
        let mut buf = Vec::new();
        write_summary_csv(&summary, &mut buf).unwrap();
        let back = read_summary_csv(buf.as_slice()).unwrap();
        assert_eq!(back.cells.len(), 2);
        for (a, b) in summary.cells.iter().zip(&back.cells) {
            assert_eq!(CellRow::from(a), CellRow::from(b));
        }
        assert_eq!(back.cells[1].mean_delay, None);

        let mut buf = Vec::new();
        write_summary_csv(&ExperimentSummary::default(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("scenario,d,h,gamma"));
    }

    #[test]
    fn markdown_layout() {
        let summary = ExperimentSummary {
            cells: vec![
                cell(3, 20.0, Estimator::OneK, &[Some(4), Some(6)]),
                cell(3, 20.0, Estimator::Dk, &[Some(8)]),
                cell(6, 20.0, Estimator::OneK, &[Some(2)]),
            ],
        };
        let md = summary_markdown(&summary);
        assert!(md.contains("| d | h | Γ=20 one-k | Γ=20 dk |"));
        assert!(md.contains("| 3 | 20 | 5.0 (1.4) | 8.0 (0.0) |"));
        assert!(md.contains("| 6 | 20 | 2.0 (0.0) | – |"));
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"scenario":1,"d_list":[3],"h_list":[20.0],"gamma_list":[20.0]}"#,
        )
        .unwrap();
        assert_eq!(cfg, ExperimentConfig::cell(Scenario::S1, 3, 20.0, 20.0));
        assert_eq!(
            cfg.propensity_fit(),
            PropensityFit::Pooled {
                method: FitMethod::Constant
            }
        );
        assert_eq!(
            ExperimentConfig::delay_grid(Scenario::S4).propensity_fit(),
            PropensityFit::Pooled {
                method: FitMethod::Logistic
            }
        );
        assert_eq!(ExperimentConfig::wide_window_grid(Scenario::S2).w, 7);
        let mut bad = cfg.clone();
        bad.reps = 0;
        assert!(bad.validate().is_err());
        bad = cfg;
        bad.gamma_list.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn curves_shape_and_grid() {
        let rows =
            onek_twok_curves(400, 3, CurveBandwidths::default(), &KernelSpec::gaussian()).unwrap();
        assert_eq!(rows.len(), CURVE_POINTS);
        assert_eq!(rows[0].x, 0.5 / 512.0);
        assert!(rows
            .iter()
            .all(|r| r.one_k.is_finite() && r.two_k.is_finite()));
        let mut buf = Vec::new();
        write_curves_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "x,true_tau,one_k,two_k");
        assert_eq!(text.lines().count(), 513);
        assert!(
            onek_twok_curves(9, 3, CurveBandwidths::default(), &KernelSpec::gaussian()).is_err()
        );
    }
}
