//! Average-run-length estimation, threshold calibration and advisory tuning.
//!
//! Calibration uses common random numbers. Every replicate's change-free
//! stream is generated once, and the detector statistic is recorded at every
//! period. That statistic does not depend on the threshold, so the run length
//! for any `epsilon` is the first period at which the recorded value reaches
//! it. The realized ARL is then a non-decreasing step function of `epsilon`,
//! and the threshold search is exact on the realized sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{statistic_path, DetectorConfig, DetectorError, StatisticPath};
use crate::model::TimeBatch;
use crate::propensity::{PropensityError, PropensityFit};
use crate::simulate::{derive_seed, generate, Scenario, ScenarioSpec, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("largest candidate epsilon={largest} reaches ARL {arl}, below the target")]
    GridExhausted { largest: f64, arl: f64 },

    #[error("invalid calibration spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Detector(#[from] DetectorError),

    #[error(transparent)]
    Simulation(#[from] SimError),

    #[error(transparent)]
    Propensity(#[from] PropensityError),
}

/// A source of change-free streams for Monte-Carlo replications.
pub trait StreamSource: Sync {
    fn stream(&self, seed: u64, horizon: usize) -> Result<Vec<TimeBatch>, CalibrationError>;
}

impl<F> StreamSource for F
where
    F: Fn(u64, usize) -> Vec<TimeBatch> + Sync,
{
    fn stream(&self, seed: u64, horizon: usize) -> Result<Vec<TimeBatch>, CalibrationError> {
        Ok(self(seed, horizon))
    }
}

/// Pre-change data from one of the benchmark scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSource {
    pub scenario: Scenario,
    pub d: usize,
    pub n: usize,
    #[serde(default)]
    pub share_errors: bool,
}

impl StreamSource for ScenarioSource {
    fn stream(&self, seed: u64, horizon: usize) -> Result<Vec<TimeBatch>, CalibrationError> {
        let spec = ScenarioSpec {
            scenario: self.scenario,
            d: self.d,
            horizon,
            n: self.n,
            delta: None,
            seed,
            share_errors: self.share_errors,
        };
        Ok(generate(&spec)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EpsilonSearch {
    /// Smallest threshold meeting the target on the realized sample.
    #[default]
    Exact,
    /// Smallest value of an explicit grid meeting the target.
    Grid { values: Vec<f64> },
    /// Bisection on `[lo, hi]` until the bracket is narrower than `tol`.
    Bisection { lo: f64, hi: f64, tol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    /// Target average run length.
    pub gamma: f64,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Periods per replication; defaults to `ceil(10 * gamma)`.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub search: EpsilonSearch,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub propensity: PropensityFit,
}

fn default_n_mc() -> usize {
    100
}

impl CalibrationSpec {
    pub fn new(gamma: f64, base_seed: u64) -> Self {
        Self {
            gamma,
            n_mc: default_n_mc(),
            horizon: None,
            search: EpsilonSearch::Exact,
            base_seed,
            propensity: PropensityFit::AsConfigured,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
            .unwrap_or_else(|| (10.0 * self.gamma).ceil() as usize)
    }

    /// Seed of replicate `r`.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        derive_seed(self.base_seed, &[r as u64])
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_mc).map(|r| self.replicate_seed(r)).collect()
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(CalibrationError::InvalidSpec(
                "gamma must be positive".into(),
            ));
        }
        if self.n_mc == 0 {
            return Err(CalibrationError::InvalidSpec(
                "n_mc must be at least 1".into(),
            ));
        }
        if (self.horizon() as f64) < self.gamma {
            return Err(CalibrationError::InvalidSpec(
                "horizon must be at least gamma".into(),
            ));
        }
        Ok(())
    }
}

/// Monte-Carlo ARL estimate. When some runs are censored at the horizon the
/// mean is a lower bound on the true ARL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArlEstimate {
    pub mean: f64,
    pub sd: f64,
    pub censored: usize,
    pub n_mc: usize,
    pub horizon: usize,
    pub run_lengths: Vec<u64>,
}

impl ArlEstimate {
    pub fn from_run_lengths(run_lengths: Vec<u64>, censored: usize, horizon: usize) -> Self {
        let n = run_lengths.len();
        let mean = run_lengths.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (run_lengths
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            sd,
            censored,
            n_mc: n,
            horizon,
            run_lengths,
        }
    }

    pub fn is_lower_bound(&self) -> bool {
        self.censored > 0
    }

    pub fn standard_error(&self) -> f64 {
        self.sd / (self.n_mc as f64).sqrt()
    }
}

/// Statistic paths of every replication under common random numbers.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub paths: Vec<StatisticPath>,
    pub horizon: usize,
    pub seeds: Vec<u64>,
}

impl PathEnsemble {
    /// Generates and monitors `spec.n_mc` change-free replications in parallel.
    pub fn record<S: StreamSource + ?Sized>(
        source: &S,
        config: &DetectorConfig,
        spec: &CalibrationSpec,
    ) -> Result<Self, CalibrationError> {
        spec.validate()?;
        config.validate()?;
        let horizon = spec.horizon();
        let seeds = spec.seeds();
        let paths = seeds
            .par_iter()
            .map(|&seed| {
                let stream = source.stream(seed, horizon)?;
                let (model, skip) = spec.propensity.resolve(&stream, config.w)?;
                let mut cfg = config.clone();
                if let Some(m) = model {
                    cfg.propensity = m;
                }
                Ok(statistic_path(&stream[skip.min(stream.len())..], &cfg)?)
            })
            .collect::<Result<Vec<_>, CalibrationError>>()?;
        Ok(Self {
            paths,
            horizon,
            seeds,
        })
    }

    pub fn arl(&self, epsilon: f64) -> ArlEstimate {
        let mut censored = 0;
        let run_lengths = self
            .paths
            .iter()
            .map(|p| {
                p.first_crossing(epsilon).unwrap_or_else(|| {
                    censored += 1;
                    self.horizon as u64
                })
            })
            .collect();
        ArlEstimate::from_run_lengths(run_lengths, censored, self.horizon)
    }

    /// Thresholds at which some replicate's run length changes, as the
    /// smallest representable value above each recorded statistic, plus 0.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .paths
            .iter()
            .flat_map(|p| p.values.iter().flatten().map(|s| s.next_up()))
            .chain(std::iter::once(0.0))
            .collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

/// Runs `spec.n_mc` change-free replications with `config.epsilon`.
pub fn estimate_arl<S: StreamSource + ?Sized>(
    source: &S,
    config: &DetectorConfig,
    spec: &CalibrationSpec,
) -> Result<ArlEstimate, CalibrationError> {
    Ok(PathEnsemble::record(source, config, spec)?.arl(config.epsilon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub epsilon: f64,
    pub arl_estimate: f64,
    pub sd: f64,
    pub censored: usize,
    pub seeds: Vec<u64>,
}

/// Smallest candidate in sorted `candidates` whose ARL reaches `gamma`.
fn smallest_passing(
    ensemble: &PathEnsemble,
    candidates: &[f64],
    gamma: f64,
) -> Result<(f64, ArlEstimate), CalibrationError> {
    let Some(&largest) = candidates.last() else {
        return Err(CalibrationError::InvalidSpec("empty epsilon grid".into()));
    };
    let top = ensemble.arl(largest);
    if top.mean < gamma {
        return Err(CalibrationError::GridExhausted {
            largest,
            arl: top.mean,
        });
    }
    // ARL is non-decreasing in epsilon, so binary search the first pass.
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if ensemble.arl(candidates[mid]).mean >= gamma {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok((candidates[lo], ensemble.arl(candidates[lo])))
}

/// Calibrates the threshold on already-recorded paths.
pub fn calibrate_on(
    ensemble: &PathEnsemble,
    spec: &CalibrationSpec,
) -> Result<CalibrationResult, CalibrationError> {
    let (epsilon, arl) = match &spec.search {
        EpsilonSearch::Exact => smallest_passing(ensemble, &ensemble.breakpoints(), spec.gamma)?,
        EpsilonSearch::Grid { values } => {
            let mut grid = values.clone();
            if grid.iter().any(|v| v.is_nan()) {
                return Err(CalibrationError::InvalidSpec("NaN in epsilon grid".into()));
            }
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            smallest_passing(ensemble, &grid, spec.gamma)?
        }
        &EpsilonSearch::Bisection { lo, hi, tol } => {
            if !(lo <= hi) || !(tol > 0.0) {
                return Err(CalibrationError::InvalidSpec(
                    "need lo <= hi and tol > 0".into(),
                ));
            }
            let top = ensemble.arl(hi);
            if top.mean < spec.gamma {
                return Err(CalibrationError::GridExhausted {
                    largest: hi,
                    arl: top.mean,
                });
            }
            let bottom = ensemble.arl(lo);
            if bottom.mean >= spec.gamma {
                (lo, bottom)
            } else {
                let (mut lo, mut hi) = (lo, hi);
                while hi - lo > tol {
                    let mid = 0.5 * (lo + hi);
                    if ensemble.arl(mid).mean >= spec.gamma {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                (hi, ensemble.arl(hi))
            }
        }
    };
    Ok(CalibrationResult {
        epsilon,
        arl_estimate: arl.mean,
        sd: arl.sd,
        censored: arl.censored,
        seeds: ensemble.seeds.clone(),
    })
}

/// Finds the smallest threshold whose estimated ARL is at least `spec.gamma`.
/// The `epsilon` in `config` is ignored.
pub fn calibrate_epsilon<S: StreamSource + ?Sized>(
    source: &S,
    config: &DetectorConfig,
    spec: &CalibrationSpec,
) -> Result<CalibrationResult, CalibrationError> {
    let ensemble = PathEnsemble::record(source, config, spec)?;
    calibrate_on(&ensemble, spec)
}

/// Inputs for the advisory tuning formulas. Constants of the underlying rates
/// are unknown and default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningInputs {
    /// Sub-Gaussian noise scale.
    pub sigma: f64,
    pub n: f64,
    pub d: usize,
    pub w: f64,
    /// Pre-change length.
    pub delta: f64,
    /// Target ARL.
    pub gamma: f64,
    /// Exponent of the mixing-coefficient decay; `f64::INFINITY` for independence.
    pub gamma_alpha: f64,
    /// Jump size (sup-norm of the CATE change).
    pub kappa: f64,
}

impl TuningInputs {
    /// `2 g / (2 + g)`, tending to 2 as the dependence vanishes.
    pub fn gamma1(&self) -> f64 {
        if self.gamma_alpha.is_infinite() {
            2.0
        } else {
            2.0 * self.gamma_alpha / (2.0 + self.gamma_alpha)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChangeCase {
    NoChange,
    OneChange,
}

/// Rate-optimal bandwidth up to the multiplier `c_h`:
/// `c_h * max((s^2 L^(2/g1) / (n w^2))^(1/(d+2)), (s^2 L / (n w))^(1/(d+2)))`
/// with `L = log(gamma w)`, or `log(gamma delta w)` when a change is present.
pub fn advisory_bandwidth(inputs: &TuningInputs, case: ChangeCase, c_h: f64) -> f64 {
    let TuningInputs { sigma, n, d, w, .. } = *inputs;
    let l = match case {
        ChangeCase::NoChange => (inputs.gamma * w).ln(),
        ChangeCase::OneChange => (inputs.gamma * inputs.delta * w).ln(),
    }
    .max(0.0);
    let s2 = sigma * sigma;
    let exp = 1.0 / (d as f64 + 2.0);
    let dependent = (s2 * l.powf(2.0 / inputs.gamma1()) / (n * w * w)).powf(exp);
    let independent = (s2 * l / (n * w)).powf(exp);
    c_h * dependent.max(independent)
}

/// Unrounded window width
/// `c1 * max(s^2 L / (n k^(d+2)), (s^2 L^(2/g1) / (n k^(d+2)))^(1/2))`
/// with `L = log(max(gamma, delta))`.
pub fn advisory_window_raw(inputs: &TuningInputs, c1: f64) -> f64 {
    let TuningInputs {
        sigma, n, d, kappa, ..
    } = *inputs;
    let l = inputs.gamma.max(inputs.delta).ln().max(0.0);
    let scale = sigma * sigma / (n * kappa.powi(d as i32 + 2));
    let first = scale * l;
    let second = (scale * l.powf(2.0 / inputs.gamma1())).sqrt();
    c1 * first.max(second)
}

/// Advisory window width, rounded up and at least 1.
pub fn advisory_window(inputs: &TuningInputs, c1: f64) -> usize {
    (advisory_window_raw(inputs, c1).ceil() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;
    use crate::propensity::PropensityModel;

    fn flat_source(seed: u64, horizon: usize) -> Vec<TimeBatch> {
        // Zero-noise constant effect: the statistic is identically zero.
        let _ = seed;
        (1..=horizon as u64)
            .map(|t| {
                TimeBatch::new(
                    t,
                    vec![
                        Observation::new(t, 1, 1.0, vec![0.3], 1),
                        Observation::new(t, 2, 0.0, vec![0.6], 0),
                    ],
                )
            })
            .collect()
    }

    fn unit() -> TuningInputs {
        TuningInputs {
            sigma: 1.0,
            n: 1.0,
            d: 1,
            w: 1.0,
            delta: 1.0,
            gamma: std::f64::consts::E,
            gamma_alpha: 2.0,
            kappa: 1.0,
        }
    }

    #[test]
    fn flat_stream_is_always_censored() {
        // The flat stream has different x for the two subjects, so the
        // estimates are equal constants in both halves.
        let config = DetectorConfig::new(2, 1.0, 0.1, PropensityModel::constant(0.5));
        let mut spec = CalibrationSpec::new(5.0, 1);
        spec.n_mc = 7;
        let arl = estimate_arl(&flat_source, &config, &spec).unwrap();
        assert_eq!(arl.censored, 7);
        assert_eq!(arl.mean, spec.horizon() as f64);
        assert!(arl.is_lower_bound());

        spec.search = EpsilonSearch::Grid {
            values: vec![0.3, 0.1, 0.2],
        };
        let res = calibrate_epsilon(&flat_source, &config, &spec).unwrap();
        assert_eq!(res.epsilon, 0.1);
    }

    #[test]
    fn zero_threshold_alarms_at_first_statistic() {
        let config = DetectorConfig::new(3, 1.0, 0.0, PropensityModel::constant(0.5));
        let mut spec = CalibrationSpec::new(5.0, 1);
        spec.n_mc = 4;
        let arl = estimate_arl(&flat_source, &config, &spec).unwrap();
        assert_eq!(arl.mean, 6.0);
        assert_eq!(arl.sd, 0.0);
        assert_eq!(arl.censored, 0);
    }

    #[test]
    fn spec_validation() {
        let mut spec = CalibrationSpec::new(20.0, 0);
        assert_eq!(spec.horizon(), 200);
        spec.horizon = Some(10);
        assert!(spec.validate().is_err());
        spec.horizon = None;
        spec.n_mc = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unit_plug_in_values() {
        let i = unit();
        assert_eq!(i.gamma1(), 1.0);
        assert!((advisory_bandwidth(&i, ChangeCase::NoChange, 1.0) - 1.0).abs() < 1e-12);
        let i = TuningInputs {
            gamma: std::f64::consts::E,
            delta: 1.0,
            ..unit()
        };
        assert!((advisory_window_raw(&i, 1.0) - 1.0).abs() < 1e-12);
        assert_eq!(advisory_window(&i, 1.0), 1);
    }

    #[test]
    fn bandwidth_homogeneity_in_variance() {
        let i = TuningInputs {
            sigma: 0.7,
            n: 40.0,
            d: 3,
            w: 3.0,
            delta: 50.0,
            gamma: 20.0,
            gamma_alpha: 1.5,
            kappa: 1.0,
        };
        let scaled = TuningInputs {
            sigma: 0.7 * 2f64.sqrt(),
            ..i
        };
        for case in [ChangeCase::NoChange, ChangeCase::OneChange] {
            let ratio = advisory_bandwidth(&scaled, case, 1.0) / advisory_bandwidth(&i, case, 1.0);
            assert!((ratio - 2f64.powf(1.0 / 5.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_limit_second_branch_dominates() {
        for (w, gamma) in [(5.0, 20.0), (8.0, 30.0), (50.0, 2.0)] {
            let i = TuningInputs {
                w,
                gamma,
                gamma_alpha: f64::INFINITY,
                n: 40.0,
                d: 2,
                ..unit()
            };
            assert_eq!(i.gamma1(), 2.0);
            let l = (gamma * w).ln();
            assert!(w >= l);
            let independent = (l / (40.0 * w)).powf(0.25);
            assert!(
                (advisory_bandwidth(&i, ChangeCase::NoChange, 1.0) - independent).abs() < 1e-12
            );
        }
    }

    #[test]
    fn window_monotone_in_kappa_and_n() {
        let base = TuningInputs {
            sigma: 2.0,
            n: 10.0,
            d: 2,
            w: 1.0,
            delta: 100.0,
            gamma: 50.0,
            gamma_alpha: f64::INFINITY,
            kappa: 0.5,
        };
        let mut prev = f64::INFINITY;
        for k in [0.2, 0.4, 0.8, 1.6, 3.2] {
            let v = advisory_window_raw(&TuningInputs { kappa: k, ..base }, 1.0);
            assert!(v < prev);
            prev = v;
        }
        // First branch dominates here; doubling n halves it.
        let a = advisory_window_raw(&base, 1.0);
        let b = advisory_window_raw(&TuningInputs { n: 20.0, ..base }, 1.0);
        let l = 100f64.ln();
        let scale = 4.0 / (10.0 * 0.5f64.powi(4));
        assert!(scale * l / 2.0 > (scale * l / 2.0).sqrt());
        assert!((a / b - 2.0).abs() < 1e-12);
    }
}
