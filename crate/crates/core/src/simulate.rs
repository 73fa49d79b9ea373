//! Generators for the four benchmark scenarios and the one-shot One-K/Two-K
//! comparison dataset.
//!
//! Randomness comes from keyed ChaCha substreams: the key is derived from
//! `(seed, replicate)` and the stream id from `(subject, lane)`, where a lane
//! is one of covariates, treatment, or one of the two potential-outcome error
//! arms. Every number is therefore fixed by its key, independent of the order
//! or thread in which subjects and replicates are generated.

use libm::{erfc, tgamma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Observation, TimeBatch};

/// Propensities are clipped to `[PROPENSITY_FLOOR, 1 - PROPENSITY_FLOOR]`
/// before the Bernoulli draw.
pub const PROPENSITY_FLOOR: f64 = 1e-6;
/// Lower guard on the first coordinate inside `cos(c / x1)`.
pub const X1_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown scenario {0}; expected 1..=4")]
    UnknownScenario(u8),

    #[error("scenario {scenario} needs d >= {need}, got {got}")]
    DimensionTooSmall {
        scenario: u8,
        need: usize,
        got: usize,
    },

    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Randomised trial, quadratic mean, linear effect, iid errors.
    S1,
    /// Beta-shaped propensity, linear mean and effect, MA(3) errors.
    S2,
    /// Randomised trial, oscillating mean, logistic-product effect that doubles.
    S3,
    /// Probit propensity, fast-oscillating mean, linear effect, MA(4) errors.
    S4,
}

impl TryFrom<u8> for Scenario {
    type Error = SimError;

    fn try_from(id: u8) -> Result<Self, Self::Error> {
        match id {
            1 => Ok(Scenario::S1),
            2 => Ok(Scenario::S2),
            3 => Ok(Scenario::S3),
            4 => Ok(Scenario::S4),
            other => Err(SimError::UnknownScenario(other)),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        match s {
            Scenario::S1 => 1,
            Scenario::S2 => 2,
            Scenario::S3 => 3,
            Scenario::S4 => 4,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl Scenario {
    pub fn min_dim(self) -> usize {
        match self {
            Scenario::S1 => 1,
            Scenario::S2 | Scenario::S3 => 2,
            Scenario::S4 => 3,
        }
    }

    /// Whether the true propensity is constant; such scenarios are monitored
    /// with the pooled treated fraction, the others with a logistic fit.
    pub fn randomised(self) -> bool {
        matches!(self, Scenario::S1 | Scenario::S3)
    }
}

/// Moving-average error process: raw innovations for the first `warmup`
/// periods, then `sum_k weights[k] * e_{t-k} / normalizer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorProcessSpec {
    pub weights: Vec<f64>,
    pub normalizer: f64,
    pub warmup: usize,
}

impl ErrorProcessSpec {
    pub fn iid() -> Self {
        Self {
            weights: vec![1.0],
            normalizer: 1.0,
            warmup: 0,
        }
    }

    /// Equal taps over the current and `lags` previous innovations.
    pub fn equal_taps(lags: usize, normalizer: f64) -> Self {
        Self {
            weights: vec![1.0; lags + 1],
            normalizer,
            warmup: lags,
        }
    }

    /// Variance of the moving-average part for unit-variance innovations.
    pub fn stationary_variance(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>() / (self.normalizer * self.normalizer)
    }

    /// Applies the filter to a path of innovations `e_1..e_T`.
    pub fn filter(&self, innovations: &[f64]) -> Vec<f64> {
        let q = self.weights.len();
        innovations
            .iter()
            .enumerate()
            .map(|(idx, &e)| {
                // idx is t - 1
                if idx < self.warmup || idx + 1 < q {
                    e
                } else {
                    self.weights
                        .iter()
                        .enumerate()
                        .map(|(k, w)| w * innovations[idx - k])
                        .sum::<f64>()
                        / self.normalizer
                }
            })
            .collect()
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Euler beta function.
fn beta(a: f64, b: f64) -> f64 {
    tgamma(a) * tgamma(b) / tgamma(a + b)
}

#[inline]
fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// The closed-form ingredients of one scenario at dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioFunctions {
    pub scenario: Scenario,
    pub d: usize,
}

impl ScenarioFunctions {
    pub fn new(scenario: Scenario, d: usize) -> Result<Self, SimError> {
        if d < scenario.min_dim() {
            return Err(SimError::DimensionTooSmall {
                scenario: scenario.into(),
                need: scenario.min_dim(),
                got: d,
            });
        }
        Ok(Self { scenario, d })
    }

    pub fn from_id(id: u8, d: usize) -> Result<Self, SimError> {
        Self::new(Scenario::try_from(id)?, d)
    }

    /// Control-arm mean `mu0(x)`.
    pub fn mu0(&self, x: &[f64]) -> f64 {
        match self.scenario {
            Scenario::S1 => x.iter().map(|v| v * v).sum(),
            Scenario::S2 => 2.0 * x[0] - 1.0,
            Scenario::S3 => (100.0 / x[0].max(X1_GUARD)).cos(),
            Scenario::S4 => (300.0 / x[0].max(X1_GUARD)).cos(),
        }
    }

    /// CATE at period `t` when the change happens after period `delta`
    /// (`None` means no change ever happens).
    pub fn tau(&self, t: u64, delta: Option<u64>, x: &[f64]) -> f64 {
        let post = delta.is_some_and(|d| t > d);
        match self.scenario {
            Scenario::S1 => {
                if post {
                    x[0]
                } else {
                    0.0
                }
            }
            Scenario::S2 => {
                if post {
                    x[0] + x[1] / 2.0
                } else {
                    0.0
                }
            }
            Scenario::S3 => {
                let base = (1.0 + logistic(20.0 * (x[0] - 1.0 / 3.0)))
                    * (1.0 + logistic(20.0 * (x[1] - 1.0 / 3.0)));
                if post {
                    2.0 * base
                } else {
                    base
                }
            }
            Scenario::S4 => {
                if post {
                    2.0 * x[0] + 3.0 * x[1]
                } else {
                    0.0
                }
            }
        }
    }

    /// True propensity score.
    pub fn propensity(&self, x: &[f64]) -> f64 {
        match self.scenario {
            Scenario::S1 | Scenario::S3 => 0.5,
            Scenario::S2 => 0.25 * x[0] * (1.0 - x[0]).powi(4) / beta(2.0, 5.0),
            Scenario::S4 => std_normal_cdf(x[0] - x[1] + x[2]),
        }
    }

    pub fn errors(&self) -> ErrorProcessSpec {
        match self.scenario {
            Scenario::S1 => ErrorProcessSpec::iid(),
            Scenario::S2 | Scenario::S3 => ErrorProcessSpec::equal_taps(3, 4.0),
            Scenario::S4 => ErrorProcessSpec::equal_taps(4, 8.0),
        }
    }
}

/// Independent random lanes per subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Lane {
    Covariates = 0,
    Treatment = 1,
    Arm0 = 2,
    Arm1 = 3,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut s = seed;
    let mut out = splitmix64(&mut s);
    for &p in path {
        s ^= p.wrapping_mul(0xD1B5_4A32_D192_ED03);
        out = splitmix64(&mut s) ^ out.rotate_left(17);
    }
    out
}

/// ChaCha generator for the substream `(seed, replicate, subject, lane)`.
pub fn substream(seed: u64, replicate: u64, subject: u64, lane: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = seed ^ replicate.wrapping_mul(0xA24B_AED4_963E_E407);
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(subject.wrapping_mul(4).wrapping_add(lane));
    rng
}

fn error_path(
    spec: &ErrorProcessSpec,
    horizon: usize,
    seed: u64,
    replicate: u64,
    subject: u64,
    lane: Lane,
) -> Vec<f64> {
    let mut rng = substream(seed, replicate, subject, lane as u64);
    let innovations: Vec<f64> = (0..horizon).map(|_| rng.sample(StandardNormal)).collect();
    spec.filter(&innovations)
}

/// Error paths for both potential-outcome arms, each `n x horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPaths {
    pub arm0: Vec<Vec<f64>>,
    pub arm1: Vec<Vec<f64>>,
}

/// Independent N(0,1) innovations per subject and arm, filtered by `spec`.
pub fn ma_error_paths(spec: &ErrorProcessSpec, horizon: usize, n: usize, seed: u64) -> ErrorPaths {
    let arm = |lane| {
        (1..=n as u64)
            .map(|i| error_path(spec, horizon, seed, 0, i, lane))
            .collect()
    };
    ErrorPaths {
        arm0: arm(Lane::Arm0),
        arm1: arm(Lane::Arm1),
    }
}

/// Full generative description of one simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub d: usize,
    /// Number of periods `T`.
    pub horizon: usize,
    /// Subjects per period.
    pub n: usize,
    /// Last pre-change period; `None` generates change-free data.
    pub delta: Option<u64>,
    pub seed: u64,
    /// Reuse the control-arm errors for the treated arm.
    #[serde(default)]
    pub share_errors: bool,
}

impl ScenarioSpec {
    /// The benchmark setup: `T = 100`, `n = 40`, change after period 50.
    pub fn benchmark(scenario: Scenario, d: usize, seed: u64) -> Self {
        Self {
            scenario,
            d,
            horizon: 100,
            n: 40,
            delta: Some(50),
            seed,
            share_errors: false,
        }
    }

    pub fn without_change(mut self) -> Self {
        self.delta = None;
        self
    }

    pub fn functions(&self) -> Result<ScenarioFunctions, SimError> {
        ScenarioFunctions::new(self.scenario, self.d)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.functions()?;
        if self.horizon == 0 || self.n == 0 {
            return Err(SimError::InvalidSpec(
                "horizon and n must be positive".into(),
            ));
        }
        if let Some(delta) = self.delta {
            if delta < 1 || delta >= self.horizon as u64 {
                return Err(SimError::InvalidSpec(format!(
                    "delta={delta} must satisfy 1 <= delta < T={}",
                    self.horizon
                )));
            }
        }
        Ok(())
    }
}

/// Generates replicate 0 of `spec`.
pub fn generate(spec: &ScenarioSpec) -> Result<Vec<TimeBatch>, SimError> {
    generate_replicate(spec, 0)
}

/// Generates one replicate; distinct replicates use disjoint substreams.
pub fn generate_replicate(spec: &ScenarioSpec, replicate: u64) -> Result<Vec<TimeBatch>, SimError> {
    spec.validate()?;
    let f = spec.functions()?;
    let errors = f.errors();
    let (horizon, d) = (spec.horizon, spec.d);
    let mut batches: Vec<TimeBatch> = (1..=horizon as u64)
        .map(|t| TimeBatch::new(t, Vec::with_capacity(spec.n)))
        .collect();

    for subject in 1..=spec.n as u64 {
        let mut xrng = substream(spec.seed, replicate, subject, Lane::Covariates as u64);
        let mut zrng = substream(spec.seed, replicate, subject, Lane::Treatment as u64);
        let e0 = error_path(&errors, horizon, spec.seed, replicate, subject, Lane::Arm0);
        let e1 = if spec.share_errors {
            e0.clone()
        } else {
            error_path(&errors, horizon, spec.seed, replicate, subject, Lane::Arm1)
        };
        for (idx, batch) in batches.iter_mut().enumerate() {
            let t = batch.t;
            let x: Vec<f64> = (0..d).map(|_| xrng.random::<f64>()).collect();
            let p = f
                .propensity(&x)
                .clamp(PROPENSITY_FLOOR, 1.0 - PROPENSITY_FLOOR);
            let z = u8::from(zrng.random::<f64>() < p);
            let mu0 = f.mu0(&x);
            let y = if z == 1 {
                mu0 + f.tau(t, spec.delta, &x) + e1[idx]
            } else {
                mu0 + e0[idx]
            };
            batch.rows.push(Observation::new(t, subject, y, x, z));
        }
    }
    Ok(batches)
}

/// Options for the one-shot comparison dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveDataOptions {
    /// Include the oscillating mean `cos(100/x)`.
    pub with_mean: bool,
    /// Standard deviation of the iid Gaussian errors.
    pub noise_sd: f64,
}

impl Default for CurveDataOptions {
    fn default() -> Self {
        Self {
            with_mean: true,
            noise_sd: 1.0,
        }
    }
}

/// True effect of the comparison dataset, `1 / (1 + exp(-20 (x - 1/3)))`.
pub fn curve_tau(x: f64) -> f64 {
    logistic(20.0 * (x - 1.0 / 3.0))
}

/// Mean of the comparison dataset, `cos(100 / x)`.
pub fn curve_mu0(x: f64) -> f64 {
    (100.0 / x.max(X1_GUARD)).cos()
}

/// Single-period cross-section with `d = 1`, `pi = 0.5` and N(0,1) errors.
pub fn curve_dataset(n: usize, seed: u64) -> TimeBatch {
    curve_dataset_with(n, seed, CurveDataOptions::default())
}

pub fn curve_dataset_with(n: usize, seed: u64, opts: CurveDataOptions) -> TimeBatch {
    let rows = (1..=n as u64)
        .map(|i| {
            let x = substream(seed, 0, i, Lane::Covariates as u64).random::<f64>();
            let z = u8::from(substream(seed, 0, i, Lane::Treatment as u64).random::<f64>() < 0.5);
            let lane = if z == 1 { Lane::Arm1 } else { Lane::Arm0 };
            let e: f64 = substream(seed, 0, i, lane as u64).sample(StandardNormal);
            let mu0 = if opts.with_mean { curve_mu0(x) } else { 0.0 };
            let y = mu0 + if z == 1 { curve_tau(x) } else { 0.0 } + opts.noise_sd * e;
            Observation::new(1, i, y, vec![x], z)
        })
        .collect();
    TimeBatch::new(1, rows)
}
