//! Smoothing kernels and Nadaraya–Watson CATE estimators.
//!
//! Two estimators of the conditional average treatment effect are provided:
//!
//! * [`nw_cate`] ("One-K") smooths the inverse-propensity transformed outcome
//!   `y * (z/p - (1-z)/(1-p))`, whose conditional mean is the CATE;
//! * [`dk_cate`] ("DK", or "Two-K") smooths the treated and control outcomes
//!   separately and takes the difference.
//!
//! Both are ratios of kernel-weighted sums, so multiplying the kernel by a
//! positive constant leaves them unchanged. The estimators therefore work with
//! the unnormalized kernel profile (`Kernel::weight`), which equals 1 at the
//! origin for every family; [`kernel_eval`] returns the normalized density.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TimeBatch;
use crate::propensity::{PropensityError, PropensityModel};

/// Windows with more terms than this use compensated summation.
pub const COMPENSATED_SUM_THRESHOLD: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("propensity {0} outside (0, 1)")]
    PropensityOutOfRange(f64),

    #[error("no kernel mass at the query point")]
    NoMass,

    #[error("no kernel mass in the {0} group at the query point")]
    NoGroupMass(Group),

    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),

    #[error("estimation window is empty")]
    EmptyWindow,

    #[error("window batches are not contiguous in time")]
    NonContiguousWindow,

    #[error(transparent)]
    Propensity(#[from] PropensityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Treated,
    Control,
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Group::Treated => "treated",
            Group::Control => "control",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// Radial `exp(-|u|^2 / 2)`.
    Gaussian,
    /// Product of `(1 - (u_j/L)^2)_+`.
    EpanechnikovProduct,
    /// Indicator of `|u|_inf <= L`.
    Boxcar,
    /// Product of `(1 - |u_j|/L)_+`.
    TruncatedTriangular,
}

/// Kernel weights as used by the estimators.
pub trait Kernel: Sync {
    /// Weight of an observation at `xi` for a query at `x` with bandwidth `h`,
    /// i.e. `k((xi - x) / h)` up to a positive constant.
    fn weight(&self, xi: &[f64], x: &[f64], h: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Support radius `L` for the compact families; ignored by the Gaussian.
    #[serde(default = "default_support")]
    pub support: f64,
}

fn default_support() -> f64 {
    1.0
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::gaussian()
    }
}

impl KernelSpec {
    pub fn gaussian() -> Self {
        Self {
            family: KernelFamily::Gaussian,
            support: 1.0,
        }
    }

    pub fn epanechnikov(support: f64) -> Self {
        Self {
            family: KernelFamily::EpanechnikovProduct,
            support,
        }
    }

    pub fn boxcar(support: f64) -> Self {
        Self {
            family: KernelFamily::Boxcar,
            support,
        }
    }

    pub fn triangular(support: f64) -> Self {
        Self {
            family: KernelFamily::TruncatedTriangular,
            support,
        }
    }

    pub fn is_compact(&self) -> bool {
        self.family != KernelFamily::Gaussian
    }

    /// Unnormalized profile at `u`; 1 at the origin.
    pub fn profile(&self, u: &[f64]) -> f64 {
        let l = self.support;
        match self.family {
            KernelFamily::Gaussian => (-0.5 * u.iter().map(|v| v * v).sum::<f64>()).exp(),
            KernelFamily::EpanechnikovProduct => u
                .iter()
                .map(|v| {
                    let r = v / l;
                    if r.abs() > 1.0 {
                        0.0
                    } else {
                        1.0 - r * r
                    }
                })
                .product(),
            KernelFamily::Boxcar => {
                if u.iter().all(|v| v.abs() <= l) {
                    1.0
                } else {
                    0.0
                }
            }
            KernelFamily::TruncatedTriangular => {
                u.iter().map(|v| (1.0 - v.abs() / l).max(0.0)).product()
            }
        }
    }

    /// Constant turning the profile into a density on `R^d`.
    pub fn normalizer(&self, d: usize) -> f64 {
        let l = self.support;
        let per_coord = match self.family {
            KernelFamily::Gaussian => (2.0 * PI).sqrt().recip(),
            KernelFamily::EpanechnikovProduct => 0.75 / l,
            KernelFamily::Boxcar => 0.5 / l,
            KernelFamily::TruncatedTriangular => 1.0 / l,
        };
        per_coord.powi(d as i32)
    }
}

impl Kernel for KernelSpec {
    #[inline]
    fn weight(&self, xi: &[f64], x: &[f64], h: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let sq: f64 = xi
                    .iter()
                    .zip(x)
                    .map(|(a, b)| {
                        let u = (a - b) / h;
                        u * u
                    })
                    .sum();
                (-0.5 * sq).exp()
            }
            _ => {
                let mut u = [0.0; 16];
                if xi.len() <= u.len() {
                    for ((slot, a), b) in u.iter_mut().zip(xi).zip(x) {
                        *slot = (a - b) / h;
                    }
                    self.profile(&u[..xi.len()])
                } else {
                    let u: Vec<f64> = xi.iter().zip(x).map(|(a, b)| (a - b) / h).collect();
                    self.profile(&u)
                }
            }
        }
    }
}

/// A kernel multiplied by a positive constant.
#[derive(Debug, Clone, Copy)]
pub struct Scaled<K> {
    pub factor: f64,
    pub inner: K,
}

impl<K: Kernel> Kernel for Scaled<K> {
    fn weight(&self, xi: &[f64], x: &[f64], h: f64) -> f64 {
        self.factor * self.inner.weight(xi, x, h)
    }
}

/// Normalized kernel density `k(u)`; compact families vanish for `|u|_inf > L`.
pub fn kernel_eval(spec: &KernelSpec, u: &[f64]) -> f64 {
    spec.normalizer(u.len()) * spec.profile(u)
}

/// Inverse-propensity transformed outcome `y * (z/p - (1-z)/(1-p))`.
#[inline]
pub fn transformed_outcome(y: f64, treated: bool, p: f64) -> Result<f64, KernelError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(KernelError::PropensityOutOfRange(p));
    }
    Ok(if treated { y / p } else { -y / (1.0 - p) })
}

/// Running sum, compensated (Neumaier) for long windows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Accumulator {
    sum: f64,
    comp: f64,
    compensated: bool,
}

impl Accumulator {
    pub(crate) fn for_len(n: usize) -> Self {
        Self {
            sum: 0.0,
            comp: 0.0,
            compensated: n > COMPENSATED_SUM_THRESHOLD,
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, v: f64) {
        if self.compensated {
            let t = self.sum + v;
            if self.sum.abs() >= v.abs() {
                self.comp += (self.sum - t) + v;
            } else {
                self.comp += (v - t) + self.sum;
            }
            self.sum = t;
        } else {
            self.sum += v;
        }
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Kernel-weighted mean of `values` at `x`; `None` when every weight is zero.
pub fn weighted_mean<'a, K, I>(kernel: &K, h: f64, x: &[f64], points: I, len: usize) -> Option<f64>
where
    K: Kernel + ?Sized,
    I: IntoIterator<Item = (&'a [f64], f64)>,
{
    let mut num = Accumulator::for_len(len);
    let mut den = Accumulator::for_len(len);
    for (xi, v) in points {
        let w = kernel.weight(xi, x, h);
        if w != 0.0 {
            num.add(w * v);
            den.add(w);
        }
    }
    let den = den.value();
    (den != 0.0).then(|| num.value() / den)
}

/// Leave-one-out cross-validation error of the Nadaraya–Watson regression
/// of `ys` on `xs`: the mean of `(y_i - m_{-i}(x_i))^2` over the points whose
/// leave-one-out estimate exists. `None` when no point has neighbours.
pub fn loocv_error<K: Kernel + ?Sized>(
    kernel: &K,
    h: f64,
    xs: &[&[f64]],
    ys: &[f64],
) -> Option<f64> {
    use rayon::prelude::*;
    let (sse, used) = (0..xs.len())
        .into_par_iter()
        .filter_map(|i| {
            let others = xs
                .iter()
                .zip(ys)
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, (x, &y))| (*x, y));
            weighted_mean(kernel, h, xs[i], others, xs.len()).map(|m| (ys[i] - m).powi(2))
        })
        .fold(|| (0.0, 0usize), |(s, n), e| (s + e, n + 1))
        .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    (used > 0).then(|| sse / used as f64)
}

/// The candidate bandwidth with the smallest [`loocv_error`].
pub fn select_bandwidth<K: Kernel + ?Sized>(
    kernel: &K,
    candidates: &[f64],
    xs: &[&[f64]],
    ys: &[f64],
) -> Option<f64> {
    candidates
        .iter()
        .filter_map(|&h| loocv_error(kernel, h, xs, ys).map(|e| (h, e)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(h, _)| h)
}

fn check_bandwidth(h: f64) -> Result<(), KernelError> {
    if h > 0.0 && !h.is_nan() {
        Ok(())
    } else {
        Err(KernelError::InvalidBandwidth(h))
    }
}

/// A contiguous run of batches `[t_start, t_end]` used for one estimate.
#[derive(Debug, Clone, Copy)]
pub struct EstimateWindow<'a> {
    batches: &'a [TimeBatch],
}

impl<'a> EstimateWindow<'a> {
    pub fn new(batches: &'a [TimeBatch]) -> Result<Self, KernelError> {
        if batches.is_empty() {
            return Err(KernelError::EmptyWindow);
        }
        if batches.windows(2).any(|w| w[1].t != w[0].t + 1) {
            return Err(KernelError::NonContiguousWindow);
        }
        Ok(Self { batches })
    }

    pub fn batches(&self) -> &'a [TimeBatch] {
        self.batches
    }

    pub fn t_start(&self) -> u64 {
        self.batches[0].t
    }

    pub fn t_end(&self) -> u64 {
        self.batches[self.batches.len() - 1].t
    }

    /// Number of periods covered.
    pub fn width(&self) -> usize {
        self.batches.len()
    }

    pub fn n_obs(&self) -> usize {
        self.batches.iter().map(TimeBatch::len).sum()
    }
}

/// One-K estimate at `x`: Nadaraya–Watson regression of the transformed
/// outcome, with propensities taken from `prop` at each observation.
pub fn nw_cate<K: Kernel + ?Sized>(
    window: &EstimateWindow<'_>,
    prop: &PropensityModel,
    kernel: &K,
    h: f64,
    x: &[f64],
) -> Result<f64, KernelError> {
    check_bandwidth(h)?;
    let rows: Vec<_> = window.batches.iter().flat_map(|b| &b.rows).collect();
    let mut yhat = Vec::with_capacity(rows.len());
    for row in &rows {
        yhat.push(transformed_outcome(
            row.y,
            row.treated(),
            prop.predict(&row.x)?,
        )?);
    }
    weighted_mean(
        kernel,
        h,
        x,
        rows.iter().zip(&yhat).map(|(r, &v)| (r.x.as_slice(), v)),
        rows.len(),
    )
    .ok_or(KernelError::NoMass)
}

/// DK estimate at `x`: treated-group mean minus control-group mean.
pub fn dk_cate<K: Kernel + ?Sized>(
    window: &EstimateWindow<'_>,
    kernel: &K,
    h: f64,
    x: &[f64],
) -> Result<f64, KernelError> {
    check_bandwidth(h)?;
    let rows = || window.batches.iter().flat_map(|b| &b.rows);
    let n = window.n_obs();
    let group_mean = |treated: bool| {
        weighted_mean(
            kernel,
            h,
            x,
            rows()
                .filter(|r| r.treated() == treated)
                .map(|r| (r.x.as_slice(), r.y)),
            n,
        )
    };
    let m1 = group_mean(true).ok_or(KernelError::NoGroupMass(Group::Treated))?;
    let m0 = group_mean(false).ok_or(KernelError::NoGroupMass(Group::Control))?;
    Ok(m1 - m0)
}
