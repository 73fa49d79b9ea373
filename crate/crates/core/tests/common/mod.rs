//! Brute-force oracles shared by the integration tests. They are written
//! against the textbook formulas, not against the library internals.

#![allow(dead_code)]

use cate_cpd::model::{Observation, TimeBatch};
use cate_cpd::propensity::PropensityModel;
use cate_cpd::KernelSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum OracleKernel {
    Gaussian,
    Epanechnikov(f64),
}

impl OracleKernel {
    pub fn spec(self) -> KernelSpec {
        match self {
            OracleKernel::Gaussian => KernelSpec::gaussian(),
            OracleKernel::Epanechnikov(l) => KernelSpec::epanechnikov(l),
        }
    }

    /// Kernel weight of `xi` at `x`, up to a constant factor.
    pub fn weight(self, xi: &[f64], x: &[f64], h: f64) -> f64 {
        match self {
            OracleKernel::Gaussian => {
                let mut sq = 0.0;
                for j in 0..x.len() {
                    let u = (xi[j] - x[j]) / h;
                    sq += u * u;
                }
                (-sq / 2.0).exp()
            }
            OracleKernel::Epanechnikov(l) => {
                let mut w = 1.0;
                for j in 0..x.len() {
                    let u = (xi[j] - x[j]) / h / l;
                    if u.abs() > 1.0 {
                        return 0.0;
                    }
                    w *= 1.0 - u * u;
                }
                w
            }
        }
    }
}

/// One-K: kernel-weighted mean of `y (z/p - (1-z)/(1-p))`.
pub fn oracle_nw(
    rows: &[&Observation],
    p: &dyn Fn(&[f64]) -> f64,
    k: OracleKernel,
    h: f64,
    x: &[f64],
) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for r in rows {
        let w = k.weight(&r.x, x, h);
        let pi = p(&r.x);
        let z = r.z as f64;
        num += w * r.y * (z / pi - (1.0 - z) / (1.0 - pi));
        den += w;
    }
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// DK: treated kernel mean minus control kernel mean.
pub fn oracle_dk(rows: &[&Observation], k: OracleKernel, h: f64, x: &[f64]) -> Option<f64> {
    let mut sums = [[0.0; 2]; 2];
    for r in rows {
        let w = k.weight(&r.x, x, h);
        sums[r.z as usize][0] += w * r.y;
        sums[r.z as usize][1] += w;
    }
    if sums[0][1] == 0.0 || sums[1][1] == 0.0 {
        return None;
    }
    Some(sums[1][0] / sums[1][1] - sums[0][0] / sums[0][1])
}

/// Statistic after the last batch: max over every buffered covariate vector
/// of the absolute difference between the two half-window estimates.
pub fn oracle_statistic(
    batches: &[TimeBatch],
    w: usize,
    dk: bool,
    p: &dyn Fn(&[f64]) -> f64,
    k: OracleKernel,
    h: f64,
) -> Option<f64> {
    let buf = &batches[batches.len() - 2 * w..];
    let older: Vec<&Observation> = buf[..w].iter().flat_map(|b| &b.rows).collect();
    let newer: Vec<&Observation> = buf[w..].iter().flat_map(|b| &b.rows).collect();
    let mut best: Option<f64> = None;
    for b in buf {
        for r in &b.rows {
            let est = |rows: &[&Observation]| {
                if dk {
                    oracle_dk(rows, k, h, &r.x)
                } else {
                    oracle_nw(rows, p, k, h, &r.x)
                }
            };
            if let (Some(a), Some(c)) = (est(&older), est(&newer)) {
                let v = (a - c).abs();
                if best.is_none() || v > best.unwrap() {
                    best = Some(v);
                }
            }
        }
    }
    best
}

/// A random small detection problem with at most 30 observations.
pub struct Instance {
    pub batches: Vec<TimeBatch>,
    pub w: usize,
    pub h: f64,
    pub kernel: OracleKernel,
    pub beta: Option<Vec<f64>>,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rng.random_range(1..=3);
        let d = rng.random_range(1..=3);
        let per = rng.random_range(1..=30 / (2 * w)).min(5);
        let batches = (1..=2 * w as u64)
            .map(|t| {
                TimeBatch::new(
                    t,
                    (1..=per as u64)
                        .map(|i| {
                            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
                            let y = rng.random_range(-3.0..3.0);
                            Observation::new(t, i, y, x, u8::from(rng.random_bool(0.5)))
                        })
                        .collect(),
                )
            })
            .collect();
        let kernel = if rng.random_bool(0.5) {
            OracleKernel::Gaussian
        } else {
            OracleKernel::Epanechnikov(rng.random_range(0.5..2.0))
        };
        let beta = rng
            .random_bool(0.5)
            .then(|| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect());
        Self {
            batches,
            w,
            h: rng.random_range(0.05..3.0),
            kernel,
            beta,
        }
    }

    pub fn model(&self) -> PropensityModel {
        match &self.beta {
            Some(b) => PropensityModel::logistic(b.clone(), false),
            None => PropensityModel::constant(0.5),
        }
    }

    /// The model's propensity, recomputed from its definition.
    pub fn propensity(&self) -> impl Fn(&[f64]) -> f64 + '_ {
        move |x: &[f64]| match &self.beta {
            Some(b) => {
                let eta: f64 = x.iter().zip(b).map(|(a, c)| a * c).sum();
                let p = eta.exp() / (1.0 + eta.exp());
                p.clamp(0.01, 0.99)
            }
            None => 0.5,
        }
    }

    pub fn rows(&self) -> Vec<&Observation> {
        self.batches.iter().flat_map(|b| &b.rows).collect()
    }
}

/// Noiseless stream with two units at the same covariate, one treated and
/// one control; the effect is 0 up to `delta` and `kappa` afterwards.
pub fn jump_stream(len: u64, delta: u64, kappa: f64) -> Vec<TimeBatch> {
    (1..=len)
        .map(|t| {
            let tau = if t > delta { kappa } else { 0.0 };
            TimeBatch::new(
                t,
                vec![
                    Observation::new(t, 1, tau, vec![0.5], 1),
                    Observation::new(t, 2, 0.0, vec![0.5], 0),
                ],
            )
        })
        .collect()
}

/// Log-likelihood of the no-intercept logistic model.
pub fn logistic_ll(rows: &[(Vec<f64>, u8)], beta: &[f64]) -> f64 {
    rows.iter()
        .map(|(x, z)| {
            let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            *z as f64 * eta - (1.0 + eta.exp()).ln()
        })
        .sum()
}

/// Maximizes the 2-d logistic likelihood over `[-5, 5]^2` by successively
/// refined grid searches.
pub fn logistic_grid_oracle(rows: &[(Vec<f64>, u8)]) -> [f64; 2] {
    let mut center = [0.0, 0.0];
    let mut half: f64 = 5.0;
    let mut step: f64 = 1e-2;
    for _ in 0..4 {
        let n = (half / step).round() as i64;
        let mut best = (f64::NEG_INFINITY, center);
        for i in -n..=n {
            for j in -n..=n {
                let b = [center[0] + i as f64 * step, center[1] + j as f64 * step];
                let ll = logistic_ll(rows, &b);
                if ll > best.0 {
                    best = (ll, b);
                }
            }
        }
        center = best.1;
        half = 20.0 * step;
        step /= 10.0;
    }
    center
}
