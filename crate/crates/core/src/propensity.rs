//! Propensity-score models.
//!
//! Three variants are supported: a known function of the covariates, a pooled
//! constant (the fraction of treated observations), and a logistic model fitted
//! by maximum likelihood. Every prediction is clipped to `[clip, 1 - clip]` so
//! that inverse-propensity weights downstream stay finite.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TimeBatch;

/// Overlap clip used when none is given.
pub const DEFAULT_CLIP: f64 = 0.01;

/// Coefficient magnitude beyond which the likelihood is treated as unbounded.
const BETA_CAP: f64 = 1e3;
/// Largest residual `|z - p|` treated as a perfect fit.
const SEPARATION_RESIDUAL: f64 = 1e-6;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropensityError {
    #[error("no observations to fit")]
    EmptyData,

    #[error("need at least {need} observations, got {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("dimension mismatch: model expects {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("complete or quasi-complete separation: likelihood has no finite maximizer")]
    Separation,

    #[error("Newton iterations did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("clip must lie in (0, 0.5), got {0}")]
    InvalidClip(f64),

    #[error("known propensity functions cannot be serialized")]
    NotSerializable,

    #[error("invalid model document: {0}")]
    InvalidDocument(String),
}

type PropensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A user-supplied propensity function.
#[derive(Clone)]
pub struct KnownPropensity {
    name: String,
    f: PropensityFn,
}

impl KnownPropensity {
    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for KnownPropensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnownPropensity")
            .field("name", &self.name)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum PropensityKind {
    Known(KnownPropensity),
    Constant {
        p: f64,
    },
    Logistic {
        beta: Vec<f64>,
        with_intercept: bool,
    },
}

#[derive(Debug, Clone)]
pub struct PropensityModel {
    kind: PropensityKind,
    clip: f64,
}

fn check_clip(clip: f64) -> Result<f64, PropensityError> {
    if clip > 0.0 && clip < 0.5 {
        Ok(clip)
    } else {
        Err(PropensityError::InvalidClip(clip))
    }
}

#[inline]
fn clip_to(p: f64, clip: f64) -> f64 {
    p.max(clip).min(1.0 - clip)
}

/// Logistic link written to avoid overflow for large |eta|.
#[inline]
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(eta)).
#[inline]
fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

impl PropensityModel {
    pub fn known<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: PropensityKind::Known(KnownPropensity {
                name: name.into(),
                f: Arc::new(f),
            }),
            clip: DEFAULT_CLIP,
        }
    }

    /// A constant score; `p` is clipped on construction.
    pub fn constant(p: f64) -> Self {
        Self {
            kind: PropensityKind::Constant {
                p: clip_to(p, DEFAULT_CLIP),
            },
            clip: DEFAULT_CLIP,
        }
    }

    pub fn logistic(beta: Vec<f64>, with_intercept: bool) -> Self {
        Self {
            kind: PropensityKind::Logistic {
                beta,
                with_intercept,
            },
            clip: DEFAULT_CLIP,
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Result<Self, PropensityError> {
        self.clip = check_clip(clip)?;
        if let PropensityKind::Constant { p } = &mut self.kind {
            *p = clip_to(*p, self.clip);
        }
        Ok(self)
    }

    pub fn kind(&self) -> &PropensityKind {
        &self.kind
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// Evaluates the model at `x` and clips to `[clip, 1 - clip]`.
    pub fn predict(&self, x: &[f64]) -> Result<f64, PropensityError> {
        let raw = match &self.kind {
            PropensityKind::Known(k) => (k.f)(x),
            PropensityKind::Constant { p } => *p,
            PropensityKind::Logistic {
                beta,
                with_intercept,
            } => {
                let expected = beta.len() - usize::from(*with_intercept);
                if x.len() != expected {
                    return Err(PropensityError::DimensionMismatch {
                        expected,
                        found: x.len(),
                    });
                }
                let mut eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
                if *with_intercept {
                    eta += beta[expected];
                }
                sigmoid(eta)
            }
        };
        // NaN from a user function falls back to the lower clip.
        Ok(if raw.is_nan() {
            self.clip
        } else {
            clip_to(raw, self.clip)
        })
    }

    pub fn to_document(&self) -> Result<PropensityDocument, PropensityError> {
        match &self.kind {
            PropensityKind::Known(_) => Err(PropensityError::NotSerializable),
            PropensityKind::Constant { p } => Ok(PropensityDocument {
                variant: PropensityVariant::Constant,
                beta: None,
                p: Some(*p),
                clip: self.clip,
                with_intercept: false,
            }),
            PropensityKind::Logistic {
                beta,
                with_intercept,
            } => Ok(PropensityDocument {
                variant: PropensityVariant::Logistic,
                beta: Some(beta.clone()),
                p: None,
                clip: self.clip,
                with_intercept: *with_intercept,
            }),
        }
    }

    pub fn to_json(&self) -> Result<String, PropensityError> {
        Ok(serde_json::to_string(&self.to_document()?).expect("document serializes"))
    }

    pub fn from_json(s: &str) -> Result<Self, PropensityError> {
        let doc: PropensityDocument =
            serde_json::from_str(s).map_err(|e| PropensityError::InvalidDocument(e.to_string()))?;
        doc.try_into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropensityVariant {
    Constant,
    Logistic,
}

/// Serialized form of a fitted model: `{variant, beta?, p?, clip, with_intercept}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityDocument {
    pub variant: PropensityVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default)]
    pub with_intercept: bool,
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

impl TryFrom<PropensityDocument> for PropensityModel {
    type Error = PropensityError;

    fn try_from(doc: PropensityDocument) -> Result<Self, Self::Error> {
        let model = match doc.variant {
            PropensityVariant::Constant => {
                let p = doc.p.ok_or_else(|| {
                    PropensityError::InvalidDocument("constant model needs `p`".into())
                })?;
                if !(p > 0.0 && p < 1.0) {
                    return Err(PropensityError::InvalidDocument(format!(
                        "p={p} outside (0,1)"
                    )));
                }
                PropensityModel::constant(p)
            }
            PropensityVariant::Logistic => {
                let beta = doc.beta.ok_or_else(|| {
                    PropensityError::InvalidDocument("logistic model needs `beta`".into())
                })?;
                if beta.is_empty() || beta.iter().any(|b| !b.is_finite()) {
                    return Err(PropensityError::InvalidDocument(
                        "beta must be finite and non-empty".into(),
                    ));
                }
                PropensityModel::logistic(beta, doc.with_intercept)
            }
        };
        model.with_clip(doc.clip)
    }
}

impl Serialize for PropensityModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_document()
            .map_err(serde::ser::Error::custom)?
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PropensityModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        PropensityDocument::deserialize(deserializer)?
            .try_into()
            .map_err(serde::de::Error::custom)
    }
}

/// Pooled estimate: the fraction of treated observations across all batches.
pub fn fit_constant(data: &[TimeBatch], clip: f64) -> Result<PropensityModel, PropensityError> {
    let clip = check_clip(clip)?;
    let (mut treated, mut total) = (0usize, 0usize);
    for row in data.iter().flat_map(|b| &b.rows) {
        treated += usize::from(row.treated());
        total += 1;
    }
    if total == 0 {
        return Err(PropensityError::EmptyData);
    }
    PropensityModel::constant(treated as f64 / total as f64).with_clip(clip)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticOptions {
    pub with_intercept: bool,
    pub tol: f64,
    pub max_iter: usize,
    pub clip: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            with_intercept: false,
            tol: 1e-8,
            max_iter: 100,
            clip: DEFAULT_CLIP,
        }
    }
}

/// Design matrix and responses for the logistic likelihood
/// `sum_i z_i x_i'b - log(1 + exp(x_i'b))`.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    rows: Vec<Vec<f64>>,
    z: Vec<f64>,
    with_intercept: bool,
}

/// Result of a converged Newton fit.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub grad_sup_norm: f64,
    /// Log-likelihood after every accepted step, starting from `beta = 0`.
    pub trace: Vec<f64>,
}

impl LogisticProblem {
    pub fn from_batches(data: &[TimeBatch], with_intercept: bool) -> Self {
        let mut rows = Vec::new();
        let mut z = Vec::new();
        for row in data.iter().flat_map(|b| &b.rows) {
            let mut x = row.x.clone();
            if with_intercept {
                x.push(1.0);
            }
            rows.push(x);
            z.push(f64::from(row.z));
        }
        Self {
            rows,
            z,
            with_intercept,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn with_intercept(&self) -> bool {
        self.with_intercept
    }

    /// Number of coefficients (covariates plus the optional intercept).
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn eta(x: &[f64], beta: &[f64]) -> f64 {
        x.iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    pub fn log_likelihood(&self, beta: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.z)
            .map(|(x, &z)| {
                let eta = Self::eta(x, beta);
                z * eta - softplus(eta)
            })
            .sum()
    }

    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for (x, &z) in self.rows.iter().zip(&self.z) {
            let r = z - sigmoid(Self::eta(x, beta));
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += r * xj;
            }
        }
        g
    }

    fn neg_hessian(&self, beta: &[f64]) -> DMatrix<f64> {
        let p = self.dim();
        let mut h = DMatrix::zeros(p, p);
        for x in &self.rows {
            let s = sigmoid(Self::eta(x, beta));
            let w = s * (1.0 - s);
            for a in 0..p {
                for b in 0..=a {
                    h[(a, b)] += w * x[a] * x[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        h
    }

    fn perfectly_fitted(&self, beta: &[f64]) -> bool {
        self.rows
            .iter()
            .zip(&self.z)
            .all(|(x, &z)| (z - sigmoid(Self::eta(x, beta))).abs() < SEPARATION_RESIDUAL)
    }

    /// Damped Newton ascent from `beta = 0`. Each accepted step increases the
    /// log-likelihood (or, within rounding noise, reduces the score);
    /// otherwise the step is halved, at most 30 times.
    pub fn fit(&self, tol: f64, max_iter: usize) -> Result<LogisticFit, PropensityError> {
        let p = self.dim();
        if self.is_empty() {
            return Err(PropensityError::EmptyData);
        }
        if self.len() < p {
            return Err(PropensityError::InsufficientData {
                need: p,
                got: self.len(),
            });
        }
        let mut beta = vec![0.0; p];
        let mut ll = self.log_likelihood(&beta);
        let mut trace = vec![ll];
        for iter in 0..=max_iter {
            let g = self.gradient(&beta);
            let sup = sup_norm(&g);
            if sup <= tol {
                // A vanishing score with every row fitted almost exactly means
                // the likelihood has no finite maximizer.
                if self.perfectly_fitted(&beta) {
                    return Err(PropensityError::Separation);
                }
                return Ok(LogisticFit {
                    beta,
                    iterations: iter,
                    log_likelihood: ll,
                    grad_sup_norm: sup,
                    trace,
                });
            }
            if iter == max_iter {
                break;
            }
            if self.perfectly_fitted(&beta) {
                return Err(PropensityError::Separation);
            }
            let chol = self
                .neg_hessian(&beta)
                .cholesky()
                .ok_or(PropensityError::Separation)?;
            let step = chol.solve(&DVector::from_vec(g));
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let cand: Vec<f64> = beta
                    .iter()
                    .zip(step.iter())
                    .map(|(b, s)| b + scale * s)
                    .collect();
                let cand_ll = self.log_likelihood(&cand);
                // Near the optimum the likelihood change drops below its own
                // rounding error; there a step is judged by the score instead.
                let within_noise = cand_ll >= ll - 1e-12 * (1.0 + ll.abs())
                    && sup_norm(&self.gradient(&cand)) < sup;
                if cand_ll.is_finite() && (cand_ll > ll || within_noise) {
                    beta = cand;
                    ll = cand_ll;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                return Err(PropensityError::NoConvergence(iter + 1));
            }
            trace.push(ll);
            if beta.iter().any(|b| !b.is_finite() || b.abs() > BETA_CAP) {
                return Err(PropensityError::Separation);
            }
        }
        Err(PropensityError::NoConvergence(max_iter))
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Maximum-likelihood logistic propensity model fitted by damped Newton.
pub fn fit_logistic(
    data: &[TimeBatch],
    opts: LogisticOptions,
) -> Result<PropensityModel, PropensityError> {
    let clip = check_clip(opts.clip)?;
    let problem = LogisticProblem::from_batches(data, opts.with_intercept);
    let fit = problem.fit(opts.tol, opts.max_iter)?;
    PropensityModel::logistic(fit.beta, opts.with_intercept).with_clip(clip)
}

/// How a detector obtains its propensity model for a given stream.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "wiring")]
pub enum PropensityFit {
    /// Keep whatever model the detector was configured with.
    #[default]
    AsConfigured,
    /// Fit on the whole stream that is then monitored.
    Pooled { method: FitMethod },
    /// Fit on the first `periods` batches (default `2w`), which are then
    /// excluded from monitoring.
    BurnIn {
        method: FitMethod,
        #[serde(default)]
        periods: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Constant,
    Logistic,
    LogisticWithIntercept,
}

impl FitMethod {
    pub fn fit(self, data: &[TimeBatch]) -> Result<PropensityModel, PropensityError> {
        match self {
            FitMethod::Constant => fit_constant(data, DEFAULT_CLIP),
            FitMethod::Logistic => fit_logistic(data, LogisticOptions::default()),
            FitMethod::LogisticWithIntercept => fit_logistic(
                data,
                LogisticOptions {
                    with_intercept: true,
                    ..LogisticOptions::default()
                },
            ),
        }
    }
}

impl PropensityFit {
    /// Returns the fitted model (if this wiring fits one) and how many leading
    /// batches must be skipped by the detector.
    pub fn resolve(
        &self,
        stream: &[TimeBatch],
        w: usize,
    ) -> Result<(Option<PropensityModel>, usize), PropensityError> {
        match *self {
            PropensityFit::AsConfigured => Ok((None, 0)),
            PropensityFit::Pooled { method } => Ok((Some(method.fit(stream)?), 0)),
            PropensityFit::BurnIn { method, periods } => {
                let k = periods.unwrap_or(2 * w).min(stream.len());
                Ok((Some(method.fit(&stream[..k])?), k))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;

    fn batch_from(rows: &[(Vec<f64>, u8)]) -> Vec<TimeBatch> {
        vec![TimeBatch::new(
            1,
            rows.iter()
                .enumerate()
                .map(|(i, (x, z))| Observation::new(1, i as u64 + 1, 0.0, x.clone(), *z))
                .collect(),
        )]
    }

    #[test]
    fn constant_fits() {
        let data = batch_from(&[
            (vec![0.1], 1),
            (vec![0.2], 0),
            (vec![0.3], 1),
            (vec![0.4], 0),
        ]);
        assert_eq!(
            fit_constant(&data, 0.01).unwrap().predict(&[0.5]).unwrap(),
            0.5
        );
        let data = batch_from(&[
            (vec![0.1], 1),
            (vec![0.2], 1),
            (vec![0.3], 1),
            (vec![0.4], 0),
        ]);
        assert_eq!(
            fit_constant(&data, 0.01).unwrap().predict(&[0.5]).unwrap(),
            0.75
        );
        let data = batch_from(&[(vec![0.1], 1), (vec![0.2], 1)]);
        assert_eq!(
            fit_constant(&data, 0.01).unwrap().predict(&[0.5]).unwrap(),
            0.99
        );
        assert_eq!(
            fit_constant(&[], 0.01).unwrap_err(),
            PropensityError::EmptyData
        );
    }

    #[test]
    fn predict_variants() {
        assert_eq!(
            PropensityModel::logistic(vec![0.0, 0.0], false)
                .predict(&[3.0, -1.0])
                .unwrap(),
            0.5
        );
        assert_eq!(
            PropensityModel::known("half", |_| 0.5)
                .predict(&[0.2])
                .unwrap(),
            0.5
        );
        let m = PropensityModel::logistic(vec![10.0, 0.0, 0.0], false);
        assert_eq!(m.predict(&[1.0, 0.0, 0.0]).unwrap(), 0.99);
        assert!(matches!(
            m.predict(&[1.0]),
            Err(PropensityError::DimensionMismatch {
                expected: 3,
                found: 1
            })
        ));
        let m = PropensityModel::logistic(vec![0.0, 2.0], true);
        assert!((m.predict(&[5.0]).unwrap() - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pairs_give_zero_beta() {
        let mut rows = Vec::new();
        for k in 0..5 {
            let x = vec![0.1 + 0.2 * k as f64, 1.0 - 0.15 * k as f64];
            rows.push((x.clone(), 1));
            rows.push((x, 0));
        }
        let model = fit_logistic(&batch_from(&rows), LogisticOptions::default()).unwrap();
        match model.kind() {
            PropensityKind::Logistic { beta, .. } => assert!(beta.iter().all(|b| b.abs() < 1e-12)),
            _ => unreachable!(),
        }
        assert_eq!(model.predict(&[0.7, 0.3]).unwrap(), 0.5);
    }

    #[test]
    fn all_treated_is_separation() {
        let rows: Vec<_> = (0..10)
            .map(|k| (vec![0.05 + 0.1 * k as f64, 0.5], 1))
            .collect();
        assert_eq!(
            fit_logistic(&batch_from(&rows), LogisticOptions::default()).unwrap_err(),
            PropensityError::Separation
        );
    }

    #[test]
    fn too_few_rows() {
        let rows = vec![(vec![0.1, 0.2, 0.3], 1), (vec![0.3, 0.2, 0.1], 0)];
        assert!(matches!(
            fit_logistic(&batch_from(&rows), LogisticOptions::default()),
            Err(PropensityError::InsufficientData { need: 3, got: 2 })
        ));
    }

    #[test]
    fn json_round_trip() {
        let m = PropensityModel::logistic(vec![0.5, -1.25], true)
            .with_clip(0.05)
            .unwrap();
        let s = m.to_json().unwrap();
        let back = PropensityModel::from_json(&s).unwrap();
        assert_eq!(back.to_document().unwrap(), m.to_document().unwrap());
        assert!(s.contains("\"variant\":\"logistic\""));
        let c = PropensityModel::from_json(r#"{"variant":"constant","p":0.3}"#).unwrap();
        assert_eq!(c.predict(&[1.0]).unwrap(), 0.3);
        assert_eq!(c.clip(), DEFAULT_CLIP);
        assert_eq!(
            PropensityModel::known("f", |_| 0.5).to_json().unwrap_err(),
            PropensityError::NotSerializable
        );
    }

    #[test]
    fn invalid_clip() {
        assert!(PropensityModel::constant(0.5).with_clip(0.5).is_err());
        assert!(PropensityModel::constant(0.5).with_clip(0.0).is_err());
    }
}
