//! Panel records and stream validation.
//!
//! A stream is a sequence of [`TimeBatch`]es, one per period, each holding the
//! cross-section of subjects observed at that period. Time indices must be
//! contiguous: the detector's window arithmetic assumes exactly one batch per
//! period, so gaps are rejected rather than imputed.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while validating or decoding a stream.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("non-contiguous time index: expected t={expected}, found t={found}")]
    NonContiguousTime { expected: u64, found: u64 },

    #[error(
        "dimension mismatch at t={t}, subject {subject}: expected d={expected}, found {found}"
    )]
    DimensionMismatch {
        t: u64,
        subject: u64,
        expected: usize,
        found: usize,
    },

    #[error("duplicate subject {subject} at t={t}")]
    DuplicateSubject { t: u64, subject: u64 },

    #[error("non-binary treatment z={z} at t={t}, subject {subject}")]
    NonBinaryTreatment { t: u64, subject: u64, z: f64 },

    #[error("non-finite value at t={t}, subject {subject}")]
    NonFinite { t: u64, subject: u64 },

    #[error("row at t={row_t} filed under batch t={batch_t}")]
    MixedTime { batch_t: u64, row_t: u64 },

    #[error("invalid stream metadata: {0}")]
    InvalidMeta(String),
}

/// One subject's record at one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: u64,
    pub subject: u64,
    pub y: f64,
    pub x: Vec<f64>,
    pub z: u8,
}

impl Observation {
    pub fn new(t: u64, subject: u64, y: f64, x: Vec<f64>, z: u8) -> Self {
        Self {
            t,
            subject,
            y,
            x,
            z,
        }
    }

    #[inline]
    pub fn treated(&self) -> bool {
        self.z == 1
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// The cross-section of subjects observed at a single period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBatch {
    pub t: u64,
    pub rows: Vec<Observation>,
}

impl TimeBatch {
    pub fn new(t: u64, rows: Vec<Observation>) -> Self {
        Self { t, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Covariate dimension of the first row, if any.
    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(Observation::dim)
    }

    /// Checks the per-batch invariants: shared time index, distinct subjects,
    /// a common covariate dimension `d`, binary treatment and finite values.
    pub fn check(&self, d: usize) -> Result<(), StreamError> {
        let mut seen = HashSet::with_capacity(self.rows.len());
        for row in &self.rows {
            if row.t != self.t {
                return Err(StreamError::MixedTime {
                    batch_t: self.t,
                    row_t: row.t,
                });
            }
            if !seen.insert(row.subject) {
                return Err(StreamError::DuplicateSubject {
                    t: self.t,
                    subject: row.subject,
                });
            }
            if row.x.len() != d {
                return Err(StreamError::DimensionMismatch {
                    t: self.t,
                    subject: row.subject,
                    expected: d,
                    found: row.x.len(),
                });
            }
            if row.z > 1 {
                return Err(StreamError::NonBinaryTreatment {
                    t: self.t,
                    subject: row.subject,
                    z: f64::from(row.z),
                });
            }
            if !row.y.is_finite() || row.x.iter().any(|v| !v.is_finite()) {
                return Err(StreamError::NonFinite {
                    t: self.t,
                    subject: row.subject,
                });
            }
        }
        Ok(())
    }
}

/// Stream-level metadata: covariate dimension, panel width and covariate box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub d: usize,
    /// Subjects per period, when declared. Panels may be unbalanced.
    pub n: Option<usize>,
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
}

impl StreamMeta {
    /// Metadata over the unit cube `[0,1]^d`.
    pub fn unit_cube(d: usize) -> Self {
        Self {
            d,
            n: None,
            domain_lo: vec![0.0; d],
            domain_hi: vec![1.0; d],
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = Some(n);
        self
    }

    pub fn check(&self) -> Result<(), StreamError> {
        if self.d == 0 {
            return Err(StreamError::InvalidMeta("d must be at least 1".into()));
        }
        if self.domain_lo.len() != self.d || self.domain_hi.len() != self.d {
            return Err(StreamError::InvalidMeta(
                "domain bounds must have length d".into(),
            ));
        }
        if self
            .domain_lo
            .iter()
            .zip(&self.domain_hi)
            .any(|(lo, hi)| !(lo < hi))
        {
            return Err(StreamError::InvalidMeta(
                "domain_lo must be below domain_hi in every coordinate".into(),
            ));
        }
        Ok(())
    }
}

/// Validates a whole stream against `meta`.
///
/// Time indices must increase by exactly one from the first batch, and every
/// batch must satisfy [`TimeBatch::check`]. The first offending record is
/// reported. The input is returned unchanged on success.
pub fn validate_stream<'a>(
    batches: &'a [TimeBatch],
    meta: &StreamMeta,
) -> Result<&'a [TimeBatch], StreamError> {
    meta.check()?;
    let mut expected = batches.first().map(|b| b.t);
    for batch in batches {
        if let Some(e) = expected {
            if batch.t != e {
                return Err(StreamError::NonContiguousTime {
                    expected: e,
                    found: batch.t,
                });
            }
        }
        batch.check(meta.d)?;
        expected = Some(batch.t + 1);
    }
    Ok(batches)
}
