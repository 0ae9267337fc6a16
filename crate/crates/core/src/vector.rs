//! Descriptor vectors, the three supported distance functions and the
//! weighted fusion of two descriptor distances.
//!
//! Every descriptor carries the metric it must be compared with. Mixing
//! metrics or dimensions is reported as an error instead of producing a
//! meaningless number.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Tolerance used when checking the unit-norm and histogram invariants.
pub const INVARIANT_TOLERANCE: f64 = 1e-6;
/// Norms below this are treated as a zero vector.
pub const ZERO_NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("descriptor has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("metric mismatch: {left} vs {right}")]
    MetricMismatch { left: Metric, right: Metric },
    #[error("descriptor must have at least one component")]
    Empty,
    #[error("component {index} is not a finite number")]
    NonFinite { index: usize },
    #[error("not a probability histogram: {0}")]
    NotAHistogram(String),
    #[error("fusion weight {0} outside [0, 1]")]
    InvalidWeight(f64),
}

/// Distance function attached to a descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "euclidean")]
    Euclidean,
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "jensen-shannon")]
    JensenShannon,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
            Metric::JensenShannon => "jensen-shannon",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Metric::Euclidean => 0,
            Metric::Cosine => 1,
            Metric::JensenShannon => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Metric::Euclidean),
            1 => Some(Metric::Cosine),
            2 => Some(Metric::JensenShannon),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            "jensen-shannon" | "jsd" => Ok(Metric::JensenShannon),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// A fixed-dimension feature vector together with its comparison metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    values: Vec<f64>,
    metric: Metric,
    normalized: bool,
}

impl Descriptor {
    /// Builds a descriptor, checking that it is nonempty and finite. For the
    /// Jensen-Shannon metric the values must also form a probability
    /// histogram.
    pub fn new(values: Vec<f64>, metric: Metric) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite { index });
        }
        if metric == Metric::JensenShannon {
            if values.iter().any(|&v| v < 0.0) {
                return Err(VectorError::NotAHistogram("negative mass".into()));
            }
            let sum: f64 = values.iter().sum();
            if (sum - 1.0).abs() > INVARIANT_TOLERANCE {
                return Err(VectorError::NotAHistogram(format!("mass sums to {sum}")));
            }
        }
        Ok(Self {
            values,
            metric,
            normalized: false,
        })
    }

    /// Shorthand for a Euclidean descriptor.
    pub fn euclidean(values: Vec<f64>) -> Result<Self, VectorError> {
        Self::new(values, Metric::Euclidean)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    /// Returns the vector scaled to unit Euclidean length.
    pub fn l2_normalized(&self) -> Result<Self, VectorError> {
        let norm = self.norm();
        if norm < ZERO_NORM_GUARD {
            return Err(VectorError::ZeroVector);
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / norm).collect(),
            metric: self.metric,
            normalized: true,
        })
    }

    /// Rebuilds a descriptor read back from storage. The normalization flag
    /// is only kept when the stored values actually have unit norm.
    pub(crate) fn restore(values: Vec<f64>, metric: Metric, normalized: bool) -> Result<Self, VectorError> {
        let mut d = Self::new(values, metric)?;
        d.normalized = normalized && (d.norm() - 1.0).abs() <= INVARIANT_TOLERANCE;
        Ok(d)
    }

    fn ensure_comparable(&self, other: &Self) -> Result<(), VectorError> {
        if self.dim() != other.dim() {
            return Err(VectorError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        if self.metric != other.metric {
            return Err(VectorError::MetricMismatch {
                left: self.metric,
                right: other.metric,
            });
        }
        Ok(())
    }
}

/// Free-function form of [`Descriptor::l2_normalized`].
pub fn l2_normalize(v: &Descriptor) -> Result<Descriptor, VectorError> {
    v.l2_normalized()
}

/// Distance between two descriptors under their shared metric.
pub fn distance(a: &Descriptor, b: &Descriptor) -> Result<f64, VectorError> {
    a.ensure_comparable(b)?;
    match a.metric {
        Metric::Euclidean => Ok(euclidean(&a.values, &b.values)),
        Metric::Cosine => cosine_distance(&a.values, &b.values),
        Metric::JensenShannon => Ok(jensen_shannon(&a.values, &b.values)),
    }
}

/// Raw-slice distance used on hot paths once comparability was checked.
/// Cosine against a zero vector yields the maximum distance of 1.
#[inline]
pub(crate) fn distance_unchecked(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => euclidean(a, b),
        Metric::Cosine => cosine_distance(a, b).unwrap_or(1.0),
        Metric::JensenShannon => jensen_shannon(a, b),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize the reduction
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        sum += a[j] * b[j];
    }
    sum
}

#[inline]
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        let d0 = a[j] - b[j];
        let d1 = a[j + 1] - b[j + 1];
        let d2 = a[j + 2] - b[j + 2];
        let d3 = a[j + 3] - b[j + 3];
        acc[0] += d0 * d0;
        acc[1] += d1 * d1;
        acc[2] += d2 * d2;
        acc[3] += d3 * d3;
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        let d = a[j] - b[j];
        sum += d * d;
    }
    sum
}

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, VectorError> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < ZERO_NORM_GUARD || nb < ZERO_NORM_GUARD {
        return Err(VectorError::ZeroVector);
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok((1.0 - cos).max(0.0))
}

/// Base-2 Jensen-Shannon divergence, bounded to [0, 1].
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += pi * (pi / m).log2();
        }
        if qi > 0.0 {
            acc += qi * (qi / m).log2();
        }
    }
    (0.5 * acc).clamp(0.0, 1.0)
}

/// Weight of the first descriptor channel in [`fuse_distance`].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FusionWeight(f64);

impl FusionWeight {
    /// Best combination weight reported for color plus local descriptors.
    pub const DEFAULT: FusionWeight = FusionWeight(0.1);

    pub fn new(w: f64) -> Result<Self, VectorError> {
        if (0.0..=1.0).contains(&w) {
            Ok(Self(w))
        } else {
            Err(VectorError::InvalidWeight(w))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for FusionWeight {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for FusionWeight {
    type Error = VectorError;
    fn try_from(w: f64) -> Result<Self, Self::Error> {
        Self::new(w)
    }
}

impl From<FusionWeight> for f64 {
    fn from(w: FusionWeight) -> f64 {
        w.0
    }
}

/// `w * d_t + (1 - w) * d_c`. Both inputs are expected on a comparable
/// [0, 1] scale; see [`unit_scaled`].
#[inline]
pub fn fuse_distance(d_t: f64, d_c: f64, w: FusionWeight) -> f64 {
    debug_assert!(d_t >= 0.0 && d_c >= 0.0);
    w.0 * d_t + (1.0 - w.0) * d_c
}

/// Maps a raw distance onto [0, 1] for fusion. Euclidean distances between
/// unit vectors are at most 2 and get halved; the other metrics already
/// live on a bounded scale and pass through.
pub fn unit_scaled(d: f64, metric: Metric, normalized: bool) -> f64 {
    match metric {
        Metric::Euclidean if normalized => d / 2.0,
        _ => d,
    }
}
