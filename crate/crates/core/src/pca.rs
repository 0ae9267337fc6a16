//! PCA compression of descriptor collections.
//!
//! The model is fitted from a full SVD of the mean-centered data matrix and
//! keeps the smallest number of components whose cumulative explained
//! variance exceeds the threshold.

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::vector::{Descriptor, Metric};
use nalgebra::DMatrix;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.95;

const SNAPSHOT_MAGIC: &[u8; 4] = b"PCAM";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("data has zero variance")]
    DegenerateData,
    #[error("variance threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("row {row} has {actual} columns, expected {expected}")]
    RaggedRows { row: usize, expected: usize, actual: usize },
    #[error("dimension mismatch: model expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("corrupt model snapshot: {0}")]
    CorruptSnapshot(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// n x d, orthonormal rows.
    components: Vec<Vec<f64>>,
    explained_variance_ratio: Vec<f64>,
    /// Ratios of every available component, including discarded ones.
    spectrum: Vec<f64>,
    threshold: f64,
}

impl PcaModel {
    pub fn fit<R: AsRef<[f64]>>(rows: &[R], variance_threshold: f64) -> Result<Self, PcaError> {
        let m = rows.len();
        if m < 2 {
            return Err(PcaError::TooFewSamples(m));
        }
        if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
            return Err(PcaError::InvalidThreshold(variance_threshold));
        }
        let d = rows[0].as_ref().len();
        for (row, r) in rows.iter().enumerate() {
            if r.as_ref().len() != d || d == 0 {
                return Err(PcaError::RaggedRows {
                    row,
                    expected: d,
                    actual: r.as_ref().len(),
                });
            }
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r.as_ref()).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);

        let centered = DMatrix::from_fn(m, d, |i, j| rows[i].as_ref()[j] - mean[j]);
        let scale = mean.iter().map(|v| v * v).sum::<f64>().max(1.0);
        let total_sq: f64 = centered.iter().map(|v| v * v).sum();
        if total_sq <= 1e-20 * scale * m as f64 {
            return Err(PcaError::DegenerateData);
        }

        let svd = centered.svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

        let available = (m - 1).min(d);
        let variances: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
        let total: f64 = variances.iter().sum();
        let spectrum: Vec<f64> = variances.iter().take(available).map(|v| v / total).collect();

        let n_components = if variance_threshold >= 1.0 {
            available
        } else {
            let mut cumulative = 0.0;
            spectrum
                .iter()
                .position(|r| {
                    cumulative += r;
                    cumulative > variance_threshold
                })
                .map_or(available, |i| i + 1)
        };

        let components = order[..n_components]
            .iter()
            .map(|&i| {
                let mut row: Vec<f64> = v_t.row(i).iter().copied().collect();
                let pivot = row
                    .iter()
                    .copied()
                    .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
                if pivot < 0.0 {
                    row.iter_mut().for_each(|v| *v = -*v);
                }
                row
            })
            .collect();

        Ok(Self {
            mean,
            components,
            explained_variance_ratio: spectrum[..n_components].to_vec(),
            spectrum,
            threshold: variance_threshold,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn explained_variance_ratio(&self) -> &[f64] {
        &self.explained_variance_ratio
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, PcaError> {
        if v.len() != self.mean.len() {
            return Err(PcaError::DimensionMismatch {
                expected: self.mean.len(),
                actual: v.len(),
            });
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(self
            .components
            .iter()
            .map(|c| crate::vector::dot(c, &centered))
            .collect())
    }

    /// Maps compressed coordinates back to the input space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter().zip(coords) {
            out.iter_mut().zip(c).for_each(|(o, ci)| *o += w * ci);
        }
        out
    }

    /// Projects a descriptor; the result is compared with Euclidean distance.
    pub fn transform(&self, v: &Descriptor) -> Result<Descriptor, PcaError> {
        let coords = self.project(v.values())?;
        Descriptor::new(coords, Metric::Euclidean).map_err(|_| PcaError::DimensionMismatch {
            expected: self.mean.len(),
            actual: v.dim(),
        })
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(SNAPSHOT_MAGIC);
        e.u32(SNAPSHOT_VERSION);
        e.u32(self.mean.len() as u32);
        e.u32(self.components.len() as u32);
        e.f64(self.threshold);
        e.f64s(&self.mean);
        for c in &self.components {
            e.f64s(c);
        }
        e.f64s(&self.explained_variance_ratio);
        e.u32(self.spectrum.len() as u32);
        e.f64s(&self.spectrum);
        e.finish_with_crc()
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self, PcaError> {
        let mut d = Decoder::with_crc(bytes)?;
        d.expect_magic(SNAPSHOT_MAGIC)?;
        let version = d.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(DecodeError::UnsupportedVersion(version).into());
        }
        let dim = d.u32()? as usize;
        let n = d.u32()? as usize;
        let threshold = d.f64()?;
        let mean = d.f64s(dim)?;
        let components = (0..n).map(|_| d.f64s(dim)).collect::<Result<Vec<_>, _>>()?;
        let explained_variance_ratio = d.f64s(n)?;
        let spectrum_len = d.u32()? as usize;
        let spectrum = d.f64s(spectrum_len)?;
        d.finish()?;
        if n > spectrum_len {
            return Err(DecodeError::Invalid("more components than spectrum entries".into()).into());
        }
        Ok(Self {
            mean,
            components,
            explained_variance_ratio,
            spectrum,
            threshold,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PcaError> {
        std::fs::write(path, self.to_snapshot_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PcaError> {
        Self::from_snapshot_bytes(&std::fs::read(path)?)
    }
}

/// Number of retained components.
pub fn explained_dimensionality(model: &PcaModel) -> usize {
    model.n_components()
}
