//! Descriptor producers: Gaussian-weighted YCbCr color histograms computed
//! from raw RGB rasters, and ingestion of externally computed embeddings.

use crate::vector::{Descriptor, Metric, VectorError, ZERO_NORM_GUARD};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Quantization levels per YCbCr channel; 4 x 4 x 4 gives 64 bins.
pub const DEFAULT_BINS_PER_CHANNEL: usize = 4;
/// Gaussian standard deviation as a fraction of the ROI extent per axis.
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("region of interest is empty")]
    EmptyRoi,
    #[error("region of interest {roi:?} exceeds a {width}x{height} image")]
    RoiOutOfBounds { roi: RegionOfInterest, width: u32, height: u32 },
    #[error("total pixel weight is zero")]
    DegenerateImage,
    #[error("unsupported bins per channel: {0} (expected 4 or 8)")]
    UnsupportedBins(usize),
    #[error("sigma fraction must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("raster has {actual} bytes, expected {expected}")]
    RasterSize { expected: usize, actual: usize },
    #[error("dimension mismatch: manifest declares {expected}, vector has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("component {index} is not a finite number")]
    NonFinite { index: usize },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, FeatureError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(FeatureError::RasterSize {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn full_roi(&self) -> RegionOfInterest {
        RegionOfInterest {
            x: 0,
            y: 0,
            w: self.width,
            h: self.height,
        }
    }
}

/// Rectangle around the target object, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct RegionOfInterest {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl RegionOfInterest {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<(), FeatureError> {
        if self.w == 0 || self.h == 0 {
            return Err(FeatureError::EmptyRoi);
        }
        let fits = |start: u32, extent: u32, limit: u32| {
            start.checked_add(extent).is_some_and(|end| end <= limit)
        };
        if !fits(self.x, self.w, width) || !fits(self.y, self.h, height) {
            return Err(FeatureError::RoiOutOfBounds {
                roi: *self,
                width,
                height,
            });
        }
        Ok(())
    }
}

/// ITU-R BT.601 full-range RGB to YCbCr, rounded and clamped to 8 bits.
pub fn rgb_to_ycbcr(r: u8, g: u8, b: u8) -> (u8, u8, u8) {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    (q(y), q(cb), q(cr))
}

/// Gaussian-weighted color histogram of the ROI in YCbCr space.
///
/// Each pixel contributes `exp(-(dx^2 / 2sx^2 + dy^2 / 2sy^2))` where
/// `(dx, dy)` is its offset from the ROI center and `sx, sy` are
/// `sigma_fraction` times the ROI width and height. The result has
/// `bins_per_channel^3` components and sums to one.
pub fn ycbcr_histogram(
    img: &RasterImage,
    roi: &RegionOfInterest,
    bins_per_channel: usize,
    sigma_fraction: f64,
) -> Result<Descriptor, FeatureError> {
    roi.validate(img.width, img.height)?;
    if bins_per_channel != 4 && bins_per_channel != 8 {
        return Err(FeatureError::UnsupportedBins(bins_per_channel));
    }
    if !(sigma_fraction > 0.0 && sigma_fraction.is_finite()) {
        return Err(FeatureError::InvalidSigma(sigma_fraction));
    }
    let bins = bins_per_channel;
    let shift = 256 / bins;
    let cx = roi.x as f64 + (roi.w as f64 - 1.0) / 2.0;
    let cy = roi.y as f64 + (roi.h as f64 - 1.0) / 2.0;
    let sx = sigma_fraction * roi.w as f64;
    let sy = sigma_fraction * roi.h as f64;
    let (ax, ay) = (1.0 / (2.0 * sx * sx), 1.0 / (2.0 * sy * sy));

    let mut hist = vec![0.0f64; bins * bins * bins];
    let mut total = 0.0;
    for py in roi.y..roi.y + roi.h {
        let dy = py as f64 - cy;
        let wy = dy * dy * ay;
        for px in roi.x..roi.x + roi.w {
            let dx = px as f64 - cx;
            let weight = (-(dx * dx * ax + wy)).exp();
            let [r, g, b] = img.pixel(px, py);
            let (y, cb, cr) = rgb_to_ycbcr(r, g, b);
            let idx = (y as usize / shift) * bins * bins + (cb as usize / shift) * bins + cr as usize / shift;
            hist[idx] += weight;
            total += weight;
        }
    }
    if total < ZERO_NORM_GUARD {
        return Err(FeatureError::DegenerateImage);
    }
    hist.iter_mut().for_each(|h| *h /= total);
    Ok(Descriptor::new(hist, Metric::JensenShannon)?)
}

/// Declares where a batch of embedding vectors came from and how they compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub source_name: String,
    pub dim: usize,
    pub metric: Metric,
}

impl EmbeddingManifest {
    pub fn new(source_name: impl Into<String>, dim: usize, metric: Metric) -> Self {
        Self {
            source_name: source_name.into(),
            dim,
            metric,
        }
    }
}

/// Validates an externally computed vector and turns it into a descriptor.
pub fn ingest_embedding(
    raw: &[f64],
    manifest: &EmbeddingManifest,
    normalize: bool,
) -> Result<Descriptor, FeatureError> {
    if raw.len() != manifest.dim {
        return Err(FeatureError::DimensionMismatch {
            expected: manifest.dim,
            actual: raw.len(),
        });
    }
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite { index });
    }
    let d = Descriptor::new(raw.to_vec(), manifest.metric)?;
    if normalize {
        Ok(d.l2_normalized()?)
    } else {
        Ok(d)
    }
}

/// One line of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub external_id: String,
    pub class_synset: String,
    pub values: Vec<f64>,
}

/// Reads a manifest header line followed by
/// `<external_id>\t<class_synset>\t<comma-separated floats>` records.
pub fn read_embedding_file<R: BufRead>(
    reader: R,
) -> Result<(EmbeddingManifest, Vec<EmbeddingRecord>), FeatureError> {
    let mut lines = reader.lines().enumerate();
    let manifest: EmbeddingManifest = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| FeatureError::Parse {
            line: 1,
            message: format!("manifest header: {e}"),
        })?,
        None => {
            return Err(FeatureError::Parse {
                line: 1,
                message: "missing manifest header".into(),
            })
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| FeatureError::Parse {
            line: lineno,
            message,
        };
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(class), Some(vals)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err("expected three tab-separated fields".into()));
        };
        let values = if vals.is_empty() {
            Vec::new()
        } else {
            vals.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| parse_err(format!("`{t}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?
        };
        if values.len() != manifest.dim {
            return Err(parse_err(format!(
                "vector has {} components, manifest declares {}",
                values.len(),
                manifest.dim
            )));
        }
        records.push(EmbeddingRecord {
            external_id: id.to_string(),
            class_synset: class.to_string(),
            values,
        });
    }
    Ok((manifest, records))
}

/// Writes the embedding file format. Floats use the shortest representation
/// that parses back to the same bits.
pub fn write_embedding_file<W: Write>(
    mut w: W,
    manifest: &EmbeddingManifest,
    records: &[EmbeddingRecord],
) -> Result<(), FeatureError> {
    let header = serde_json::to_string(manifest).expect("manifest serializes");
    writeln!(w, "{header}")?;
    for r in records {
        write!(w, "{}\t{}\t", r.external_id, r.class_synset)?;
        for (i, v) in r.values.iter().enumerate() {
            if i > 0 {
                w.write_all(b",")?;
            }
            write!(w, "{v:?}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}
