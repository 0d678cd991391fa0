//! Frame-major feature matrices and the AFCT container.
//!
//! AFCT layout (little-endian): `"AFCT"` | version `u8` = 1 | frames `u32` |
//! dim `u32` | frames·dim `f32` values, frame-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const AFCT_MAGIC: [u8; 4] = *b"AFCT";
pub const AFCT_VERSION: u8 = 1;
pub const AFCT_HEADER_LEN: usize = 13;

/// A T×D matrix of per-frame features; row `t` is frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be at least 1".into()));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "{frames}x{dim} features need {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("frame {}, dim {}", i / dim, i % dim)));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        assert!(dim > 0, "feature dimension must be at least 1");
        Self {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub(crate) fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.data[t * self.dim + j]
    }

    /// Rows at the given frame indices, in order.
    pub fn select_frames(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &t in idx {
            data.extend_from_slice(self.frame(t));
        }
        Self {
            frames: idx.len(),
            dim: self.dim,
            data,
        }
    }

    /// Columns `start..end`, as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.dim {
            return Err(Error::Shape(format!(
                "column range {start}..{end} invalid for dim {}",
                self.dim
            )));
        }
        let data = self.rows().flat_map(|r| r[start..end].iter().copied()).collect();
        Ok(Self {
            frames: self.frames,
            dim: end - start,
            data,
        })
    }

    /// Horizontal concatenation; frame counts must match.
    pub fn concat_columns(&self, other: &Self) -> Result<Self> {
        if self.frames != other.frames {
            return Err(Error::Shape(format!(
                "frame counts differ: {} vs {}",
                self.frames, other.frames
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for (a, b) in self.rows().zip(other.rows()) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Ok(Self {
            frames: self.frames,
            dim: self.dim + other.dim,
            data,
        })
    }

    /// Temporal mean (one value per column). Zero frames yields zeros.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        if self.frames > 0 {
            let n = self.frames as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        out
    }

    /// Values as they will be stored in an AFCT file.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            frames: self.frames,
            dim: self.dim,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

pub fn encode_feature_bytes(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let frames = u32::try_from(m.frames).map_err(|_| Error::OutOfRange {
        what: "frame count",
        value: m.frames as u64,
        limit: u32::MAX as u64,
    })?;
    let dim = u32::try_from(m.dim).map_err(|_| Error::OutOfRange {
        what: "feature dimension",
        value: m.dim as u64,
        limit: u32::MAX as u64,
    })?;
    let mut out = Vec::with_capacity(AFCT_HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(&AFCT_MAGIC);
    out.push(AFCT_VERSION);
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for (i, &v) in m.data.iter().enumerate() {
        let stored = v as f32;
        if !stored.is_finite() {
            return Err(Error::NonFinite(format!(
                "frame {}, dim {} ({v} does not fit in f32)",
                i / m.dim,
                i % m.dim
            )));
        }
        out.extend_from_slice(&stored.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_bytes(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            what: "AFCT header",
            expected: AFCT_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != AFCT_MAGIC {
        return Err(Error::BadMagic {
            expected: AFCT_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < AFCT_HEADER_LEN {
        return Err(Error::Truncated {
            what: "AFCT header",
            expected: AFCT_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[4] != AFCT_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let frames = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Shape("AFCT dimension is zero".into()));
    }
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Shape(format!("AFCT shape {frames}x{dim} overflows")))?;
    let payload = &bytes[AFCT_HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            what: "AFCT payload",
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::PayloadMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMatrix::new(frames, dim, data)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_bytes(&bytes)
}

pub fn write_feature_file(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature_bytes(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// I.i.d. zero-mean normal features.
pub fn gaussian_features(
    rng: &mut Rng,
    frames: usize,
    dim: usize,
    stddev: f64,
) -> Result<FeatureMatrix> {
    if !(stddev > 0.0 && stddev.is_finite()) {
        return Err(Error::Precondition(format!(
            "stddev must be positive and finite, got {stddev}"
        )));
    }
    if dim == 0 {
        return Err(Error::Precondition("dim must be at least 1".into()));
    }
    let data = (0..frames * dim).map(|_| stddev * rng.normal()).collect();
    FeatureMatrix::new(frames, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_small() {
        let m = FeatureMatrix::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let bytes = encode_feature_bytes(&m).unwrap();
        assert_eq!(bytes.len(), 13 + 4 * 6);
        assert_eq!(decode_feature_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let m = FeatureMatrix::zeros(0, 8);
        let bytes = encode_feature_bytes(&m).unwrap();
        assert_eq!(bytes.len(), 13);
        let back = decode_feature_bytes(&bytes).unwrap();
        assert_eq!((back.frames(), back.dim()), (0, 8));
    }

    #[test]
    fn single_value_payload_bytes() {
        let m = FeatureMatrix::new(1, 1, vec![0.5]).unwrap();
        let bytes = encode_feature_bytes(&m).unwrap();
        assert_eq!(&bytes[13..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_feature_bytes(&FeatureMatrix::zeros(1, 1)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_feature_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_feature_bytes(&FeatureMatrix::zeros(4, 4)).unwrap();
        bytes.truncate(13 + 15 * 4);
        assert!(matches!(
            decode_feature_bytes(&bytes),
            Err(Error::Truncated { what: "AFCT payload", .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_feature_bytes(&FeatureMatrix::zeros(1, 1)).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_feature_bytes(&bytes),
            Err(Error::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_rejected_both_ways() {
        assert!(matches!(
            FeatureMatrix::new(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        // Finite in f64 but not representable as f32.
        let m = FeatureMatrix::new(1, 1, vec![1e300]).unwrap();
        assert!(matches!(encode_feature_bytes(&m), Err(Error::NonFinite(_))));

        let mut bytes = encode_feature_bytes(&FeatureMatrix::zeros(1, 1)).unwrap();
        bytes[13..17].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_feature_bytes(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gaussian_is_deterministic_and_checked() {
        let a = gaussian_features(&mut Rng::new(7), 100, 16, 1.0).unwrap();
        let b = gaussian_features(&mut Rng::new(7), 100, 16, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            gaussian_features(&mut Rng::new(7), 10, 2, 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn gaussian_moments() {
        let m = gaussian_features(&mut Rng::new(7), 10_000, 4, 1.0).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..m.frames()).map(|t| m.get(t, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(mean.abs() <= 0.05, "column {j} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 0.05, "column {j} sd {}", var.sqrt());
        }
    }
}
