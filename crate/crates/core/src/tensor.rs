//! Dense rank-4 tensors in fixed `(n, c, h, w)` row-major layout, plus the
//! `.t4` binary file format.
//!
//! All compute happens in `f64`. The file format can also store `f32`
//! payloads; those are widened on load.
//!
//! `.t4` layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"M25DT4\0\x01"
//! 8       8     dtype  u64: 4 = f32, 8 = f64 (element width in bytes)
//! 16      8     rank   u64: always 4
//! 24      32    dims   4 x u64: n, c, h, w
//! 56      ...   payload, n*c*h*w little-endian values of `dtype`
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const T4_MAGIC: [u8; 8] = *b"M25DT4\0\x01";
const HEADER_LEN: usize = 8 + 8 + 8 + 4 * 8;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor dimensions {0:?} overflow the addressable element count")]
    DimensionOverflow([usize; 4]),
    #[error("data length {got} does not match dims {dims:?} (expected {expected})")]
    LengthMismatch {
        dims: [usize; 4],
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("{path}: bad magic, not a .t4 tensor file")]
    BadMagic { path: String },
    #[error("{path}: unknown dtype tag {tag}")]
    UnknownDtype { path: String, tag: u64 },
    #[error("{path}: stored dtype {stored:?} but {expected:?} was required")]
    DtypeMismatch {
        path: String,
        stored: Dtype,
        expected: Dtype,
    },
    #[error("{path}: unsupported rank {rank} (only rank 4 is stored)")]
    UnsupportedRank { path: String, rank: u64 },
    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
}

/// Element type of a stored `.t4` payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn width(self) -> usize {
        self.tag() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

fn checked_len(dims: [usize; 4]) -> Result<usize, TensorError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(TensorError::DimensionOverflow(dims))
}

impl Tensor4 {
    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = checked_len(dims)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self, TensorError> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: [usize; 4], value: f64) -> Result<Self, TensorError> {
        let len = checked_len(dims)?;
        Ok(Self {
            dims,
            data: vec![value; len],
        })
    }

    /// Standard normal samples drawn from `ChaCha8Rng::seed_from_u64(seed)`
    /// through `rand_distr::StandardNormal`. ChaCha8 output is specified
    /// independently of platform and word size, so a seed reproduces
    /// everywhere.
    pub fn randn(dims: [usize; 4], seed: u64) -> Result<Self, TensorError> {
        let len = checked_len(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Contiguous `(c, h, w)` block of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &mut self.data[n * stride..(n + 1) * stride]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return f64::NAN;
        }
        self.sum() / self.data.len() as f64
    }

    /// Largest element; NaN if any element is NaN or the tensor is empty.
    pub fn max(&self) -> f64 {
        if self.data.is_empty() {
            return f64::NAN;
        }
        self.data.iter().fold(f64::NEG_INFINITY, |m, &v| {
            if v.is_nan() || m.is_nan() {
                f64::NAN
            } else {
                m.max(v)
            }
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch(self.dims, other.dims));
        }
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a * b)
    }

    /// In-place `self += alpha * other`. Used by optimizers and accumulators.
    pub fn axpy_inplace(&mut self, alpha: f64, other: &Self) -> Result<(), TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch(self.dims, other.dims));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64, TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch(self.dims, other.dims));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch(self.dims, other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn assert_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * dtype.width());
        out.extend_from_slice(&T4_MAGIC);
        out.extend_from_slice(&dtype.tag().to_le_bytes());
        out.extend_from_slice(&4u64.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F64 => {
                for v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for v in &self.data {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a `.t4` buffer; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<(Self, Dtype), TensorError> {
        let path = origin.to_string();
        if bytes.len() < 8 {
            return Err(TensorError::Truncated {
                path,
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[..8] != T4_MAGIC {
            return Err(TensorError::BadMagic { path });
        }
        if bytes.len() < HEADER_LEN {
            return Err(TensorError::Truncated {
                path,
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let dtype = match word(0) {
            4 => Dtype::F32,
            8 => Dtype::F64,
            tag => return Err(TensorError::UnknownDtype { path, tag }),
        };
        let rank = word(1);
        if rank != 4 {
            return Err(TensorError::UnsupportedRank { path, rank });
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = usize::try_from(word(2 + i)).map_err(|_| TensorError::DimensionOverflow([usize::MAX; 4]))?;
        }
        let len = checked_len(dims)?;
        let expected = len
            .checked_mul(dtype.width())
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or(TensorError::DimensionOverflow(dims))?;
        if bytes.len() < expected {
            return Err(TensorError::Truncated {
                path,
                expected,
                found: bytes.len(),
            });
        }
        let payload = &bytes[HEADER_LEN..expected];
        let data = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        Ok((Self { dims, data }, dtype))
    }
}

pub fn save(path: impl AsRef<Path>, tensor: &Tensor4) -> Result<(), TensorError> {
    save_as(path, tensor, Dtype::F64)
}

pub fn save_as(path: impl AsRef<Path>, tensor: &Tensor4, dtype: Dtype) -> Result<(), TensorError> {
    let path = path.as_ref();
    let io_err = |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&tensor.to_bytes(dtype)).map_err(io_err)?;
    Ok(())
}

/// Loads any `.t4` file, widening `f32` payloads to `f64`.
pub fn load(path: impl AsRef<Path>) -> Result<Tensor4, TensorError> {
    load_with_dtype(path).map(|(t, _)| t)
}

/// Loads a `.t4` file and fails unless it was stored as `expected`.
pub fn load_strict(path: impl AsRef<Path>, expected: Dtype) -> Result<Tensor4, TensorError> {
    let path = path.as_ref();
    let (t, stored) = load_with_dtype(path)?;
    if stored != expected {
        return Err(TensorError::DtypeMismatch {
            path: path.display().to_string(),
            stored,
            expected,
        });
    }
    Ok(t)
}

pub fn load_with_dtype(path: impl AsRef<Path>) -> Result<(Tensor4, Dtype), TensorError> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: origin.clone(),
        source,
    })?;
    Tensor4::from_bytes(&bytes, &origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constructors() {
        let z = Tensor4::zeros([1, 1, 2, 2]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let f = Tensor4::full([1, 1, 1, 1], 3.5).unwrap();
        assert_eq!(f.data(), &[3.5]);
        let a = Tensor4::randn([2, 3, 4, 5], 7).unwrap();
        let b = Tensor4::randn([2, 3, 4, 5], 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Tensor4::randn([2, 3, 4, 5], 8).unwrap());
    }

    #[test]
    fn overflow_is_rejected() {
        let err = Tensor4::zeros([usize::MAX, 2, 1, 1]).unwrap_err();
        assert!(matches!(err, TensorError::DimensionOverflow(_)));
    }

    #[test]
    fn reductions_match_scalar_loop() {
        let t = Tensor4::randn([2, 3, 5, 7], 11).unwrap();
        let mut s = 0.0;
        let mut m = f64::NEG_INFINITY;
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..5 {
                    for w in 0..7 {
                        s += t.at(n, c, h, w);
                        m = m.max(t.at(n, c, h, w));
                    }
                }
            }
        }
        assert!((t.sum() - s).abs() <= 1e-12 * s.abs().max(1.0));
        assert!((t.mean() - s / t.len() as f64).abs() <= 1e-12);
        assert_eq!(t.max(), m);
    }

    #[test]
    fn assert_finite_reports_index() {
        let mut t = Tensor4::zeros([1, 1, 1, 3]).unwrap();
        t.data_mut()[2] = f64::NAN;
        match t.assert_finite() {
            Err(TensorError::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.t4");
        let t = Tensor4::randn([2, 1, 3, 3], 5).unwrap();
        save(&p, &t).unwrap();
        let back = load_strict(&p, Dtype::F64).unwrap();
        assert_eq!(
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(TensorError::BadMagic { .. })));

        save(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&p), Err(TensorError::Truncated { .. })));

        save_as(&p, &t, Dtype::F32).unwrap();
        assert!(matches!(
            load_strict(&p, Dtype::F64),
            Err(TensorError::DtypeMismatch { .. })
        ));
        let widened = load(&p).unwrap();
        assert!(widened.max_abs_diff(&t).unwrap() < 1e-6);

        assert!(matches!(
            load(dir.path().join("missing.t4")),
            Err(TensorError::Io { .. })
        ));
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor4::full([1, 2, 1, 1], 1.0).unwrap();
        let b = t.to_bytes(Dtype::F64);
        assert_eq!(&b[..8], b"M25DT4\0\x01");
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 8);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(b[32..40].try_into().unwrap()), 2);
        assert_eq!(b.len(), 56 + 16);
    }

    proptest! {
        #[test]
        fn byte_round_trip_is_exact(
            dims in (0usize..3, 0usize..4, 0usize..5, 0usize..5),
            seed in any::<u64>(),
            scale in -1e300f64..1e300,
        ) {
            let dims = [dims.0, dims.1, dims.2, dims.3];
            let t = Tensor4::randn(dims, seed).unwrap().scale(scale);
            let (back, dtype) = Tensor4::from_bytes(&t.to_bytes(Dtype::F64), "mem").unwrap();
            prop_assert_eq!(dtype, Dtype::F64);
            prop_assert_eq!(back.dims(), t.dims());
            let same = t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
