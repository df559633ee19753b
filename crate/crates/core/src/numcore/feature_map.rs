use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Real};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DGFM";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16 + 1;

/// `(batch, channel, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn planes(&self) -> usize {
        self.n * self.c
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 activation grid stored channel-major.
///
/// Public constructors reject zero-sized dimensions and non-finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::contract(format!("feature map dims must be >= 1, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::contract(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature map element {i}")));
        }
        Ok(Self { shape, data })
    }

    /// Skips validation; callers guarantee shape consistency.
    pub(crate) fn from_parts(shape: Shape4, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        assert!(!shape.is_empty(), "feature map dims must be >= 1");
        Self::from_parts(shape, vec![T::zero(); shape.len()])
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        assert!(!shape.is_empty(), "feature map dims must be >= 1");
        Self::from_parts(shape, vec![value; shape.len()])
    }

    /// Builds a map from `f(n, c, y, x)`.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        assert!(!shape.is_empty(), "feature map dims must be >= 1");
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `h*w` plane of one `(sample, channel)` pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn planes(&self) -> std::slice::Chunks<'_, T> {
        self.data.chunks(self.shape.plane())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `a * self + other`, elementwise.
    pub fn scale_add(&self, a: T, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| a * x + y).collect();
        Ok(Self::from_parts(self.shape, data))
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Largest elementwise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap::from_parts(self.shape, self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }

    /// Serializes into the little-endian `DGFM` v1 dump format.
    pub fn to_dgfm_bytes(&self) -> Vec<u8> {
        let width = T::DTYPE.tag() as usize;
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * width);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Parses a `DGFM` dump. A file stored at the other precision is
    /// converted to `T`.
    pub fn from_dgfm_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let shape = Shape4::new(
            word(8) as usize,
            word(12) as usize,
            word(16) as usize,
            word(20) as usize,
        );
        let dtype = DType::from_tag(bytes[24])
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", bytes[24])))?;
        let width = dtype.tag() as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != shape.len() * width {
            return Err(Error::Format(format!(
                "payload is {} bytes, shape {shape} needs {}",
                payload.len(),
                shape.len() * width
            )));
        }
        let data = payload
            .chunks_exact(width)
            .map(|chunk| match dtype {
                DType::F32 => T::of(f32::read_le(chunk) as f64),
                DType::F64 => T::of(f64::read_le(chunk)),
            })
            .collect();
        Self::new(shape, data)
    }

    pub fn write_dgfm(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_dgfm_bytes())?;
        Ok(())
    }

    pub fn read_dgfm(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_dgfm_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_dgfm_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_dgfm_bytes(&std::fs::read(path)?)
    }
}
