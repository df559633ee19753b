//! Single-level orthonormal 2-D Haar analysis and synthesis.
//!
//! Filters are `L = [1, 1] / sqrt(2)` and `H = [-1, 1] / sqrt(2)`, applied
//! along the width and then along the height with stride 2. For a 2x2 window
//! `[[a, b], [c, d]]`:
//!
//! ```text
//! ll = ( a + b + c + d) / 2      lh = (-a + b - c + d) / 2
//! hl = (-a - b + c + d) / 2      hh = ( a - b - c + d) / 2
//! ```
//!
//! `lh` is the width-axis high-pass (horizontal detail) and `hl` the
//! height-axis high-pass (vertical detail). Odd heights or widths are
//! reflect-padded on the bottom/right edge before analysis and cropped again
//! on synthesis.

use crate::numcore::{FeatureMap, Real, Shape4};
use crate::{Error, Result};

/// Spatial size of the map that was analysed, before padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadInfo {
    pub h: usize,
    pub w: usize,
}

impl PadInfo {
    fn band_dims(self) -> (usize, usize) {
        (self.h.div_ceil(2), self.w.div_ceil(2))
    }
}

/// The four half-resolution sub-bands of one analysis step.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands<T> {
    pub ll: FeatureMap<T>,
    pub lh: FeatureMap<T>,
    pub hl: FeatureMap<T>,
    pub hh: FeatureMap<T>,
    pub pad_info: PadInfo,
}

/// Which detail band, for callers that address bands by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Ll,
    Lh,
    Hl,
    Hh,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::Ll, Band::Lh, Band::Hl, Band::Hh];

    pub fn suffix(self) -> &'static str {
        match self {
            Band::Ll => "ll",
            Band::Lh => "lh",
            Band::Hl => "hl",
            Band::Hh => "hh",
        }
    }
}

impl<T: Real> SubBands<T> {
    pub fn new(
        ll: FeatureMap<T>,
        lh: FeatureMap<T>,
        hl: FeatureMap<T>,
        hh: FeatureMap<T>,
        pad_info: PadInfo,
    ) -> Result<Self> {
        let bands = Self { ll, lh, hl, hh, pad_info };
        bands.validate()?;
        Ok(bands)
    }

    /// Bands for an even-sized map: `pad_info` is twice the band size.
    pub fn unpadded(
        ll: FeatureMap<T>,
        lh: FeatureMap<T>,
        hl: FeatureMap<T>,
        hh: FeatureMap<T>,
    ) -> Result<Self> {
        let s = ll.shape();
        Self::new(ll, lh, hl, hh, PadInfo { h: 2 * s.h, w: 2 * s.w })
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.ll.shape();
        if [&self.lh, &self.hl, &self.hh].iter().any(|b| b.shape() != s) {
            return Err(Error::contract("sub-bands must share one shape"));
        }
        if self.pad_info.band_dims() != (s.h, s.w) {
            return Err(Error::contract(format!(
                "band size {}x{} inconsistent with original size {}x{}",
                s.h, s.w, self.pad_info.h, self.pad_info.w
            )));
        }
        Ok(())
    }

    pub fn band(&self, b: Band) -> &FeatureMap<T> {
        match b {
            Band::Ll => &self.ll,
            Band::Lh => &self.lh,
            Band::Hl => &self.hl,
            Band::Hh => &self.hh,
        }
    }

    pub fn band_mut(&mut self, b: Band) -> &mut FeatureMap<T> {
        match b {
            Band::Ll => &mut self.ll,
            Band::Lh => &mut self.lh,
            Band::Hl => &mut self.hl,
            Band::Hh => &mut self.hh,
        }
    }

    /// Sum of squares over all four bands.
    pub fn energy(&self) -> T {
        Band::ALL.iter().map(|&b| self.band(b).sum_sq()).sum()
    }

    /// Largest absolute difference over all four bands.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        let mut m = T::zero();
        for b in Band::ALL {
            m = m.max(self.band(b).max_abs_diff(other.band(b))?);
        }
        Ok(m)
    }
}

#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else if n >= 2 {
        n - 2
    } else {
        0
    }
}

/// Shared analysis kernel. Out-of-range pixels are reflected when
/// `reflect_pad` is set and zero otherwise (the transpose of cropping).
fn analyze<T: Real>(f: &FeatureMap<T>, reflect_pad: bool) -> SubBands<T> {
    let s = f.shape();
    let pad_info = PadInfo { h: s.h, w: s.w };
    let (bh, bw) = pad_info.band_dims();
    let bshape = Shape4::new(s.n, s.c, bh, bw);
    let mut ll = FeatureMap::zeros(bshape);
    let mut lh = FeatureMap::zeros(bshape);
    let mut hl = FeatureMap::zeros(bshape);
    let mut hh = FeatureMap::zeros(bshape);
    let half = T::of(0.5);

    for n in 0..s.n {
        for c in 0..s.c {
            let src = f.plane(n, c);
            let px = |y: usize, x: usize| -> T {
                if reflect_pad {
                    src[reflect(y, s.h) * s.w + reflect(x, s.w)]
                } else if y < s.h && x < s.w {
                    src[y * s.w + x]
                } else {
                    T::zero()
                }
            };
            let off = (n * s.c + c) * bh * bw;
            for i in 0..bh {
                for j in 0..bw {
                    let a = px(2 * i, 2 * j);
                    let b = px(2 * i, 2 * j + 1);
                    let cc = px(2 * i + 1, 2 * j);
                    let d = px(2 * i + 1, 2 * j + 1);
                    let k = off + i * bw + j;
                    ll.data_mut()[k] = (a + b + cc + d) * half;
                    lh.data_mut()[k] = (b - a + d - cc) * half;
                    hl.data_mut()[k] = (cc + d - a - b) * half;
                    hh.data_mut()[k] = (a - b - cc + d) * half;
                }
            }
        }
    }
    SubBands { ll, lh, hl, hh, pad_info }
}

/// Synthesis onto the padded (even) grid, without cropping.
fn synthesize_padded<T: Real>(s: &SubBands<T>) -> FeatureMap<T> {
    let b = s.ll.shape();
    let shape = Shape4::new(b.n, b.c, 2 * b.h, 2 * b.w);
    let mut out = FeatureMap::zeros(shape);
    let half = T::of(0.5);
    for n in 0..b.n {
        for c in 0..b.c {
            let (ll, lh, hl, hh) =
                (s.ll.plane(n, c), s.lh.plane(n, c), s.hl.plane(n, c), s.hh.plane(n, c));
            let dst = out.plane_mut(n, c);
            for i in 0..b.h {
                for j in 0..b.w {
                    let k = i * b.w + j;
                    let (vll, vlh, vhl, vhh) = (ll[k], lh[k], hl[k], hh[k]);
                    let top = 2 * i * shape.w + 2 * j;
                    let bottom = top + shape.w;
                    dst[top] = (vll - vlh - vhl + vhh) * half;
                    dst[top + 1] = (vll + vlh - vhl - vhh) * half;
                    dst[bottom] = (vll - vlh + vhl - vhh) * half;
                    dst[bottom + 1] = (vll + vlh + vhl + vhh) * half;
                }
            }
        }
    }
    out
}

fn crop<T: Real>(f: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let s = f.shape();
    if (s.h, s.w) == (h, w) {
        return f.clone();
    }
    FeatureMap::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, x| f.at(n, c, y, x))
}

/// Haar analysis into four sub-bands.
pub fn dwt2<T: Real>(f: &FeatureMap<T>) -> SubBands<T> {
    analyze(f, true)
}

/// Haar synthesis; exact inverse of [`dwt2`], cropping any padding.
pub fn idwt2<T: Real>(s: &SubBands<T>) -> Result<FeatureMap<T>> {
    s.validate()?;
    Ok(crop(&synthesize_padded(s), s.pad_info.h, s.pad_info.w))
}

/// Vector-Jacobian product of [`dwt2`].
///
/// Analysis is orthonormal, so the transpose is synthesis; the padded
/// row/column cotangent is folded back onto the pixels it was reflected from.
pub fn dwt2_backward<T: Real>(upstream: &SubBands<T>) -> Result<FeatureMap<T>> {
    upstream.validate()?;
    let full = synthesize_padded(upstream);
    let PadInfo { h, w } = upstream.pad_info;
    let fs = full.shape();
    let mut out = crop(&full, h, w);
    if (fs.h, fs.w) == (h, w) {
        return Ok(out);
    }
    for n in 0..fs.n {
        for c in 0..fs.c {
            let src = full.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..fs.h {
                for x in 0..fs.w {
                    if y < h && x < w {
                        continue;
                    }
                    let (ty, tx) = (reflect(y, h), reflect(x, w));
                    dst[ty * w + tx] = dst[ty * w + tx] + src[y * fs.w + x];
                }
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`idwt2`] for bands of the given original size.
///
/// Cropping transposes to zero padding, followed by analysis.
pub fn idwt2_backward<T: Real>(upstream: &FeatureMap<T>, pad_info: PadInfo) -> Result<SubBands<T>> {
    let s = upstream.shape();
    if (s.h, s.w) != (pad_info.h, pad_info.w) {
        return Err(Error::contract(format!(
            "idwt2_backward: cotangent is {}x{}, forward output was {}x{}",
            s.h, s.w, pad_info.h, pad_info.w
        )));
    }
    Ok(analyze(upstream, false))
}
