//! Bicubic resampling with the conventions of MATLAB `imresize`.
//!
//! The cubic kernel uses `a = -0.5`. When shrinking with antialiasing on,
//! the kernel is stretched by `1/scale` (and its height scaled by `scale`)
//! so it integrates the wider source footprint. Output pixel `x` (1-based)
//! maps to source coordinate `u = x/scale + (1 - 1/scale)/2`, taps outside
//! the image are folded back symmetrically, and each row of weights is
//! normalized to sum to one.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::plane::ImagePlane;
use crate::error::{Error, Result};

const A: f64 = -0.5;

/// The cubic convolution kernel.
pub fn cubic(x: f64) -> f64 {
    let t = x.abs();
    let t2 = t * t;
    let t3 = t2 * t;
    if t <= 1.0 {
        (A + 2.0) * t3 - (A + 3.0) * t2 + 1.0
    } else if t <= 2.0 {
        A * t3 - 5.0 * A * t2 + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Positive rational resize factor `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scale {
    pub num: usize,
    pub den: usize,
}

impl Scale {
    pub fn new(num: usize, den: usize) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::contract(format!("scale {num}/{den} must be positive")));
        }
        Ok(Scale { num, den })
    }

    /// `1/factor`, the usual degradation scale.
    pub fn down(factor: usize) -> Result<Self> {
        Scale::new(1, factor)
    }

    pub fn up(factor: usize) -> Result<Self> {
        Scale::new(factor, 1)
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `ceil(len · scale)`.
    pub fn apply(self, len: usize) -> usize {
        (len * self.num).div_ceil(self.den)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// Source taps for one output sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Per-output-sample taps along one axis.
pub fn contributions(in_len: usize, out_len: usize, scale: f64, antialias: bool) -> Result<Vec<Taps>> {
    if in_len == 0 || out_len == 0 || !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::contract(format!(
            "cannot resample {in_len} samples to {out_len} at scale {scale}"
        )));
    }
    let shrink = scale < 1.0 && antialias;
    let width = if shrink { 4.0 / scale } else { 4.0 };
    let taps = width.ceil() as usize + 2;
    let period = 2 * in_len as i64;
    let fold = |j: i64| -> usize {
        // 1-based index into [1..n, n..1], repeated
        let m = (j - 1).rem_euclid(period) as usize;
        if m < in_len {
            m
        } else {
            period as usize - 1 - m
        }
    };
    let mut out = Vec::with_capacity(out_len);
    for x in 1..=out_len {
        let u = x as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - width / 2.0).floor() as i64;
        let mut indices = Vec::with_capacity(taps);
        let mut weights = Vec::with_capacity(taps);
        for k in 0..taps as i64 {
            let j = left + k;
            let d = u - j as f64;
            let w = if shrink { scale * cubic(scale * d) } else { cubic(d) };
            if w != 0.0 {
                indices.push(fold(j));
                weights.push(w);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        out.push(Taps { indices, weights });
    }
    Ok(out)
}

/// Resamples every channel of `img` by `scale`, height first.
pub fn bicubic_resize(img: &ImagePlane, scale: Scale, antialias: bool) -> Result<ImagePlane> {
    let (w, h) = (img.width(), img.height());
    let (ow, oh) = (scale.apply(w), scale.apply(h));
    if ow == 0 || oh == 0 {
        return Err(Error::contract(format!(
            "resizing {w}×{h} by {scale} gives an empty image"
        )));
    }
    if scale.num == scale.den {
        return Ok(img.clone());
    }
    let s = scale.value();
    let rows = contributions(h, oh, s, antialias)?;
    let cols = contributions(w, ow, s, antialias)?;
    let c = img.channels();
    let mut mid = vec![0.0; c * oh * w];
    for ch in 0..c {
        let src = img.plane(ch);
        for (y, t) in rows.iter().enumerate() {
            let dst = &mut mid[(ch * oh + y) * w..(ch * oh + y + 1) * w];
            for (&j, &wt) in t.indices.iter().zip(&t.weights) {
                let row = &src[j * w..(j + 1) * w];
                for (d, s) in dst.iter_mut().zip(row) {
                    *d += wt * s;
                }
            }
        }
    }
    let mut data = vec![0.0; c * oh * ow];
    for r in 0..c * oh {
        let src = &mid[r * w..(r + 1) * w];
        let dst = &mut data[r * ow..(r + 1) * ow];
        for (d, t) in dst.iter_mut().zip(&cols) {
            *d = t.indices.iter().zip(&t.weights).map(|(&j, &wt)| wt * src[j]).sum();
        }
    }
    ImagePlane::new(ow, oh, img.space(), img.range(), data)
}

/// Bicubic ×1/`factor` degradation.
pub fn degrade(hr: &ImagePlane, factor: usize, antialias: bool) -> Result<ImagePlane> {
    bicubic_resize(hr, Scale::down(factor)?, antialias)
}
