//! Distortion metrics and the RMSE-based region split.
//!
//! PSNR and SSIM can be taken on the studio-swing luma channel or on all
//! channels. RMSE always uses byte-range RGB with a 4-pixel border removed.
//! The peak value follows the images' range metadata.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{extract_y, ColorSpace, ImagePlane, Range, Swing};
use crate::error::{Error, Result};

/// Value reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;
pub const RMSE_BORDER: usize = 4;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &ImagePlane, b: &ImagePlane, border: usize) -> Result<()> {
    if !a.same_extent(b) {
        return Err(Error::contract(format!(
            "metric inputs differ: {}×{} {:?} vs {}×{} {:?}",
            a.width(),
            a.height(),
            a.space(),
            b.width(),
            b.height(),
            b.space()
        )));
    }
    if a.range() != b.range() {
        return Err(Error::contract("metric inputs have different value ranges"));
    }
    if 2 * border >= a.width().min(a.height()) {
        return Err(Error::contract(format!(
            "border {border} leaves nothing of a {}×{} image",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

fn prepared(a: &ImagePlane, b: &ImagePlane, border: usize, y_only: bool) -> Result<(ImagePlane, ImagePlane)> {
    check_pair(a, b, border)?;
    let (a, b) = if y_only && a.space() != ColorSpace::Y {
        (extract_y(a, Swing::Studio)?, extract_y(b, Swing::Studio)?)
    } else {
        (a.clone(), b.clone())
    };
    let (w, h) = (a.width() - 2 * border, a.height() - 2 * border);
    Ok((a.crop(border, border, w, h)?, b.crop(border, border, w, h)?))
}

fn mse(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.data().len() as f64
}

/// `10·log10(peak² / MSE)` over the cropped region, `+∞` for identical
/// inputs.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, border: usize, y_only: bool) -> Result<f64> {
    let (a, b) = prepared(a, b, border, y_only)?;
    let m = mse(&a, &b);
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = a.range().peak();
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1-d Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, peak: f64) -> f64 {
    let g = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, w, h, &g);
    let mu_b = filter_valid(b, w, h, &g);
    let aa = filter_valid(&prod(a, a), w, h, &g);
    let bb = filter_valid(&prod(b, b), w, h, &g);
    let ab = filter_valid(&prod(a, b), w, h, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM over all valid 11×11 Gaussian-window positions of the cropped
/// region, averaged over channels when `y_only` is off.
pub fn ssim(a: &ImagePlane, b: &ImagePlane, border: usize, y_only: bool) -> Result<f64> {
    let (a, b) = prepared(a, b, border, y_only)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels after cropping, got {w}×{h}"
        )));
    }
    let peak = a.range().peak();
    let c = a.channels();
    let sum: f64 = (0..c).map(|ch| ssim_plane(a.plane(ch), b.plane(ch), w, h, peak)).sum();
    Ok(sum / c as f64)
}

/// RMSE of byte-range RGB after removing a 4-pixel border.
pub fn rmse_pirm(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    if a.space() != ColorSpace::Rgb || b.space() != ColorSpace::Rgb {
        return Err(Error::contract("RMSE is taken on RGB images"));
    }
    let (a, b) = (a.to_range(Range::Byte), b.to_range(Range::Byte));
    let (a, b) = prepared(&a, &b, RMSE_BORDER, false)?;
    Ok(mse(&a, &b).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    One,
    Two,
    Three,
    OutOfRange,
}

impl Region {
    pub fn number(self) -> Option<u8> {
        match self {
            Region::One => Some(1),
            Region::Two => Some(2),
            Region::Three => Some(3),
            Region::OutOfRange => None,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.number() {
            Some(n) => write!(f, "{n}"),
            None => f.write_str("out_of_range"),
        }
    }
}

/// `≤ 11.5` → 1, `≤ 12.5` → 2, `≤ 16` → 3.
pub fn classify_region(rmse: f64) -> Region {
    if rmse <= 11.5 {
        Region::One
    } else if rmse <= 12.5 {
        Region::Two
    } else if rmse <= 16.0 {
        Region::Three
    } else {
        Region::OutOfRange
    }
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub region: Region,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricOptions {
    pub border: usize,
    pub y_only: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            border: 4,
            y_only: true,
        }
    }
}

/// All report metrics for one `(sr, hr)` pair.
pub fn measure(image: &str, sr: &ImagePlane, hr: &ImagePlane, opts: MetricOptions) -> Result<MetricRow> {
    let rmse = rmse_pirm(sr, hr)?;
    Ok(MetricRow {
        image: image.to_owned(),
        psnr: psnr(sr, hr, opts.border, opts.y_only)?,
        ssim: ssim(sr, hr, opts.border, opts.y_only)?,
        rmse,
        region: classify_region(rmse),
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// CSV text with header `image,psnr,ssim,rmse,region`. Infinite PSNR is
/// written as [`PSNR_CAP`].
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("image,psnr,ssim,rmse,region\n");
    for r in rows {
        let psnr = if r.psnr.is_infinite() { PSNR_CAP } else { r.psnr };
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            csv_field(&r.image),
            psnr,
            r.ssim,
            r.rmse,
            r.region
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}
