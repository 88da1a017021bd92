//! RGB to YCbCr conversion.
//!
//! Studio swing is the BT.601 convention used by MATLAB `rgb2ycbcr`:
//!
//! ```text
//! Y  = 16  + ( 65.481 R + 128.553 G +  24.966 B)
//! Cb = 128 + (-37.797 R -  74.203 G + 112.000 B)
//! Cr = 128 + (112.000 R -  93.786 G -  18.214 B)
//! ```
//!
//! with R, G, B in [0, 1] and the result on the byte scale, so Y spans
//! [16, 235]. Full swing is the JPEG variant spanning [0, 255].

use serde::{Deserialize, Serialize};

use super::plane::{ColorSpace, ImagePlane};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Swing {
    #[default]
    Studio,
    Full,
}

const STUDIO: ([f64; 3], [[f64; 3]; 3]) = (
    [16.0, 128.0, 128.0],
    [
        [65.481, 128.553, 24.966],
        [-37.797, -74.203, 112.0],
        [112.0, -93.786, -18.214],
    ],
);

const FULL: ([f64; 3], [[f64; 3]; 3]) = (
    [0.0, 128.0, 128.0],
    [
        [76.245, 149.685, 29.07],
        [-43.027_68, -84.472_32, 127.5],
        [127.5, -106.765_44, -20.734_56],
    ],
);

fn coefficients(swing: Swing) -> &'static ([f64; 3], [[f64; 3]; 3]) {
    match swing {
        Swing::Studio => &STUDIO,
        Swing::Full => &FULL,
    }
}

fn require_rgb(img: &ImagePlane) -> Result<()> {
    if img.space() != ColorSpace::Rgb {
        return Err(Error::contract(format!(
            "colour conversion needs an RGB image, got {:?} with {} channel(s)",
            img.space(),
            img.channels()
        )));
    }
    Ok(())
}

/// Converts an RGB image to YCbCr in the same value range.
pub fn rgb_to_ycbcr(img: &ImagePlane, swing: Swing) -> Result<ImagePlane> {
    require_rgb(img)?;
    let (offset, m) = coefficients(swing);
    let peak = img.range().peak();
    let out_scale = peak / 255.0;
    let n = img.width() * img.height();
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let mut data = vec![0.0; 3 * n];
    for k in 0..3 {
        let row = m[k];
        for i in 0..n {
            let v = offset[k] + (row[0] * r[i] + row[1] * g[i] + row[2] * b[i]) / peak;
            data[k * n + i] = v * out_scale;
        }
    }
    ImagePlane::new(img.width(), img.height(), ColorSpace::YCbCr, img.range(), data)
}

/// Luma channel only. Y images pass through unchanged.
pub fn extract_y(img: &ImagePlane, swing: Swing) -> Result<ImagePlane> {
    match img.space() {
        ColorSpace::Y => Ok(img.clone()),
        ColorSpace::YCbCr => ImagePlane::new(
            img.width(),
            img.height(),
            ColorSpace::Y,
            img.range(),
            img.plane(0).to_vec(),
        ),
        ColorSpace::Rgb => {
            let (offset, m) = coefficients(swing);
            let peak = img.range().peak();
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            let row = m[0];
            let data = (0..r.len())
                .map(|i| {
                    (offset[0] + (row[0] * r[i] + row[1] * g[i] + row[2] * b[i]) / peak) * peak
                        / 255.0
                })
                .collect();
            ImagePlane::new(img.width(), img.height(), ColorSpace::Y, img.range(), data)
        }
    }
}

/// Nominal luma for a byte-range RGB triple.
pub fn luma(rgb: [f64; 3], swing: Swing) -> f64 {
    let (offset, m) = coefficients(swing);
    offset[0] + (m[0][0] * rgb[0] + m[0][1] * rgb[1] + m[0][2] * rgb[2]) / 255.0
}
