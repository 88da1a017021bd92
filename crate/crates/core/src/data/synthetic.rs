//! Seeded smooth test imagery.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::patches::{PatchSet, Provenance};
use super::plane::{ColorSpace, ImagePlane, Range};
use super::resize::degrade;
use crate::error::Result;

/// Unit-range RGB image built from three low-frequency cosines per channel.
/// Values stay within [0.1, 0.9].
pub fn smooth_image(width: usize, height: usize, seed: u64) -> Result<ImagePlane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
    for channel in waves.iter_mut() {
        for wave in channel.iter_mut() {
            *wave = (
                rng.random_range(0.03..0.4 / 3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..TAU),
            );
        }
    }
    ImagePlane::from_fn(width, height, ColorSpace::Rgb, Range::Unit, |c, y, x| {
        let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
        0.5 + waves[c]
            .iter()
            .map(|(a, fx, fy, p)| a * (TAU * (fx * u + fy * v) + p).cos())
            .sum::<f64>()
    })
}

/// `count` independent smooth HR patches and their bicubic degradations.
pub fn smooth_patch_set(count: usize, hr_size: usize, scale: usize, seed: u64, antialias: bool) -> Result<PatchSet> {
    let mut set = PatchSet::new(scale);
    for i in 0..count {
        let hr = smooth_image(hr_size, hr_size, seed.wrapping_mul(1000).wrapping_add(i as u64))?;
        let lr = degrade(&hr, scale, antialias)?;
        set.push(
            hr,
            lr,
            Provenance {
                source: format!("smooth-{seed}-{i}"),
                x: 0,
                y: 0,
                augment: Default::default(),
            },
        )?;
    }
    Ok(set)
}
