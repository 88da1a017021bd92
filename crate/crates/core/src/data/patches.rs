//! Aligned HR/LR training patches and the dihedral augmentations applied
//! to them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::plane::ImagePlane;
use super::resize::degrade;
use crate::error::{Error, Result};

pub const DEFAULT_PATCH: usize = 96;
pub const DEFAULT_STRIDE: usize = 48;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    #[default]
    Identity,
    /// Quarter turn counter-clockwise.
    Rot90,
    Rot180,
    Rot270,
    /// Mirror left-right.
    Hflip,
}

impl Augment {
    pub const ALL: [Augment; 5] = [
        Augment::Identity,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
        Augment::Hflip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Augment::Identity => "identity",
            Augment::Rot90 => "rot90",
            Augment::Rot180 => "rot180",
            Augment::Rot270 => "rot270",
            Augment::Hflip => "hflip",
        }
    }
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Augment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Augment::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown augmentation `{s}`")))
    }
}

/// Applies `tag` to every channel of `img`.
pub fn augment(img: &ImagePlane, tag: Augment) -> ImagePlane {
    let (w, h) = (img.width(), img.height());
    let (ow, oh) = match tag {
        Augment::Rot90 | Augment::Rot270 => (h, w),
        _ => (w, h),
    };
    ImagePlane::from_fn(ow, oh, img.space(), img.range(), |c, y, x| match tag {
        Augment::Identity => img.get(c, y, x),
        Augment::Rot90 => img.get(c, x, w - 1 - y),
        Augment::Rot180 => img.get(c, h - 1 - y, w - 1 - x),
        Augment::Rot270 => img.get(c, h - 1 - x, y),
        Augment::Hflip => img.get(c, y, w - 1 - x),
    })
    .expect("augmentation preserves pixel count")
}

/// Where a patch came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// HR-pixel offset of the top-left corner.
    pub x: usize,
    pub y: usize,
    pub augment: Augment,
}

/// Paired patches: `lr[i]` is the degraded counterpart of `hr[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchSet {
    pub scale: usize,
    pub hr: Vec<ImagePlane>,
    pub lr: Vec<ImagePlane>,
    pub provenance: Vec<Provenance>,
}

impl PatchSet {
    pub fn new(scale: usize) -> Self {
        PatchSet {
            scale,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn push(&mut self, hr: ImagePlane, lr: ImagePlane, provenance: Provenance) -> Result<()> {
        if hr.width() != lr.width() * self.scale || hr.height() != lr.height() * self.scale {
            return Err(Error::dimension(format!(
                "HR {}×{} and LR {}×{} do not differ by ×{}",
                hr.width(),
                hr.height(),
                lr.width(),
                lr.height(),
                self.scale
            )));
        }
        self.hr.push(hr);
        self.lr.push(lr);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn extend(&mut self, other: PatchSet) -> Result<()> {
        if other.scale != self.scale && !other.is_empty() {
            return Err(Error::contract("cannot merge patch sets of different scales"));
        }
        self.hr.extend(other.hr);
        self.lr.extend(other.lr);
        self.provenance.extend(other.provenance);
        Ok(())
    }

    /// Every patch under each of `tags`, HR and LR transformed alike.
    pub fn augmented(&self, tags: &[Augment]) -> PatchSet {
        let mut out = PatchSet::new(self.scale);
        for tag in tags {
            for i in 0..self.len() {
                out.hr.push(augment(&self.hr[i], *tag));
                out.lr.push(augment(&self.lr[i], *tag));
                out.provenance.push(Provenance {
                    augment: *tag,
                    ..self.provenance[i].clone()
                });
            }
        }
        out
    }
}

/// Top-left offsets `0, stride, 2·stride, …` that fit a window of `size`.
pub fn patch_offsets(len: usize, size: usize, stride: usize) -> Vec<usize> {
    if len < size || stride == 0 {
        return Vec::new();
    }
    (0..=(len - size) / stride).map(|k| k * stride).collect()
}

/// Degrades the whole image, then cuts aligned `size`×`size` HR patches and
/// their `size/scale` LR counterparts. Images smaller than a patch yield an
/// empty set and a warning.
pub fn crop_patches(
    hr_image: &ImagePlane,
    source: &str,
    size: usize,
    stride: usize,
    scale: usize,
    antialias: bool,
) -> Result<PatchSet> {
    if scale == 0 || size == 0 || size % scale != 0 {
        return Err(Error::config(format!(
            "patch size {size} must be a positive multiple of the scale {scale}"
        )));
    }
    if stride == 0 || stride % scale != 0 {
        return Err(Error::config(format!(
            "patch stride {stride} must be a positive multiple of the scale {scale}"
        )));
    }
    let mut set = PatchSet::new(scale);
    if hr_image.width() < size || hr_image.height() < size {
        log::warn!(
            "skipping {source}: {}×{} is smaller than a {size}×{size} patch",
            hr_image.width(),
            hr_image.height()
        );
        return Ok(set);
    }
    // trim so the LR grid covers the HR grid exactly
    let w = hr_image.width() - hr_image.width() % scale;
    let h = hr_image.height() - hr_image.height() % scale;
    let hr = hr_image.crop(0, 0, w, h)?;
    let lr = degrade(&hr, scale, antialias)?;
    let lsize = size / scale;
    for y in patch_offsets(h, size, stride) {
        for x in patch_offsets(w, size, stride) {
            set.push(
                hr.crop(x, y, size, size)?,
                lr.crop(x / scale, y / scale, lsize, lsize)?,
                Provenance {
                    source: source.to_owned(),
                    x,
                    y,
                    augment: Augment::Identity,
                },
            )?;
        }
    }
    Ok(set)
}
