use serde::{Deserialize, Serialize};

use crate::engine::{Shape, Tensor};
use crate::error::{Error, Result};

/// Nominal value range of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Range {
    /// Values in [0, 1].
    Unit,
    /// Values in [0, 255].
    Byte,
}

impl Range {
    pub fn peak(self) -> f64 {
        match self {
            Range::Unit => 1.0,
            Range::Byte => 255.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Rgb,
    YCbCr,
    /// Luma only, one channel.
    Y,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Y => 1,
            _ => 3,
        }
    }
}

/// Planar (channel-major) image with explicit range and colour space.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
    range: Range,
    space: ColorSpace,
}

impl ImagePlane {
    pub fn new(
        width: usize,
        height: usize,
        space: ColorSpace,
        range: Range,
        data: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract(format!(
                "image extents must be positive, got {width}×{height}"
            )));
        }
        let expected = space.channels() * width * height;
        if data.len() != expected {
            return Err(Error::dimension(format!(
                "{width}×{height} {space:?} image needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(ImagePlane {
            width,
            height,
            data,
            range,
            space,
        })
    }

    /// `f(channel, y, x)` evaluated at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        space: ColorSpace,
        range: Range,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(space.channels() * width * height);
        for c in 0..space.channels() {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        ImagePlane::new(width, height, space, range, data)
    }

    pub fn filled(width: usize, height: usize, space: ColorSpace, range: Range, value: f64) -> Result<Self> {
        ImagePlane::from_fn(width, height, space, range, |_, _, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn range(&self) -> Range {
        self.range
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_extent(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height && self.space == other.space
    }

    /// Same pixels relabelled into `range`, rescaling values.
    pub fn to_range(&self, range: Range) -> ImagePlane {
        let k = range.peak() / self.range.peak();
        ImagePlane {
            data: self.data.iter().map(|v| v * k).collect(),
            range,
            ..self.clone()
        }
    }

    /// Relabels the colour space. Channel counts must agree.
    pub fn with_space(mut self, space: ColorSpace) -> Result<Self> {
        if space.channels() != self.channels() {
            return Err(Error::contract(format!(
                "cannot relabel a {:?} image as {space:?}",
                self.space
            )));
        }
        self.space = space;
        Ok(self)
    }

    /// RGB view of the image; luma is replicated into three channels.
    pub fn to_rgb(&self) -> Result<ImagePlane> {
        match self.space {
            ColorSpace::Rgb => Ok(self.clone()),
            ColorSpace::Y => ImagePlane::from_fn(self.width, self.height, ColorSpace::Rgb, self.range, |_, y, x| {
                self.get(0, y, x)
            }),
            ColorSpace::YCbCr => Err(Error::contract("YCbCr to RGB conversion is not provided")),
        }
    }

    /// Values clamped into the nominal range.
    pub fn clipped(&self) -> ImagePlane {
        let p = self.range.peak();
        ImagePlane {
            data: self.data.iter().map(|v| v.clamp(0.0, p)).collect(),
            ..self.clone()
        }
    }

    /// Clipped and rounded to the nearest 8-bit level, keeping the range.
    pub fn quantized(&self) -> ImagePlane {
        let p = self.range.peak();
        ImagePlane {
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, p) * 255.0 / p).round() * p / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<ImagePlane> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(Error::contract(format!(
                "crop {width}×{height}+{x}+{y} exceeds {}×{} image",
                self.width, self.height
            )));
        }
        ImagePlane::from_fn(width, height, self.space, self.range, |c, j, i| {
            self.get(c, y + j, x + i)
        })
    }

    /// `[1, C, H, W]` tensor in unit range.
    pub fn to_tensor(&self) -> Tensor {
        let unit = self.to_range(Range::Unit);
        Tensor::new(
            Shape::new(1, self.channels(), self.height, self.width),
            unit.data,
        )
        .expect("planar layout matches NCHW")
    }

    /// Sample `n` of a unit-range tensor as an image.
    pub fn from_tensor(t: &Tensor, n: usize, space: ColorSpace) -> Result<ImagePlane> {
        let s = t.shape();
        if n >= s.n || s.c != space.channels() {
            return Err(Error::dimension(format!(
                "cannot read sample {n} of {s} as a {space:?} image"
            )));
        }
        ImagePlane::new(s.w, s.h, space, Range::Unit, t.sample(n).into_data())
    }
}

/// Stacks same-sized unit-range images into one NCHW batch.
pub fn batch_tensor(images: &[&ImagePlane]) -> Result<Tensor> {
    let tensors: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks() {
        assert!(ImagePlane::new(0, 2, ColorSpace::Rgb, Range::Unit, vec![]).is_err());
        assert!(ImagePlane::new(2, 2, ColorSpace::Rgb, Range::Unit, vec![0.0; 4]).is_err());
        assert!(ImagePlane::new(2, 2, ColorSpace::Y, Range::Unit, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn range_conversion_and_quantization() {
        let img = ImagePlane::new(2, 1, ColorSpace::Y, Range::Unit, vec![1.2, 0.5]).unwrap();
        let b = img.to_range(Range::Byte);
        assert_eq!(b.data(), &[1.2 * 255.0, 127.5]);
        assert_eq!(img.clipped().data(), &[1.0, 0.5]);
        assert_eq!(b.quantized().data(), &[255.0, 128.0]);
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImagePlane::from_fn(3, 2, ColorSpace::Rgb, Range::Byte, |c, y, x| {
            (c * 100 + y * 10 + x) as f64
        })
        .unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), Shape::new(1, 3, 2, 3));
        assert!((t.get(0, 2, 1, 2) - 212.0 / 255.0).abs() < 1e-15);
        let back = ImagePlane::from_tensor(&t, 0, ColorSpace::Rgb).unwrap().to_range(Range::Byte);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let crop = img.crop(1, 1, 2, 1).unwrap();
        assert_eq!(crop.get(2, 0, 1), 212.0);
        assert!(img.crop(2, 0, 2, 1).is_err());
    }
}
