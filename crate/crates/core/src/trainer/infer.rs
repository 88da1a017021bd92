//! Generator-only inference with overlapping tiles, and the degrade → infer
//! → measure evaluation loop.

use std::path::{Path, PathBuf};

use crate::data::{degrade, load_image, save_image, ColorSpace, ImagePlane, Range};
use crate::engine::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::metrics::{measure, MetricOptions, MetricRow};

/// Tile extent and overlap, both in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileOptions {
    pub tile: usize,
    pub overlap: usize,
}

impl Default for TileOptions {
    fn default() -> Self {
        TileOptions {
            tile: 128,
            overlap: 8,
        }
    }
}

fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Blend weight along one axis: ramps up over `ramp` output pixels at an
/// edge shared with a neighbouring tile, flat elsewhere.
fn ramp_weight(i: usize, len: usize, ramp: usize, lead: bool, trail: bool) -> f64 {
    let mut w: f64 = 1.0;
    if ramp > 0 {
        if lead {
            w = w.min((i as f64 + 0.5) / ramp as f64);
        }
        if trail {
            w = w.min(((len - i) as f64 - 0.5) / ramp as f64);
        }
    }
    w.min(1.0)
}

/// Upscales one `[1, 3, H, W]` unit-range image, tiling when it exceeds the
/// tile size. The result is not clipped.
pub fn infer_tensor(g: &Generator, lr: &Tensor, tiles: TileOptions) -> Result<Tensor> {
    let s = lr.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::dimension(format!("inference takes one RGB image, got {s}")));
    }
    if tiles.tile == 0 || tiles.overlap >= tiles.tile {
        return Err(Error::config("tile size must exceed the overlap"));
    }
    if s.h <= tiles.tile && s.w <= tiles.tile {
        return g.infer(lr);
    }
    let r = g.spec.scale;
    let out_shape = Shape::new(1, 3, s.h * r, s.w * r);
    let mut acc = Tensor::zeros(out_shape);
    let mut norm = vec![0.0; out_shape.plane()];
    let ys = tile_starts(s.h, tiles.tile, tiles.overlap);
    let xs = tile_starts(s.w, tiles.tile, tiles.overlap);
    let ramp = tiles.overlap * r;
    for &y0 in &ys {
        let th = tiles.tile.min(s.h);
        for &x0 in &xs {
            let tw = tiles.tile.min(s.w);
            let patch = Tensor::from_fn(Shape::new(1, 3, th, tw), |_, c, y, x| lr.get(0, c, y0 + y, x0 + x));
            let out = g.infer(&patch)?;
            let (oh, ow) = (th * r, tw * r);
            for y in 0..oh {
                let wy = ramp_weight(y, oh, ramp, y0 > 0, y0 + th < s.h);
                for x in 0..ow {
                    let wx = ramp_weight(x, ow, ramp, x0 > 0, x0 + tw < s.w);
                    let w = wy * wx;
                    let (gy, gx) = (y0 * r + y, x0 * r + x);
                    norm[gy * out_shape.w + gx] += w;
                    for c in 0..3 {
                        let i = out_shape.index(0, c, gy, gx);
                        acc.data_mut()[i] += w * out.get(0, c, y, x);
                    }
                }
            }
        }
    }
    let plane = out_shape.plane();
    for (i, v) in acc.data_mut().iter_mut().enumerate() {
        *v /= norm[i % plane];
    }
    Ok(acc)
}

/// Upscales an RGB image and clips the result to [0, 1].
pub fn infer_image(g: &Generator, lr: &ImagePlane, tiles: TileOptions) -> Result<ImagePlane> {
    let rgb = lr.to_rgb()?;
    let out = infer_tensor(g, &rgb.to_tensor(), tiles)?;
    Ok(ImagePlane::from_tensor(&out, 0, ColorSpace::Rgb)?.clipped())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub metrics: MetricOptions,
    pub antialias: bool,
    pub tiles: TileOptions,
    /// Where to write the upscaled images, if anywhere.
    pub save_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metrics: MetricOptions::default(),
            antialias: true,
            tiles: TileOptions::default(),
            save_dir: None,
        }
    }
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// For every HR image: trim to a multiple of the scale, degrade, quantize,
/// upscale, quantize again and measure against the trimmed original.
pub fn evaluate(g: &Generator, images: &[PathBuf], opts: &EvalOptions) -> Result<Vec<MetricRow>> {
    let r = g.spec.scale;
    let mut rows = Vec::with_capacity(images.len());
    for path in images {
        let hr = load_image(path)?.to_rgb()?;
        let (w, h) = (hr.width() - hr.width() % r, hr.height() - hr.height() % r);
        if w == 0 || h == 0 {
            return Err(Error::contract(format!(
                "{} is smaller than the ×{r} scale",
                path.display()
            )));
        }
        let hr = hr.crop(0, 0, w, h)?.to_range(Range::Unit);
        let lr = degrade(&hr, r, opts.antialias)?.quantized();
        let sr = infer_image(g, &lr, opts.tiles)?.quantized();
        if let Some(dir) = &opts.save_dir {
            save_image(&sr, &dir.join(display_name(path)))?;
        }
        rows.push(measure(&display_name(path), &sr, &hr, opts.metrics)?);
    }
    Ok(rows)
}

/// Measures already upscaled images in `sr_dir` (matched by file name)
/// against the HR images.
pub fn evaluate_pairs(sr_dir: &Path, images: &[PathBuf], metrics: MetricOptions) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(images.len());
    for path in images {
        let name = display_name(path);
        let hr = load_image(path)?.to_rgb()?;
        let sr = load_image(&sr_dir.join(&name))?.to_rgb()?;
        rows.push(measure(&name, &sr, &hr, metrics)?);
    }
    Ok(rows)
}
