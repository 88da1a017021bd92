//! 8-bit PNG reading and writing, and plain-text image manifests.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use super::plane::{ColorSpace, ImagePlane, Range};
use crate::error::{Error, Result};

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

/// Reads a PNG as a byte-range image. Grayscale files load as a one-channel
/// Y image, everything else as RGB (alpha is dropped).
pub fn load_image(path: &Path) -> Result<ImagePlane> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.into_raw().into_iter().map(f64::from).collect();
            ImagePlane::new(w as usize, h as usize, ColorSpace::Y, Range::Byte, data)
        }
        _ => {
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            ImagePlane::from_fn(w, h, ColorSpace::Rgb, Range::Byte, |c, y, x| {
                f64::from(raw[(y * w + x) * 3 + c])
            })
        }
    }
}

/// Clips to range, rounds to 8 bits and writes a PNG. RGB images are saved
/// as RGB, one-channel images as grayscale. YCbCr data is refused.
pub fn save_image(img: &ImagePlane, path: &Path) -> Result<()> {
    let bytes = img.to_range(Range::Byte).quantized();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let level = |v: f64| v as u8;
    let out = match img.space() {
        ColorSpace::Rgb => {
            let n = img.width() * img.height();
            let mut raw = Vec::with_capacity(3 * n);
            for i in 0..n {
                for c in 0..3 {
                    raw.push(level(bytes.data()[c * n + i]));
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer sized to image"))
        }
        ColorSpace::Y => {
            let raw = bytes.data().iter().map(|&v| level(v)).collect();
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer sized to image"))
        }
        ColorSpace::YCbCr => {
            return Err(Error::contract("convert YCbCr images to RGB before saving"));
        }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// One path per line. Blank lines and `#` comments are skipped; relative
/// paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(parse_manifest(&text)
        .into_iter()
        .map(|p| if p.is_absolute() { p } else { base.join(p) })
        .collect())
}

pub fn parse_manifest(text: &str) -> Vec<PathBuf> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(PathBuf::from)
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
