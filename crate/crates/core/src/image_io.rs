//! 8-bit RGB images: loading, saving, padding and tensor conversion.

use std::path::Path;

use image::ImageFormat;

use crate::error::{Error, Result};
use crate::network::DOWNSAMPLE;
use crate::numerics::{Shape, Tensor};

/// Interleaved 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        RgbImage { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// 1x3xHxW tensor with values `pixel / scale`.
    pub fn to_tensor(&self, scale: f64) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |_, c, y, x| {
            self.get(x, y, c) as f64 / scale
        })
    }

    /// Top-left `width x height` window of batch item 0, multiplied by
    /// `scale`, clamped to [0, 255] and rounded.
    pub fn from_tensor(t: &Tensor, scale: f64, width: usize, height: usize) -> Result<Self> {
        let s = t.shape();
        if s.channels != 3 || s.batch == 0 || s.width < width || s.height < height {
            return Err(Error::invalid(format!(
                "cannot take a {width}x{height} RGB image from tensor {s}"
            )));
        }
        Ok(RgbImage::from_fn(width, height, |x, y, c| to_u8(t.at(0, c, y, x) * scale)))
    }

    /// Crops the top-left `width x height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return Err(Error::invalid(format!(
                "crop {width}x{height} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(RgbImage::from_fn(width, height, |x, y, c| self.get(x, y, c)))
    }
}

/// Clamps to [0, 255] and rounds half away from zero.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.clamp(0.0, 255.0).round() as u8
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads right and bottom to the next multiple of 16. Returns the
/// padded image and the original `(width, height)`.
pub fn pad_image(img: &RgbImage) -> (RgbImage, (usize, usize)) {
    let w = img.width.div_ceil(DOWNSAMPLE) * DOWNSAMPLE;
    let h = img.height.div_ceil(DOWNSAMPLE) * DOWNSAMPLE;
    if w == img.width && h == img.height {
        return (img.clone(), (img.width, img.height));
    }
    let padded = RgbImage::from_fn(w, h, |x, y, c| {
        img.get(reflect(x, img.width), reflect(y, img.height), c)
    });
    (padded, (img.width, img.height))
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "ppm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::Unsupported(format!(
            "image format of {}; use .png or .ppm",
            path.display()
        ))),
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let format = format_for(path)?;
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Image(format!("cannot read {}: {e}", path.display())))?;
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::invalid("image buffer size mismatch"))?;
    buf.save_with_format(path, format)?;
    Ok(())
}
