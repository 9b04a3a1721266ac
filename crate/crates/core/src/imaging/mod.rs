//! Raster ingestion, resizing, normalization and training-time augmentation.

mod augment;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{
    adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, augment, color_jitter, crop, flip, random_flip,
    random_resized_crop, random_rotation, rotate, AugmentationConfig,
};

/// ImageNet channel statistics, the default for imported backbones.
pub const DEFAULT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const DEFAULT_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Luma weights used for every grayscale conversion.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major H×W×3 image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Argument(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let rgb = rgb.map(|v| v.clamp(0.0, 1.0));
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    /// Builds an image from a per-pixel closure; values are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub(crate) fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks_exact(3) {
            let out = f([px[0], px[1], px[2]]);
            data.extend(out.iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Weighted luma, one value per pixel in row-major order.
    pub fn grayscale(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| gray_of([p[0], p[1], p[2]])).collect()
    }

    /// Converts to 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::format(path, other.to_string()),
            })
    }
}

pub(crate) fn gray_of(p: [f64; 3]) -> f64 {
    GRAY_WEIGHTS[0] * p[0] + GRAY_WEIGHTS[1] * p[1] + GRAY_WEIGHTS[2] * p[2]
}

/// Decodes a PNG or JPEG file into `[0, 1]` intensities.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(RgbImage {
        width: w as usize,
        height: h as usize,
        data,
    })
}

/// Bilinear resampling with half-pixel centers (align-corners off).
pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Result<RgbImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Argument(format!(
            "resize target {out_w}x{out_h} must be at least 1x1"
        )));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::Argument("cannot resize an empty image".into()));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let xs = axis_taps(img.width, out_w);
    let ys = axis_taps(img.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let p00 = img.pixel(x0, y0);
            let p10 = img.pixel(x1, y0);
            let p01 = img.pixel(x0, y1);
            let p11 = img.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] * (1.0 - wx) + p10[c] * wx;
                let bottom = p01[c] * (1.0 - wx) + p11[c] * wx;
                data.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(RgbImage {
        width: out_w,
        height: out_h,
        data,
    })
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Standardizes each channel and returns a channel-first 3×H×W tensor.
pub fn normalize(img: &RgbImage, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor> {
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Argument(format!("normalization std must be positive, got {s}")));
    }
    let plane = img.width * img.height;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (px[c] - mean[c]) / std[c];
        }
    }
    Tensor::new(vec![3, img.height, img.width], out)
}
