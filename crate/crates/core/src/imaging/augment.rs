use serde::{Deserialize, Serialize};

use super::{gray_of, resize_bilinear, RgbImage};
use crate::error::{Error, Result};
use crate::rng::Rng;

const CROP_ATTEMPTS: usize = 10;

/// Training-time augmentation parameters. Defaults are the shipped training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotation_max_deg: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub output_size: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.7,
            crop_scale_max: 1.0,
            crop_ratio_min: 3.0 / 4.0,
            crop_ratio_max: 4.0 / 3.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_max_deg: 30.0,
            jitter_brightness: 0.4,
            jitter_contrast: 0.4,
            jitter_saturation: 0.2,
            jitter_hue: 0.1,
            output_size: 224,
        }
    }
}

impl AugmentationConfig {
    /// No stochastic change at all: full-frame crop, no flips, rotation or jitter.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            crop_ratio_min: 3.0 / 4.0,
            crop_ratio_max: 4.0 / 3.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_max_deg: 0.0,
            jitter_brightness: 0.0,
            jitter_contrast: 0.0,
            jitter_saturation: 0.0,
            jitter_hue: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max <= 1.0) {
            return bad(format!(
                "crop scale range ({}, {}) must satisfy 0 < min <= max <= 1",
                self.crop_scale_min, self.crop_scale_max
            ));
        }
        if !(self.crop_ratio_min > 0.0 && self.crop_ratio_min <= self.crop_ratio_max) {
            return bad("crop aspect ratio range must satisfy 0 < min <= max".into());
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.rotation_max_deg >= 0.0) {
            return bad("rotation_max_deg must be non-negative".into());
        }
        for (name, m) in [
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
            ("jitter_saturation", self.jitter_saturation),
            ("jitter_hue", self.jitter_hue),
        ] {
            if !(m >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if self.jitter_hue > 0.5 {
            return bad("jitter_hue must not exceed 0.5".into());
        }
        if self.output_size == 0 {
            return bad("output_size must be positive".into());
        }
        Ok(())
    }
}

/// Copies the `w`×`h` window whose top-left corner is (`x0`, `y0`).
pub fn crop(img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> Result<RgbImage> {
    if w == 0 || h == 0 || x0 + w > img.width() || y0 + h > img.height() {
        return Err(Error::Argument(format!(
            "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for y in y0..y0 + h {
        let start = (y * img.width() + x0) * 3;
        data.extend_from_slice(&img.data()[start..start + w * 3]);
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

pub fn random_resized_crop(img: &RgbImage, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<RgbImage> {
    let (width, height) = (img.width(), img.height());
    if width < 2 || height < 2 {
        return Err(Error::Argument("random_resized_crop needs at least 2x2".into()));
    }
    let area = (width * height) as f64;
    let (log_lo, log_hi) = (cfg.crop_ratio_min.ln(), cfg.crop_ratio_max.ln());
    let mut window = None;
    // A pinned full-area scale admits only the whole frame (or the ratio-clamped
    // center crop), so sampling is skipped.
    let attempts = if cfg.crop_scale_min >= 1.0 { 0 } else { CROP_ATTEMPTS };
    for _ in 0..attempts {
        let target = area * rng.uniform_range(cfg.crop_scale_min, cfg.crop_scale_max);
        let ratio = rng.uniform_range(log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x0 = rng.int_inclusive(0, width - w);
            let y0 = rng.int_inclusive(0, height - h);
            window = Some((x0, y0, w, h));
            break;
        }
    }
    let (x0, y0, w, h) = window.unwrap_or_else(|| center_window(width, height, cfg));
    let patch = crop(img, x0, y0, w, h)?;
    resize_bilinear(&patch, cfg.output_size, cfg.output_size)
}

fn center_window(width: usize, height: usize, cfg: &AugmentationConfig) -> (usize, usize, usize, usize) {
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < cfg.crop_ratio_min {
        (
            width,
            ((width as f64 / cfg.crop_ratio_min).round() as usize).clamp(1, height),
        )
    } else if in_ratio > cfg.crop_ratio_max {
        (
            ((height as f64 * cfg.crop_ratio_max).round() as usize).clamp(1, width),
            height,
        )
    } else {
        (width, height)
    };
    ((width - w) / 2, (height - h) / 2, w, h)
}

/// Mirrors left-right (`horizontal`) or top-bottom.
pub fn flip(img: &RgbImage, horizontal: bool) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = if horizontal { (w - 1 - x, y) } else { (x, h - 1 - y) };
            out.set_pixel(x, y, img.pixel(sx, sy));
        }
    }
    out
}

pub fn random_flip(img: &RgbImage, horizontal: bool, prob: f64, rng: &mut Rng) -> RgbImage {
    if rng.bernoulli(prob) {
        flip(img, horizontal)
    } else {
        img.clone()
    }
}

/// Rotates counter-clockwise by `degrees` about the image center.
/// Bilinear resampling; source points outside the frame are filled with 0.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let mut out = RgbImage::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = snap(cx + cos * dx - sin * dy);
            let sy = snap(cy + sin * dx + cos * dy);
            if sx < 0.0 || sy < 0.0 || sx > max_x || sy > max_y {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let (p00, p10, p01, p11) = (
                img.pixel(x0, y0),
                img.pixel(x1, y0),
                img.pixel(x0, y1),
                img.pixel(x1, y1),
            );
            let mut px = [0.0; 3];
            for c in 0..3 {
                let top = p00[c] * (1.0 - fx) + p10[c] * fx;
                let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
                px[c] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

// Trig round-off near exact quarter turns would otherwise push border samples
// just outside the frame.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

pub fn random_rotation(img: &RgbImage, max_deg: f64, rng: &mut Rng) -> RgbImage {
    if max_deg <= 0.0 {
        return img.clone();
    }
    let angle = rng.uniform_range(-max_deg, max_deg);
    rotate(img, angle)
}

pub fn adjust_brightness(img: &RgbImage, factor: f64) -> RgbImage {
    img.map_pixels(|p| p.map(|v| v * factor))
}

/// Blends toward the mean luma of the whole image.
pub fn adjust_contrast(img: &RgbImage, factor: f64) -> RgbImage {
    let gray = img.grayscale();
    let mean = gray.iter().sum::<f64>() / gray.len().max(1) as f64;
    img.map_pixels(|p| p.map(|v| factor * v + (1.0 - factor) * mean))
}

/// Blends toward each pixel's own luma.
pub fn adjust_saturation(img: &RgbImage, factor: f64) -> RgbImage {
    img.map_pixels(|p| {
        let g = gray_of(p);
        p.map(|v| factor * v + (1.0 - factor) * g)
    })
}

/// Rotates hue by `shift` turns in HSV space.
pub fn adjust_hue(img: &RgbImage, shift: f64) -> RgbImage {
    img.map_pixels(|p| {
        let (h, s, v) = rgb_to_hsv(p);
        hsv_to_rgb((h + shift).rem_euclid(1.0), s, v)
    })
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    if s == 0.0 {
        return [v, v, v];
    }
    let h6 = h * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, contrast, saturation and hue perturbations in a random order.
pub fn color_jitter(img: &RgbImage, cfg: &AugmentationConfig, rng: &mut Rng) -> RgbImage {
    let mut order = [0usize, 1, 2, 3];
    rng.shuffle(&mut order);
    let factor = |m: f64, rng: &mut Rng| rng.uniform_range((1.0 - m).max(0.0), 1.0 + m);
    let mut out = img.clone();
    for op in order {
        out = match op {
            0 if cfg.jitter_brightness > 0.0 => adjust_brightness(&out, factor(cfg.jitter_brightness, rng)),
            1 if cfg.jitter_contrast > 0.0 => adjust_contrast(&out, factor(cfg.jitter_contrast, rng)),
            2 if cfg.jitter_saturation > 0.0 => adjust_saturation(&out, factor(cfg.jitter_saturation, rng)),
            3 if cfg.jitter_hue > 0.0 => adjust_hue(&out, rng.uniform_range(-cfg.jitter_hue, cfg.jitter_hue)),
            _ => continue,
        };
    }
    out
}

/// Crop, flips, rotation, then color jitter.
pub fn augment(img: &RgbImage, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<RgbImage> {
    cfg.validate()?;
    let out = random_resized_crop(img, cfg, rng)?;
    let out = random_flip(&out, true, cfg.hflip_prob, rng);
    let out = random_flip(&out, false, cfg.vflip_prob, rng);
    let out = random_rotation(&out, cfg.rotation_max_deg, rng);
    Ok(color_jitter(&out, cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn noise(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut r = Rng::new(seed);
        RgbImage::from_fn(w, h, |_, _| [r.uniform(), r.uniform(), r.uniform()])
    }

    #[test]
    fn pinned_scale_crop_is_plain_resize() {
        let img = noise(40, 40, 1);
        let cfg = AugmentationConfig::identity(224);
        let out = random_resized_crop(&img, &cfg, &mut Rng::new(2)).unwrap();
        assert_eq!(out, resize_bilinear(&img, 224, 224).unwrap());
    }

    #[test]
    fn pinned_scale_crop_at_output_size_is_identity() {
        let img = noise(32, 32, 4);
        let cfg = AugmentationConfig::identity(32);
        assert_eq!(random_resized_crop(&img, &cfg, &mut Rng::new(9)).unwrap(), img);
    }

    #[test]
    fn crop_of_constant_is_constant() {
        let img = RgbImage::filled(50, 30, [0.3, 0.6, 0.9]);
        let cfg = AugmentationConfig::default();
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let out = random_resized_crop(&img, &cfg, &mut rng).unwrap();
            assert_eq!((out.width(), out.height()), (224, 224));
            for px in out.data().chunks_exact(3) {
                assert!((px[0] - 0.3).abs() < 1e-12 && (px[1] - 0.6).abs() < 1e-12 && (px[2] - 0.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_falls_back_to_center_when_sampling_fails() {
        // A 100x2 strip never admits a crop with aspect in [3/4, 4/3] and area >= 70%.
        let img = noise(100, 2, 5);
        let cfg = AugmentationConfig {
            output_size: 8,
            ..Default::default()
        };
        let out = random_resized_crop(&img, &cfg, &mut Rng::new(1)).unwrap();
        let expected = resize_bilinear(&crop(&img, 48, 0, 3, 2).unwrap(), 8, 8).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn crop_is_seed_deterministic() {
        let img = noise(64, 48, 3);
        let cfg = AugmentationConfig::default();
        let a = random_resized_crop(&img, &cfg, &mut Rng::new(42)).unwrap();
        let b = random_resized_crop(&img, &cfg, &mut Rng::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flip_cases() {
        let img = noise(5, 4, 8);
        let mut rng = Rng::new(0);
        assert_eq!(random_flip(&img, true, 0.0, &mut rng), img);
        let twice = random_flip(&random_flip(&img, true, 1.0, &mut rng), true, 1.0, &mut rng);
        assert_eq!(twice, img);
        let twice = random_flip(&random_flip(&img, false, 1.0, &mut rng), false, 1.0, &mut rng);
        assert_eq!(twice, img);

        let pair = RgbImage::new(2, 1, vec![0.1, 0.2, 0.3, 0.7, 0.8, 0.9]).unwrap();
        let flipped = random_flip(&pair, true, 1.0, &mut rng);
        assert_eq!(flipped.data(), &[0.7, 0.8, 0.9, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn rotation_zero_is_identity() {
        let img = noise(9, 7, 2);
        assert_eq!(random_rotation(&img, 0.0, &mut Rng::new(1)), img);
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn rotate_quarter_turn_is_transpose_then_reverse_rows() {
        let img = noise(3, 3, 21);
        let out = rotate(&img, 90.0);
        // Counter-clockwise quarter turn: out[r][c] = in[c][n-1-r].
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(out.pixel(c, r), img.pixel(2 - r, c), "at row {r} col {c}");
            }
        }
    }

    #[test]
    fn rotated_constant_keeps_interior() {
        let img = RgbImage::filled(21, 21, [0.4; 3]);
        let out = random_rotation(&img, 30.0, &mut Rng::new(6));
        // The inscribed disc always stays inside the frame.
        for y in 0..21 {
            for x in 0..21 {
                let d = ((x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2)).sqrt();
                let v = out.pixel(x, y)[0];
                if d <= 9.0 {
                    assert!((v - 0.4).abs() < 1e-12);
                } else {
                    assert!((0.0..=0.4 + 1e-12).contains(&v));
                }
            }
        }
    }

    #[test]
    fn jitter_zero_magnitudes_is_identity() {
        let img = noise(6, 6, 13);
        let cfg = AugmentationConfig::identity(6);
        assert_eq!(color_jitter(&img, &cfg, &mut Rng::new(4)), img);
    }

    #[test]
    fn gray_image_fixed_under_saturation_and_hue() {
        let img = RgbImage::from_fn(4, 4, |x, y| [0.05 * (x + y) as f64; 3]);
        let cfg = AugmentationConfig {
            jitter_saturation: 0.2,
            jitter_hue: 0.1,
            ..AugmentationConfig::identity(4)
        };
        let mut rng = Rng::new(77);
        for _ in 0..10 {
            let out = color_jitter(&img, &cfg, &mut rng);
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn brightness_scales_directly() {
        let img = RgbImage::filled(3, 3, [0.5; 3]);
        let out = adjust_brightness(&img, 1.4);
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn hue_round_trip_through_hsv() {
        for p in [[0.9, 0.1, 0.3], [0.2, 0.7, 0.4], [0.1, 0.2, 0.95], [0.5, 0.5, 0.1]] {
            let (h, s, v) = rgb_to_hsv(p);
            let q = hsv_to_rgb(h, s, v);
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-12);
            }
        }
        let red = RgbImage::filled(1, 1, [1.0, 0.0, 0.0]);
        let green = adjust_hue(&red, 1.0 / 3.0);
        let g = green.pixel(0, 0);
        assert!(g[0].abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12 && g[2].abs() < 1e-12);
    }

    #[test]
    fn augment_identity_config_is_resize_only() {
        let img = noise(50, 40, 17);
        let cfg = AugmentationConfig::identity(24);
        let out = augment(&img, &cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(out, resize_bilinear(&img, 24, 24).unwrap());
    }

    #[test]
    fn augment_is_reproducible_and_square() {
        let img = noise(60, 45, 19);
        let cfg = AugmentationConfig::default();
        let a = augment(&img, &cfg, &mut Rng::new(8)).unwrap();
        let b = augment(&img, &cfg, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);

        let mut rng = Rng::new(100);
        let small = AugmentationConfig {
            output_size: 224,
            ..Default::default()
        };
        for _ in 0..100 {
            let out = augment(&img, &small, &mut rng).unwrap();
            assert_eq!((out.width(), out.height()), (224, 224));
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = AugmentationConfig {
            crop_scale_min: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig {
            hflip_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig {
            jitter_hue: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn augment_stays_in_unit_range(seed in any::<u64>(), w in 2usize..40, h in 2usize..40) {
            let img = noise(w, h, seed);
            let cfg = AugmentationConfig { output_size: 16, ..Default::default() };
            let out = augment(&img, &cfg, &mut Rng::new(seed ^ 0x5eed)).unwrap();
            prop_assert_eq!((out.width(), out.height()), (16, 16));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
