//! Defect-region segmentation and the seven-value descriptor fed to the severity forest.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::vit::DefectClass;

/// Binary defect region with the dimensions of its source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefectMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl DefectMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Argument(format!(
                "{width}x{height} mask needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Tunable constants of the extractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Sobel magnitude above which a pixel counts as an edge.
    pub edge_threshold: f64,
    pub histogram_bins: usize,
    pub glcm_levels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            edge_threshold: 0.25,
            histogram_bins: 32,
            glcm_levels: 8,
        }
    }
}

/// Region descriptor, in fixed column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub normalized_area: f64,
    pub edge_density: f64,
    pub color_entropy: f64,
    pub glcm_contrast: f64,
    pub glcm_energy: f64,
    pub glcm_homogeneity: f64,
    pub glcm_correlation: f64,
}

impl FeatureVector {
    pub const LEN: usize = 7;
    pub const NAMES: [&'static str; 7] = [
        "normalized_area",
        "edge_density",
        "color_entropy",
        "glcm_contrast",
        "glcm_energy",
        "glcm_homogeneity",
        "glcm_correlation",
    ];

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.normalized_area,
            self.edge_density,
            self.color_entropy,
            self.glcm_contrast,
            self.glcm_energy,
            self.glcm_homogeneity,
            self.glcm_correlation,
        ]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            normalized_area: v[0],
            edge_density: v[1],
            color_entropy: v[2],
            glcm_contrast: v[3],
            glcm_energy: v[4],
            glcm_homogeneity: v[5],
            glcm_correlation: v[6],
        }
    }
}

/// Contrast, energy, homogeneity and correlation of a gray-level co-occurrence matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlcmStats {
    pub contrast: f64,
    pub energy: f64,
    pub homogeneity: f64,
    pub correlation: f64,
}

impl GlcmStats {
    pub const DEGENERATE: GlcmStats = GlcmStats {
        contrast: 0.0,
        energy: 1.0,
        homogeneity: 1.0,
        correlation: 0.0,
    };
}

/// Otsu threshold over a 256-bin histogram of values in `[0, 1]`.
/// Pixels in bins strictly above the returned bin index form the upper class.
pub fn otsu_bin(values: &[f64]) -> usize {
    let mut hist = [0usize; 256];
    for v in values {
        hist[bin_of(*v, 256)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0, -1.0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best_var {
            best_var = between;
            best = t;
        }
    }
    best
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Otsu split of the luma, keeping the side that deviates more from the median,
/// followed by one 3×3 majority-vote pass. `Clean` yields an empty mask.
///
/// On equal deviation the smaller side is taken, and on a further tie the brighter one.
pub fn segment_defect(img: &RgbImage, predicted: DefectClass) -> DefectMask {
    let (w, h) = (img.width(), img.height());
    if predicted == DefectClass::Clean || w == 0 || h == 0 {
        return DefectMask::empty(w, h);
    }
    let gray = img.grayscale();
    let t = otsu_bin(&gray);
    let upper: Vec<bool> = gray.iter().map(|g| bin_of(*g, 256) > t).collect();
    let med = median(&gray);
    let side_stats = |want: bool| {
        let (n, dev) = gray
            .iter()
            .zip(&upper)
            .filter(|(_, u)| **u == want)
            .fold((0usize, 0.0), |(n, s), (g, _)| (n + 1, s + (g - med).abs()));
        (n, if n == 0 { 0.0 } else { dev / n as f64 })
    };
    let (n_hi, dev_hi) = side_stats(true);
    let (n_lo, dev_lo) = side_stats(false);
    let pick_upper = if dev_hi != dev_lo {
        dev_hi > dev_lo
    } else {
        n_hi <= n_lo
    };
    let raw: Vec<bool> = upper.iter().map(|u| *u == pick_upper).collect();
    DefectMask {
        width: w,
        height: h,
        bits: majority_smooth(&raw, w, h),
    }
}

/// A pixel is set when more than half of its in-frame 3×3 window is set.
fn majority_smooth(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; bits.len()];
    for y in 0..h {
        for x in 0..w {
            let (mut on, mut total) = (0, 0);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    total += 1;
                    on += bits[ny * w + nx] as usize;
                }
            }
            out[y * w + x] = 2 * on > total;
        }
    }
    out
}

pub fn normalized_area(mask: &DefectMask) -> f64 {
    let n = mask.width * mask.height;
    if n == 0 {
        0.0
    } else {
        mask.count() as f64 / n as f64
    }
}

/// Sobel magnitude at every pixel of a row-major luma plane, borders replicated.
pub fn sobel_magnitude(gray: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        gray[cy * w + cx]
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Share of masked pixels whose Sobel magnitude exceeds `threshold`.
pub fn edge_density(img: &RgbImage, mask: &DefectMask, threshold: f64) -> Result<f64> {
    check_mask(img, mask)?;
    if img.width() < 3 || img.height() < 3 {
        return Err(Error::Argument("edge density needs at least a 3x3 image".into()));
    }
    let selected = mask.count();
    if selected == 0 {
        return Ok(0.0);
    }
    let mag = sobel_magnitude(&img.grayscale(), img.width(), img.height());
    let edges = mag
        .iter()
        .zip(&mask.bits)
        .filter(|(m, b)| **b && **m > threshold)
        .count();
    Ok(edges as f64 / selected as f64)
}

/// Mean over R, G, B of the Shannon entropy (bits) of the masked pixel histogram.
pub fn color_histogram_entropy(img: &RgbImage, mask: &DefectMask, bins: usize) -> Result<f64> {
    check_mask(img, mask)?;
    if bins < 2 {
        return Err(Error::Argument("histogram needs at least 2 bins".into()));
    }
    let selected = mask.count();
    if selected == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for c in 0..3 {
        let mut hist = vec![0usize; bins];
        for (px, on) in img.data().chunks_exact(3).zip(&mask.bits) {
            if *on {
                hist[bin_of(px[c], bins)] += 1;
            }
        }
        total += hist
            .iter()
            .filter(|n| **n > 0)
            .map(|n| {
                let p = *n as f64 / selected as f64;
                -p * p.log2()
            })
            .sum::<f64>();
    }
    Ok(total / 3.0)
}

/// Pixel offsets `(row, column)` used for co-occurrence counting.
pub const GLCM_OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

/// Symmetric, normalized GLCM over pixel pairs lying entirely inside the mask,
/// with luma quantized to `levels` gray levels. Returns `levels × levels` probabilities
/// and the number of (unsymmetrized) pairs counted.
pub fn glcm_matrix(img: &RgbImage, mask: &DefectMask, levels: usize) -> (Vec<f64>, usize) {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let q: Vec<usize> = img.grayscale().iter().map(|g| bin_of(*g, levels)).collect();
    let mut counts = vec![0usize; levels * levels];
    let mut pairs = 0;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if !mask.bits[i] {
                continue;
            }
            for (dy, dx) in GLCM_OFFSETS {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h || nx >= w {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if !mask.bits[j] {
                    continue;
                }
                counts[q[i] * levels + q[j]] += 1;
                counts[q[j] * levels + q[i]] += 1;
                pairs += 1;
            }
        }
    }
    let total = (2 * pairs).max(1) as f64;
    (counts.iter().map(|c| *c as f64 / total).collect(), pairs)
}

/// Haralick-style statistics of a normalized co-occurrence matrix.
pub fn glcm_stats(p: &[f64], levels: usize) -> GlcmStats {
    let (mut mu_i, mut mu_j) = (0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let v = p[i * levels + j];
            mu_i += i as f64 * v;
            mu_j += j as f64 * v;
        }
    }
    let (mut var_i, mut var_j) = (0.0, 0.0);
    let (mut contrast, mut energy, mut homogeneity, mut cov) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let v = p[i * levels + j];
            let (di, dj) = (i as f64 - mu_i, j as f64 - mu_j);
            let diff = i.abs_diff(j) as f64;
            contrast += v * diff * diff;
            energy += v * v;
            homogeneity += v / (1.0 + diff);
            cov += v * di * dj;
            var_i += v * di * di;
            var_j += v * dj * dj;
        }
    }
    let (sd_i, sd_j) = (var_i.sqrt(), var_j.sqrt());
    let correlation = if sd_i > 1e-12 && sd_j > 1e-12 {
        (cov / (sd_i * sd_j)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    GlcmStats {
        contrast,
        energy,
        homogeneity,
        correlation,
    }
}

/// Texture statistics of the masked region; fewer than two pairs gives
/// [`GlcmStats::DEGENERATE`].
pub fn glcm_features(img: &RgbImage, mask: &DefectMask, levels: usize) -> Result<GlcmStats> {
    check_mask(img, mask)?;
    if img.width() < 2 || img.height() < 2 {
        return Err(Error::Argument("GLCM needs at least a 2x2 image".into()));
    }
    if levels < 2 {
        return Err(Error::Argument("GLCM needs at least 2 gray levels".into()));
    }
    let (p, pairs) = glcm_matrix(img, mask, levels);
    if pairs < 2 {
        return Ok(GlcmStats::DEGENERATE);
    }
    Ok(glcm_stats(&p, levels))
}

fn check_mask(img: &RgbImage, mask: &DefectMask) -> Result<()> {
    if img.width() != mask.width || img.height() != mask.height {
        return Err(Error::Argument(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width,
            mask.height,
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Descriptor of an already segmented region.
pub fn features_for_mask(img: &RgbImage, mask: &DefectMask, cfg: &FeatureConfig) -> Result<FeatureVector> {
    let glcm = glcm_features(img, mask, cfg.glcm_levels)?;
    Ok(FeatureVector {
        normalized_area: normalized_area(mask),
        edge_density: edge_density(img, mask, cfg.edge_threshold)?,
        color_entropy: color_histogram_entropy(img, mask, cfg.histogram_bins)?,
        glcm_contrast: glcm.contrast,
        glcm_energy: glcm.energy,
        glcm_homogeneity: glcm.homogeneity,
        glcm_correlation: glcm.correlation,
    })
}

/// Segments by predicted class, then measures the region.
pub fn extract_features(img: &RgbImage, predicted: DefectClass, cfg: &FeatureConfig) -> Result<FeatureVector> {
    let mask = segment_defect(img, predicted);
    features_for_mask(img, &mask, cfg)
}

/// Header of the feature CSV.
pub const CSV_HEADER: [&str; 9] = [
    "image_id",
    "class_code",
    "normalized_area",
    "edge_density",
    "color_entropy",
    "glcm_contrast",
    "glcm_energy",
    "glcm_homogeneity",
    "glcm_correlation",
];

/// Writes `(image id, predicted class, features)` rows under [`CSV_HEADER`].
pub fn write_features_csv<W: Write>(out: W, rows: &[(String, DefectClass, FeatureVector)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Argument(format!("csv write failed: {e}"));
    w.write_record(CSV_HEADER).map_err(io)?;
    for (id, class, f) in rows {
        let mut rec = vec![id.clone(), class.code().to_string()];
        rec.extend(f.to_array().iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Argument(format!("csv flush failed: {e}")))
}
