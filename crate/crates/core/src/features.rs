//! Local texture features around landmarks.
//!
//! The descriptor is an upright, fixed-scale SIFT: a gradient-orientation
//! histogram over a square patch centered on the landmark, with 4x4 spatial
//! cells, 8 orientation bins, Gaussian weighting and the usual
//! normalize/clamp/renormalize finish. There is no keypoint detection and no
//! scale or orientation estimation; the cascade dictates where descriptors
//! are sampled.

use nalgebra::DVector;

use crate::camera::{Bbox, LandmarkSet2D};
use crate::error::{Error, Result};

/// Grayscale image, row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width * height != pixels.len() {
            return Err(Error::DimensionMismatch {
                context: "gray image pixel buffer",
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(
                "image intensities must lie in [0, 1]".to_string(),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Intensity at integer coordinates, zero outside the image.
    #[inline]
    fn at(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.pixels[y as usize * self.width + x as usize]
        }
    }

    /// Bilinear sample at real coordinates; out-of-image reads are zero.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let v00 = self.at(xi, yi);
        let v10 = self.at(xi + 1, yi);
        let v01 = self.at(xi, yi + 1);
        let v11 = self.at(xi + 1, yi + 1);
        v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy
    }
}

/// How the descriptor patch size is chosen at extraction time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchMode {
    /// Fixed patch side in pixels.
    Fixed,
    /// Patch side is `bbox side / divisor`, rounded, clamped to at least 8.
    BboxFraction(f64),
}

/// Descriptor layout parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub patch_size: usize,
    pub cells: usize,
    pub orientation_bins: usize,
    pub clamp: f64,
    pub patch_mode: PatchMode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            cells: 4,
            orientation_bins: 8,
            clamp: 0.2,
            patch_mode: PatchMode::Fixed,
        }
    }
}

impl FeatureConfig {
    /// Descriptor length: `cells^2 * orientation_bins` (128 by default).
    pub fn descriptor_dim(&self) -> usize {
        self.cells * self.cells * self.orientation_bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 4 || self.cells == 0 || self.orientation_bins == 0 {
            return Err(Error::InvalidInput(format!(
                "invalid feature config: patch {}, cells {}, bins {}",
                self.patch_size, self.cells, self.orientation_bins
            )));
        }
        if !(self.clamp > 0.0 && self.clamp <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "descriptor clamp {} outside (0, 1]",
                self.clamp
            )));
        }
        if let PatchMode::BboxFraction(d) = self.patch_mode {
            if d <= 0.0 || d.is_nan() {
                return Err(Error::InvalidInput(
                    "bbox patch divisor must be positive".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Patch side to use for a face occupying `bbox`.
    pub fn resolve_patch_size(&self, bbox: &Bbox) -> usize {
        match self.patch_mode {
            PatchMode::Fixed => self.patch_size,
            PatchMode::BboxFraction(d) => ((bbox.side() / d).round() as usize).max(8),
        }
    }
}

/// Upright SIFT descriptor centered at `(u, v)`.
///
/// Gradients come from central differences on a `(patch+2)^2` bilinear
/// resampling of the image; an all-zero gradient field yields the zero
/// vector.
pub fn sift_descriptor(image: &GrayImage, center: (f64, f64), config: &FeatureConfig) -> DVector<f64> {
    sift_descriptor_sized(image, center, config, config.patch_size)
}

fn sift_descriptor_sized(
    image: &GrayImage,
    center: (f64, f64),
    config: &FeatureConfig,
    patch: usize,
) -> DVector<f64> {
    let cells = config.cells;
    let bins = config.orientation_bins;
    let dim = config.descriptor_dim();
    let mut hist = vec![0.0f64; dim];

    let p = patch as f64;
    let grid = patch + 2;
    // Symmetric sample offsets so that the grid maps onto itself under a
    // 180-degree rotation about the center.
    let half = (grid as f64 - 1.0) / 2.0;
    let mut samples = vec![0.0f64; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            samples[gy * grid + gx] = image.sample(
                center.0 + (gx as f64 - half),
                center.1 + (gy as f64 - half),
            );
        }
    }

    let sigma = p / 2.0;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let bins_f = bins as f64;
    let cells_f = cells as f64;
    for gy in 1..=patch {
        for gx in 1..=patch {
            let gxv = (samples[gy * grid + gx + 1] - samples[gy * grid + gx - 1]) * 0.5;
            let gyv = (samples[(gy + 1) * grid + gx] - samples[(gy - 1) * grid + gx]) * 0.5;
            let mag = (gxv * gxv + gyv * gyv).sqrt();
            if mag == 0.0 {
                continue;
            }
            let dx = gx as f64 - half;
            let dy = gy as f64 - half;
            let weight = mag * (-(dx * dx + dy * dy) * inv_two_sigma2).exp();

            let mut theta = gyv.atan2(gxv);
            if theta < 0.0 {
                theta += std::f64::consts::TAU;
            }
            let ob = theta / std::f64::consts::TAU * bins_f;
            let ob0 = ob.floor();
            let of = ob - ob0;
            let b0 = (ob0 as usize) % bins;
            let b1 = (b0 + 1) % bins;

            // Cell coordinates put cell centers at (i + 0.5) / cells of the
            // patch span.
            let cx = (dx / p + 0.5) * cells_f - 0.5;
            let cy = (dy / p + 0.5) * cells_f - 0.5;
            let cx0 = cx.floor();
            let cy0 = cy.floor();
            let fx = cx - cx0;
            let fy = cy - cy0;
            for (ci, wci) in [(cx0 as i64, 1.0 - fx), (cx0 as i64 + 1, fx)] {
                if ci < 0 || ci >= cells as i64 {
                    continue;
                }
                for (cj, wcj) in [(cy0 as i64, 1.0 - fy), (cy0 as i64 + 1, fy)] {
                    if cj < 0 || cj >= cells as i64 {
                        continue;
                    }
                    let cell_base = (cj as usize * cells + ci as usize) * bins;
                    let w = weight * wci * wcj;
                    hist[cell_base + b0] += w * (1.0 - of);
                    hist[cell_base + b1] += w * of;
                }
            }
        }
    }

    let mut desc = DVector::from_vec(hist);
    let norm = desc.norm();
    if norm <= 1e-12 {
        return DVector::zeros(dim);
    }
    desc /= norm;
    for v in desc.iter_mut() {
        if *v > config.clamp {
            *v = config.clamp;
        }
    }
    let norm = desc.norm();
    if norm <= 1e-12 {
        return DVector::zeros(dim);
    }
    desc / norm
}

/// Contract between the cascade and whatever produces per-landmark texture
/// features: image and current landmarks in, fixed-length vector out.
/// Invisible landmarks must contribute exact zero blocks.
pub trait FeatureExtractor: Sync {
    /// Length of one landmark's feature block.
    fn descriptor_dim(&self) -> usize;

    /// Full feature vector, `descriptor_dim * l` entries in landmark order.
    fn extract(&self, image: &GrayImage, landmarks: &LandmarkSet2D, bbox: &Bbox) -> DVector<f64>;
}

/// The default extractor: concatenated SIFT descriptors.
#[derive(Debug, Clone)]
pub struct SiftExtractor {
    pub config: FeatureConfig,
}

impl SiftExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl FeatureExtractor for SiftExtractor {
    fn descriptor_dim(&self) -> usize {
        self.config.descriptor_dim()
    }

    fn extract(&self, image: &GrayImage, landmarks: &LandmarkSet2D, bbox: &Bbox) -> DVector<f64> {
        let dim = self.descriptor_dim();
        let patch = self.config.resolve_patch_size(bbox);
        let mut out = DVector::zeros(dim * landmarks.len());
        for k in 0..landmarks.len() {
            if !landmarks.visible[k] {
                continue;
            }
            let p = landmarks.point(k);
            let desc = sift_descriptor_sized(image, (p[0], p[1]), &self.config, patch);
            out.rows_mut(k * dim, dim).copy_from(&desc);
        }
        out
    }
}

/// Concatenates per-landmark descriptors, zeroing invisible blocks.
pub fn assemble_features(
    image: &GrayImage,
    landmarks: &LandmarkSet2D,
    config: &FeatureConfig,
) -> DVector<f64> {
    let dim = config.descriptor_dim();
    let mut out = DVector::zeros(dim * landmarks.len());
    for k in 0..landmarks.len() {
        if !landmarks.visible[k] {
            continue;
        }
        let p = landmarks.point(k);
        let desc = sift_descriptor(image, (p[0], p[1]), config);
        out.rows_mut(k * dim, dim).copy_from(&desc);
    }
    out
}

/// Image-sized proximity map of the visible landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// `H(p) = 1 / (1 + min_j ||p - U_j||)` over visible landmarks `U_j`; all
/// zeros when nothing is visible.
pub fn heatmap(landmarks: &LandmarkSet2D, width: usize, height: usize) -> Result<Heatmap> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput(
            "heatmap dimensions must be positive".to_string(),
        ));
    }
    let visible: Vec<(f64, f64)> = (0..landmarks.len())
        .filter(|&k| landmarks.visible[k])
        .map(|k| (landmarks.point(k)[0], landmarks.point(k)[1]))
        .collect();
    let mut values = vec![0.0; width * height];
    if !visible.is_empty() {
        for y in 0..height {
            for x in 0..width {
                let mut best = f64::INFINITY;
                for &(u, v) in &visible {
                    let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                    if d2 < best {
                        best = d2;
                    }
                }
                values[y * width + x] = 1.0 / (1.0 + best.sqrt());
            }
        }
    }
    Ok(Heatmap {
        width,
        height,
        values,
    })
}
