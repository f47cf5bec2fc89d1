//! Invertible per-view augmentation.
//!
//! Inputs are colour-jittered, flipped, rotated about the image centre and
//! cropped. Predicted heatmaps come back in the cropped frame and are mapped
//! to the original frame by the exact inverse (pad, inverse rotation, flip),
//! expressed as a sparse linear map so gradients pass through it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{Heatmap, InputTensor, INPUT_CHANNELS};
use crate::tensorgrad::SparseMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("crop {crop_h}x{crop_w} larger than image {height}x{width}")]
    CropTooLarge { crop_h: usize, crop_w: usize, height: usize, width: usize },
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("record does not match raster: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_h: usize,
    pub crop_w: usize,
    pub rot_deg_max: f64,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
}

impl AugmentConfig {
    /// Flip 0.5, rotation ±15°, jitter factors in [0.8, 1.2], and a crop
    /// keeping the 208/240 by 288/320 ratio of the image size.
    pub fn standard(height: usize, width: usize) -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            crop_h: (height as f64 * 208.0 / 240.0).ceil() as usize,
            crop_w: (width as f64 * 288.0 / 320.0).ceil() as usize,
            rot_deg_max: 15.0,
            brightness: [0.8, 1.2],
            contrast: [0.8, 1.2],
            saturation: [0.8, 1.2],
        }
    }

    /// No augmentation at all.
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            crop_h: height,
            crop_w: width,
            rot_deg_max: 0.0,
            brightness: [1.0, 1.0],
            contrast: [1.0, 1.0],
            saturation: [1.0, 1.0],
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<(), AugmentError> {
        if self.crop_h > height || self.crop_w > width {
            return Err(AugmentError::CropTooLarge { crop_h: self.crop_h, crop_w: self.crop_w, height, width });
        }
        if self.crop_h == 0 || self.crop_w == 0 {
            return Err(AugmentError::Config("crop size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(AugmentError::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.rot_deg_max >= 0.0 && self.rot_deg_max < 90.0) {
            return Err(AugmentError::Config(format!("rot_deg_max {} outside [0, 90)", self.rot_deg_max)));
        }
        for (name, r) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(AugmentError::Config(format!("{name} range {r:?} invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter { brightness: 1.0, contrast: 1.0, saturation: 1.0 };
}

/// Augmentation applied to one view of `height × width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewAugmentation {
    pub height: usize,
    pub width: usize,
    pub flip: bool,
    pub crop: CropWindow,
    pub rotation_deg: f64,
    pub jitter: ColorJitter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub views: Vec<ViewAugmentation>,
}

impl AugmentationRecord {
    pub fn identity(views: usize, height: usize, width: usize) -> Self {
        AugmentationRecord { views: vec![ViewAugmentation::identity(height, width); views] }
    }
}

pub fn sample_augmentation(
    cfg: &AugmentConfig,
    views: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<AugmentationRecord, AugmentError> {
    cfg.validate(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = (0..views).map(|_| ViewAugmentation::sample(cfg, height, width, &mut rng)).collect();
    Ok(AugmentationRecord { views })
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

impl ViewAugmentation {
    pub fn identity(height: usize, width: usize) -> Self {
        ViewAugmentation {
            height,
            width,
            flip: false,
            crop: CropWindow { row: 0, col: 0, height, width },
            rotation_deg: 0.0,
            jitter: ColorJitter::NONE,
        }
    }

    fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let flip = rng.gen_bool(cfg.flip_prob);
        let row = rng.gen_range(0..=height - cfg.crop_h);
        let col = rng.gen_range(0..=width - cfg.crop_w);
        let rotation_deg = uniform(rng, [-cfg.rot_deg_max, cfg.rot_deg_max]);
        let jitter = ColorJitter {
            brightness: uniform(rng, cfg.brightness),
            contrast: uniform(rng, cfg.contrast),
            saturation: uniform(rng, cfg.saturation),
        };
        ViewAugmentation {
            height,
            width,
            flip,
            crop: CropWindow { row, col, height: cfg.crop_h, width: cfg.crop_w },
            rotation_deg,
            jitter,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == ViewAugmentation::identity(self.height, self.width)
    }

    fn centre(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    fn rotate(&self, (x, y): (f64, f64), degrees: f64) -> (f64, f64) {
        if degrees == 0.0 {
            return (x, y);
        }
        let (s, c) = degrees.to_radians().sin_cos();
        let (cx, cy) = self.centre();
        let (dx, dy) = (x - cx, y - cy);
        (c * dx - s * dy + cx, s * dx + c * dy + cy)
    }

    fn flip_x(&self, x: f64) -> f64 {
        if self.flip {
            self.width as f64 - 1.0 - x
        } else {
            x
        }
    }

    /// Where an augmented-frame pixel takes its content from, in original
    /// image coordinates.
    pub fn augmented_to_original(&self, ax: f64, ay: f64) -> (f64, f64) {
        let r = (ax + self.crop.col as f64, ay + self.crop.row as f64);
        let (fx, fy) = self.rotate(r, -self.rotation_deg);
        (self.flip_x(fx), fy)
    }

    /// Where original-frame content lands in the augmented frame.
    pub fn original_to_augmented(&self, ox: f64, oy: f64) -> (f64, f64) {
        let (rx, ry) = self.rotate((self.flip_x(ox), oy), self.rotation_deg);
        (rx - self.crop.col as f64, ry - self.crop.row as f64)
    }

    fn check_crop(&self) -> Result<(), AugmentError> {
        let c = self.crop;
        if c.row + c.height > self.height || c.col + c.width > self.width || c.height == 0 || c.width == 0 {
            return Err(AugmentError::Mismatch(format!("crop window {c:?} outside {}x{}", self.height, self.width)));
        }
        Ok(())
    }

    /// Sparse map from original rasters to the augmented (cropped) frame,
    /// bilinear. Rows whose source falls outside the image are empty.
    pub fn forward_map(&self) -> SparseMap {
        let (cw, ch) = (self.crop.width, self.crop.height);
        let rows = (0..ch * cw).map(|i| {
            let (sx, sy) = self.augmented_to_original((i % cw) as f64, (i / cw) as f64);
            bilinear_entries(sx, sy, self.width, self.height).unwrap_or_default()
        });
        SparseMap::from_rows(self.width * self.height, rows)
    }

    /// Sparse inverse map from augmented-frame heatmaps back to the original
    /// frame, plus the coverage mask: original pixels without a pre-image in
    /// the augmented frame are uncovered and must be filled with ε.
    pub fn inverse_map(&self) -> (SparseMap, Vec<bool>) {
        let (w, h) = (self.width, self.height);
        let mut covered = vec![false; w * h];
        let rows: Vec<Vec<(usize, f64)>> = (0..w * h)
            .map(|i| {
                let (ax, ay) = self.original_to_augmented((i % w) as f64, (i / w) as f64);
                match bilinear_entries(ax, ay, self.crop.width, self.crop.height) {
                    Some(e) => {
                        covered[i] = true;
                        e
                    }
                    None => Vec::new(),
                }
            })
            .collect();
        (SparseMap::from_rows(self.crop.width * self.crop.height, rows), covered)
    }
}

/// Cached inverse map for one view, shareable across tapes.
#[derive(Debug, Clone)]
pub struct InverseWarp {
    pub map: Arc<SparseMap>,
    pub covered: Arc<Vec<bool>>,
}

impl InverseWarp {
    pub fn new(aug: &ViewAugmentation) -> Self {
        let (map, covered) = aug.inverse_map();
        InverseWarp { map: Arc::new(map), covered: Arc::new(covered) }
    }
}

const EDGE_TOLERANCE: f64 = 1e-9;

/// Bilinear interpolation weights at continuous `(x, y)` in a `w × h` grid,
/// or `None` when the point lies outside the pixel-centre hull.
fn bilinear_entries(x: f64, y: f64, w: usize, h: usize) -> Option<Vec<(usize, f64)>> {
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    if x < -EDGE_TOLERANCE || y < -EDGE_TOLERANCE || x > wf + EDGE_TOLERANCE || y > hf + EDGE_TOLERANCE {
        return None;
    }
    let (x, y) = (x.clamp(0.0, wf), y.clamp(0.0, hf));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let mut out = Vec::with_capacity(4);
    for (xi, yi, wgt) in [
        (x0, y0, (1.0 - tx) * (1.0 - ty)),
        (x1, y0, tx * (1.0 - ty)),
        (x0, y1, (1.0 - tx) * ty),
        (x1, y1, tx * ty),
    ] {
        if wgt != 0.0 {
            out.push((yi * w + xi, wgt));
        }
    }
    Some(out)
}

fn nearest_index(x: f64, y: f64, w: usize, h: usize) -> Option<usize> {
    let (xr, yr) = (x.round(), y.round());
    if xr < 0.0 || yr < 0.0 || xr >= w as f64 || yr >= h as f64 {
        return None;
    }
    Some(yr as usize * w + xr as usize)
}

fn jitter_colour(values: &mut [f64], n: usize, j: &ColorJitter) {
    let gray = |v: &[f64], i: usize| 0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i];
    if j.brightness != 1.0 {
        values.iter_mut().for_each(|v| *v = (*v * j.brightness).clamp(0.0, 1.0));
    }
    if j.contrast != 1.0 {
        let mean = (0..n).map(|i| gray(values, i)).sum::<f64>() / n as f64;
        values.iter_mut().for_each(|v| *v = ((*v - mean) * j.contrast + mean).clamp(0.0, 1.0));
    }
    if j.saturation != 1.0 {
        for i in 0..n {
            let g = gray(values, i);
            for c in 0..3 {
                let v = &mut values[c * n + i];
                *v = ((*v - g) * j.saturation + g).clamp(0.0, 1.0);
            }
        }
    }
}

/// Colour jitter (colour channels only), then flip, rotation and crop.
/// Colour is resampled bilinearly; depth and the box mask use nearest
/// neighbour so depth is never interpolated across the unknown marker.
pub fn apply_to_input(input: &InputTensor, aug: &ViewAugmentation) -> Result<InputTensor, AugmentError> {
    if input.width != aug.width || input.height != aug.height {
        return Err(AugmentError::Mismatch(format!(
            "input {}x{} vs record {}x{}",
            input.height, input.width, aug.height, aug.width
        )));
    }
    aug.check_crop()?;
    let n = aug.width * aug.height;
    let mut colour = input.values[..3 * n].to_vec();
    jitter_colour(&mut colour, n, &aug.jitter);

    let (cw, ch) = (aug.crop.width, aug.crop.height);
    let m = cw * ch;
    let map = aug.forward_map();
    let mut out = InputTensor { width: cw, height: ch, values: vec![0.0; INPUT_CHANNELS * m] };
    for c in 0..3 {
        map.apply(&colour[c * n..(c + 1) * n], &mut out.values[c * m..(c + 1) * m]);
    }
    for i in 0..m {
        let (sx, sy) = aug.augmented_to_original((i % cw) as f64, (i / cw) as f64);
        if let Some(src) = nearest_index(sx, sy, aug.width, aug.height) {
            out.values[3 * m + i] = input.values[3 * n + src];
            out.values[4 * m + i] = input.values[4 * n + src];
        }
    }
    Ok(out)
}

/// Forward geometric transform of a heatmap-shaped raster (bilinear), into
/// the augmented frame. Pixels without a source get `fill`.
pub fn apply_to_raster(values: &[f64], aug: &ViewAugmentation, fill: f64) -> Result<Vec<f64>, AugmentError> {
    if values.len() != aug.width * aug.height {
        return Err(AugmentError::Mismatch(format!("{} values for {}x{}", values.len(), aug.height, aug.width)));
    }
    aug.check_crop()?;
    let map = aug.forward_map();
    let mut out = vec![0.0; map.n_out()];
    map.apply(values, &mut out);
    for (r, o) in out.iter_mut().enumerate() {
        if map.row(r).is_empty() {
            *o = fill;
        }
    }
    Ok(out)
}

/// Maps a heatmap predicted in the augmented frame back to the original
/// frame. Pixels with no pre-image receive `epsilon`.
pub fn invert_on_heatmap(h: &Heatmap, aug: &ViewAugmentation, epsilon: f64) -> Result<Heatmap, AugmentError> {
    if h.width != aug.crop.width || h.height != aug.crop.height {
        return Err(AugmentError::Mismatch(format!(
            "heatmap {}x{} vs crop {}x{}",
            h.height, h.width, aug.crop.height, aug.crop.width
        )));
    }
    aug.check_crop()?;
    let (map, covered) = aug.inverse_map();
    let mut values = vec![0.0; map.n_out()];
    map.apply(&h.values, &mut values);
    for (v, c) in values.iter_mut().zip(&covered) {
        if !c {
            *v = epsilon;
        }
    }
    Ok(Heatmap { view: h.view, joint: h.joint, width: aug.width, height: aug.height, values })
}
