//! Per-view activation rasters, person boxes, depth images and the ε-mask.
//!
//! All rasters are row-major with index `y * width + x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default exclusion value. Large enough that `exp(ε − max)` underflows to
/// exactly zero for any realistic activation.
pub const DEFAULT_EPSILON: f64 = -1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeatmapError {
    #[error("size mismatch: {0}")]
    Shape(String),
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub view: usize,
    pub joint: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(view: usize, joint: usize, width: usize, height: usize, values: Vec<f64>) -> Result<Self, HeatmapError> {
        if values.len() != width * height {
            return Err(HeatmapError::Shape(format!("{} values for {width}x{height}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HeatmapError::Invalid { what: "heatmap", detail: "non-finite activation".into() });
        }
        Ok(Heatmap { view, joint, width, height, values })
    }

    pub fn filled(view: usize, joint: usize, width: usize, height: usize, value: f64) -> Self {
        Heatmap { view, joint, width, height, values: vec![value; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Person box in pixels, `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub view: usize,
    pub person: usize,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(
        view: usize,
        person: usize,
        (x_min, y_min): (usize, usize),
        (x_max, y_max): (usize, usize),
        (width, height): (usize, usize),
    ) -> Result<Self, HeatmapError> {
        let b = BoundingBox { view, person, x_min, y_min, x_max, y_max };
        b.validate(width, height)?;
        Ok(b)
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), HeatmapError> {
        if self.x_min < self.x_max && self.x_max <= width && self.y_min < self.y_max && self.y_max <= height {
            Ok(())
        } else {
            Err(HeatmapError::Invalid {
                what: "bounding box",
                detail: format!(
                    "[{}, {}) x [{}, {}) in a {width}x{height} image",
                    self.x_min, self.x_max, self.y_min, self.y_max
                ),
            })
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min as f64 && x < self.x_max as f64 && y >= self.y_min as f64 && y < self.y_max as f64
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn centre(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) as f64 / 2.0, (self.y_min + self.y_max) as f64 / 2.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let iy = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        let inter = (ix * iy) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Depth in meters; `0.0` marks unknown depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub view: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthImage {
    pub fn new(view: usize, width: usize, height: usize, values: Vec<f64>) -> Result<Self, HeatmapError> {
        if values.len() != width * height {
            return Err(HeatmapError::Shape(format!("{} depth values for {width}x{height}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HeatmapError::Invalid { what: "depth image", detail: "depth must be finite and >= 0".into() });
        }
        Ok(DepthImage { view, width, height, values })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_known(&self, x: usize, y: usize) -> bool {
        self.at(x, y) > 0.0
    }
}

/// Planar RGB image, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    /// `3 × H × W`, planar.
    pub values: Vec<f64>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, HeatmapError> {
        if values.len() != 3 * width * height {
            return Err(HeatmapError::Shape(format!("{} colour values for 3x{width}x{height}", values.len())));
        }
        Ok(ColorImage { width, height, values })
    }

    pub fn black(width: usize, height: usize) -> Self {
        ColorImage { width, height, values: vec![0.0; 3 * width * height] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub epsilon: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { epsilon: DEFAULT_EPSILON }
    }
}

/// Pixels that survive masking: inside `bbox` with known depth.
pub fn live_pixels(bbox: &BoundingBox, depth: &DepthImage) -> Vec<bool> {
    let mut keep = vec![false; depth.width * depth.height];
    for y in bbox.y_min..bbox.y_max.min(depth.height) {
        for x in bbox.x_min..bbox.x_max.min(depth.width) {
            keep[y * depth.width + x] = depth.is_known(x, y);
        }
    }
    keep
}

/// Sets activations outside the person's box, or at unknown depth, to ε.
pub fn mask_heatmap(h: &Heatmap, bbox: &BoundingBox, depth: &DepthImage, cfg: &MaskConfig) -> Result<Heatmap, HeatmapError> {
    if h.width != depth.width || h.height != depth.height {
        return Err(HeatmapError::Shape(format!(
            "heatmap {}x{} vs depth {}x{}",
            h.width, h.height, depth.width, depth.height
        )));
    }
    bbox.validate(h.width, h.height)?;
    let keep = live_pixels(bbox, depth);
    let values = h.values.iter().zip(&keep).map(|(v, k)| if *k { *v } else { cfg.epsilon }).collect();
    Ok(Heatmap { values, ..h.clone() })
}

pub const INPUT_CHANNELS: usize = 5;

/// Predictor input: colour (3), depth (1), binary box mask (1), each `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl InputTensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.values[c * n..(c + 1) * n]
    }
}

pub fn build_input_tensor(colour: &ColorImage, depth: &DepthImage, bbox: &BoundingBox) -> Result<InputTensor, HeatmapError> {
    let (w, h) = (depth.width, depth.height);
    if colour.width != w || colour.height != h {
        return Err(HeatmapError::Shape(format!("colour {}x{} vs depth {w}x{h}", colour.width, colour.height)));
    }
    bbox.validate(w, h)?;
    let n = w * h;
    let mut values = Vec::with_capacity(INPUT_CHANNELS * n);
    values.extend_from_slice(&colour.values);
    values.extend_from_slice(&depth.values);
    values.extend((0..n).map(|i| if bbox.contains(i % w, i / w) { 1.0 } else { 0.0 }));
    Ok(InputTensor { width: w, height: h, values })
}
