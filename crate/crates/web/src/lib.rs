//! Browser demo: generate a small synthetic scene, fuse its joints from ideal
//! heatmaps at a chosen sharpness, and associate its boxes across views.
//!
//! Every export has a plain-Rust twin returning a JSON string so the logic
//! runs and is tested natively.

use std::cell::RefCell;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use posefuse::data::{generate_synthetic, make_target_heatmaps, Scene, SynthConfig};
use posefuse::fusion::{Joint, NUM_JOINTS};
use posefuse::heatmap::MaskConfig;
use posefuse::matching::{evaluate_matching, match_boxes, MatchConfig};
use posefuse::pipeline::{infer_pose, LossMode};

const HEIGHT: usize = 48;
const WIDTH: usize = 60;

thread_local! {
    static CACHE: RefCell<Option<(u64, Scene)>> = const { RefCell::new(None) };
}

fn with_scene<T>(seed: u64, f: impl FnOnce(&Scene) -> T) -> Result<T, String> {
    CACHE.with(|cell| {
        let mut cache = cell.borrow_mut();
        if cache.as_ref().map(|(s, _)| *s) != Some(seed) {
            let cfg = SynthConfig { height: HEIGHT, width: WIDTH, seed, train_scenes: 1, test_scenes: 0, ..SynthConfig::default() };
            let (mut scenes, _) = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
            *cache = Some((seed, scenes.remove(0)));
        }
        Ok(f(&cache.as_ref().expect("filled above").1))
    })
}

#[derive(Serialize)]
struct ViewImage {
    /// Row-major RGBA bytes, ready for `ImageData`.
    rgba: Vec<u8>,
    boxes: Vec<[usize; 5]>,
}

#[derive(Serialize)]
struct SceneView {
    seed: u64,
    width: usize,
    height: usize,
    persons: usize,
    views: Vec<ViewImage>,
}

/// Colour images and annotated boxes (`[person, x0, y0, x1, y1]`) per view.
pub fn scene_json(seed: u64) -> Result<String, String> {
    with_scene(seed, |s| {
        let n = s.width * s.height;
        let views = s
            .views
            .iter()
            .enumerate()
            .map(|(v, view)| {
                let c = &view.colour.values;
                let mut rgba = Vec::with_capacity(4 * n);
                for i in 0..n {
                    for ch in 0..3 {
                        rgba.push((c[ch * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                    rgba.push(255);
                }
                let boxes = s
                    .persons
                    .iter()
                    .enumerate()
                    .filter_map(|(p, a)| a.views[v].bbox.map(|b| [p, b.x_min, b.y_min, b.x_max, b.y_max]))
                    .collect();
                ViewImage { rgba, boxes }
            })
            .collect();
        serde_json::to_string(&SceneView { seed, width: s.width, height: s.height, persons: s.persons.len(), views })
            .expect("serializable")
    })
}

#[derive(Serialize)]
struct FusedJoint {
    joint: Joint,
    truth: Option<[f64; 3]>,
    fused: Option<[f64; 3]>,
    error_cm: Option<f64>,
}

#[derive(Serialize)]
struct FusedPerson {
    person: usize,
    joints: Vec<FusedJoint>,
}

#[derive(Serialize)]
struct FuseResult {
    sigma: f64,
    peak: f64,
    mean_error_cm: Option<f64>,
    persons: Vec<FusedPerson>,
}

/// Fuses every person from Gaussian heatmaps of width `sigma` pixels and
/// height `peak`. Lower peaks give flatter softmax weights.
pub fn fuse_json(seed: u64, sigma: f64, peak: f64) -> Result<String, String> {
    if !(sigma > 0.0 && sigma.is_finite() && peak.is_finite()) {
        return Err("sigma must be positive and peak finite".into());
    }
    let result = with_scene(seed, |s| -> Result<FuseResult, String> {
        let mut errors = Vec::new();
        let mut persons = Vec::new();
        for (p, person) in s.persons.iter().enumerate() {
            let heatmaps: Vec<_> = s
                .supporting_views(p)
                .into_iter()
                .map(|v| (v, make_target_heatmaps(s, v, p, sigma, peak)))
                .collect();
            let pose = infer_pose(s, p, &heatmaps, LossMode::Proposed3d, &MaskConfig::default()).map_err(|e| e.to_string())?;
            let joints = (0..NUM_JOINTS)
                .map(|j| {
                    let truth = person.joints_3d[j];
                    let error_cm = pose.joints[j].zip(truth).map(|(q, t)| 100.0 * q.distance(t));
                    errors.extend(error_cm);
                    FusedJoint { joint: Joint::ALL[j], truth: truth.map(|t| t.to_array()), fused: pose.joints[j].map(|q| q.to_array()), error_cm }
                })
                .collect();
            persons.push(FusedPerson { person: p, joints });
        }
        let mean_error_cm = (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
        Ok(FuseResult { sigma, peak, mean_error_cm, persons })
    })??;
    Ok(serde_json::to_string(&result).expect("serializable"))
}

#[derive(Serialize)]
struct MatchedGroup {
    /// `[view, x0, y0, x1, y1]` per member box.
    boxes: Vec<[usize; 5]>,
    mean_distance: f64,
}

#[derive(Serialize)]
struct MatchResult {
    threshold: f64,
    groups: Vec<MatchedGroup>,
    /// Per annotated person, best mean IoU over views.
    person_iou: Vec<f64>,
}

/// Associates the scene's annotated boxes across views at `threshold` meters.
pub fn match_json(seed: u64, threshold: f64) -> Result<String, String> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err("threshold must be positive".into());
    }
    let result = with_scene(seed, |s| {
        let boxes: Vec<Vec<_>> = (0..s.num_views()).map(|v| s.boxes_in_view(v)).collect();
        let combos = match_boxes(&boxes, &s.depths(), &s.cameras, &MatchConfig { threshold });
        let annotated: Vec<Vec<_>> = s.persons.iter().map(|p| p.views.iter().map(|pv| pv.bbox).collect()).collect();
        let person_iou = evaluate_matching(&combos, &boxes, &annotated, s.num_views());
        let groups = combos
            .iter()
            .map(|c| MatchedGroup {
                boxes: c
                    .members
                    .iter()
                    .map(|m| {
                        let b = boxes[m.view][m.index];
                        [m.view, b.x_min, b.y_min, b.x_max, b.y_max]
                    })
                    .collect(),
                mean_distance: c.mean_distance,
            })
            .collect();
        MatchResult { threshold, groups, person_iou }
    })?;
    Ok(serde_json::to_string(&result).expect("serializable"))
}

#[wasm_bindgen(js_name = sceneJson)]
pub fn scene_json_js(seed: u32) -> Result<String, JsError> {
    scene_json(seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fuseJson)]
pub fn fuse_json_js(seed: u32, sigma: f64, peak: f64) -> Result<String, JsError> {
    fuse_json(seed.into(), sigma, peak).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = matchJson)]
pub fn match_json_js(seed: u32, threshold: f64) -> Result<String, JsError> {
    match_json(seed.into(), threshold).map_err(|e| JsError::new(&e))
}
