//! Scenes: on-disk format, validation, and a deterministic synthetic
//! multi-view generator with ray-cast depth.
//!
//! A scene directory holds `scene.json`, `view{v}_color.ppm` (binary P6) and
//! `view{v}_depth.f32` (u32 H, u32 W, then H·W f32, all little-endian).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{Joint, NUM_JOINTS};
use crate::geometry::{invert_transform, project_point, transform_point, Camera, Point3, RigidTransform};
use crate::heatmap::{BoundingBox, ColorImage, DepthImage, Heatmap};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: {message}")]
    Parse { file: PathBuf, message: String },
    #[error("{file}: invariant `{invariant}` violated ({detail})")]
    Invariant { file: PathBuf, invariant: String, detail: String },
    #[error("generation failed: {0}")]
    Generation(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub colour: ColorImage,
    pub depth: DepthImage,
}

/// One person's annotation in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonView {
    pub bbox: Option<BoundingBox>,
    pub joints_2d: [Option<[f64; 2]>; NUM_JOINTS],
    pub visible: [bool; NUM_JOINTS],
}

impl PersonView {
    pub fn absent() -> Self {
        PersonView { bbox: None, joints_2d: [None; NUM_JOINTS], visible: [false; NUM_JOINTS] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonAnnotation {
    pub id: usize,
    pub joints_3d: [Option<Point3>; NUM_JOINTS],
    /// One entry per view.
    pub views: Vec<PersonView>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<Camera>,
    pub views: Vec<View>,
    pub persons: Vec<PersonAnnotation>,
}

impl Scene {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Views in which the person has a box.
    pub fn supporting_views(&self, person: usize) -> Vec<usize> {
        self.persons[person].views.iter().enumerate().filter(|(_, pv)| pv.bbox.is_some()).map(|(v, _)| v).collect()
    }

    pub fn boxes_in_view(&self, view: usize) -> Vec<BoundingBox> {
        self.persons.iter().filter_map(|p| p.views[view].bbox).collect()
    }

    pub fn depths(&self) -> Vec<DepthImage> {
        self.views.iter().map(|v| v.depth.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    id: String,
    #[serde(default = "meters")]
    units: String,
    width: usize,
    height: usize,
    cameras: Vec<CameraFile>,
    persons: Vec<PersonFile>,
}

fn meters() -> String {
    "meters".into()
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    id: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    to_reference: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PersonFile {
    id: usize,
    joints_3d: Vec<Option<[f64; 3]>>,
    views: Vec<PersonViewFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PersonViewFile {
    view: usize,
    #[serde(rename = "box")]
    bbox: Option<[usize; 4]>,
    joints_2d: Vec<Option<[f64; 2]>>,
    visible: Vec<bool>,
}

fn unit_scale(units: &str) -> Option<f64> {
    match units {
        "meters" | "m" => Some(1.0),
        "centimeters" | "cm" => Some(0.01),
        "millimeters" | "mm" => Some(0.001),
        _ => None,
    }
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(8 + 4 * depth.values.len());
    buf.extend_from_slice(&(depth.height as u32).to_le_bytes());
    buf.extend_from_slice(&(depth.width as u32).to_le_bytes());
    for v in &depth.values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_depth(path: &Path, view: usize, scale: f64) -> Result<DepthImage, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let parse = |message: String| DataError::Parse { file: path.to_path_buf(), message };
    if bytes.len() < 8 {
        return Err(parse("truncated header".into()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * h * w {
        return Err(parse(format!("expected {} bytes for {h}x{w}, found {}", 8 + 4 * h * w, bytes.len())));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().unwrap()) as f64 * scale;
            if v.is_finite() && v > 0.0 {
                v
            } else {
                0.0
            }
        })
        .collect();
    DepthImage::new(view, w, h, values).map_err(|e| parse(e.to_string()))
}

pub fn write_ppm(path: &Path, img: &ColorImage) -> Result<(), DataError> {
    let n = img.width * img.height;
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for i in 0..n {
        for c in 0..3 {
            buf.push((img.values[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<ColorImage, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let parse = |message: &str| DataError::Parse { file: path.to_path_buf(), message: message.into() };
    // header: magic, width, height, maxval separated by whitespace, then one whitespace byte
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(parse("not a binary P6 image"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(parse("only 8-bit PPM is supported"));
    }
    let n = w * h;
    if bytes.len() < pos + 3 * n {
        return Err(parse("truncated pixel data"));
    }
    let px = &bytes[pos..pos + 3 * n];
    let mut values = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            values[c * n + i] = px[3 * i + c] as f64 / 255.0;
        }
    }
    Ok(ColorImage { width: w, height: h, values })
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let file = SceneFile {
        id: scene.id.clone(),
        units: meters(),
        width: scene.width,
        height: scene.height,
        cameras: scene
            .cameras
            .iter()
            .map(|c| CameraFile { id: c.id, fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, to_reference: c.to_reference.to_row_major() })
            .collect(),
        persons: scene
            .persons
            .iter()
            .map(|p| PersonFile {
                id: p.id,
                joints_3d: p.joints_3d.iter().map(|j| j.map(|q| q.to_array())).collect(),
                views: p
                    .views
                    .iter()
                    .enumerate()
                    .map(|(v, pv)| PersonViewFile {
                        view: v,
                        bbox: pv.bbox.map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]),
                        joints_2d: pv.joints_2d.to_vec(),
                        visible: pv.visible.to_vec(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json_path = dir.join("scene.json");
    let mut text = serde_json::to_string_pretty(&file).expect("scene serializes");
    text.push('\n');
    fs::write(&json_path, text).map_err(io_err(&json_path))?;
    for (v, view) in scene.views.iter().enumerate() {
        write_ppm(&dir.join(format!("view{v}_color.ppm")), &view.colour)?;
        write_depth(&dir.join(format!("view{v}_depth.f32")), &view.depth)?;
    }
    Ok(())
}

fn fixed<T: Copy, const N: usize>(v: &[T], file: &Path, field: &str) -> Result<[T; N], DataError> {
    v.try_into().map_err(|_| DataError::Parse {
        file: file.to_path_buf(),
        message: format!("field `{field}` must have {N} entries, found {}", v.len()),
    })
}

/// Reads and validates a scene directory. Lengths are normalised to meters.
pub fn load_scene(dir: &Path) -> Result<Scene, DataError> {
    let json_path = dir.join("scene.json");
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let file: SceneFile =
        serde_json::from_str(&text).map_err(|e| DataError::Parse { file: json_path.clone(), message: e.to_string() })?;
    let invariant = |invariant: &str, detail: String| DataError::Invariant {
        file: json_path.clone(),
        invariant: invariant.to_string(),
        detail,
    };
    let scale = unit_scale(&file.units)
        .ok_or_else(|| DataError::Parse { file: json_path.clone(), message: format!("unknown units `{}`", file.units) })?;
    let (w, h) = (file.width, file.height);

    let mut cameras = Vec::new();
    for (v, c) in file.cameras.iter().enumerate() {
        if c.id != v {
            return Err(invariant("camera ids are view indices", format!("camera at position {v} has id {}", c.id)));
        }
        let mut m = c.to_reference.clone();
        if m.len() == 16 {
            for k in [3, 7, 11] {
                m[k] *= scale;
            }
        }
        let t = RigidTransform::from_row_major(&m).map_err(|e| invariant(&e.to_string(), format!("camera {v}")))?;
        let cam = Camera { id: v, fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: w, height: h, to_reference: t };
        cam.validate().map_err(|e| invariant(&e.to_string(), format!("camera {v}")))?;
        cameras.push(cam);
    }
    if cameras.is_empty() {
        return Err(invariant("at least one view", "no cameras".into()));
    }

    let mut views = Vec::new();
    for v in 0..cameras.len() {
        let colour = read_ppm(&dir.join(format!("view{v}_color.ppm")))?;
        let depth = read_depth(&dir.join(format!("view{v}_depth.f32")), v, scale)?;
        if (colour.width, colour.height) != (w, h) || (depth.width, depth.height) != (w, h) {
            return Err(invariant("view rasters match scene size", format!("view {v}")));
        }
        views.push(View { colour, depth });
    }

    let mut persons = Vec::new();
    for (n, p) in file.persons.iter().enumerate() {
        let joints: [Option<[f64; 3]>; NUM_JOINTS] = fixed(&p.joints_3d, &json_path, "joints_3d")?;
        let joints_3d = joints.map(|j| j.map(|a| Point3::from_array(a) * scale));
        if joints_3d.iter().flatten().any(|q| !q.is_finite()) {
            return Err(invariant("joint coordinates finite", format!("person {}", p.id)));
        }
        if p.views.len() != cameras.len() {
            return Err(invariant("one annotation per view", format!("person {} has {}", p.id, p.views.len())));
        }
        let mut pviews = Vec::new();
        for (v, pv) in p.views.iter().enumerate() {
            if pv.view != v {
                return Err(invariant("person views ordered by index", format!("person {}", p.id)));
            }
            let bbox = match pv.bbox {
                Some([x0, y0, x1, y1]) => {
                    let b = BoundingBox { view: v, person: n, x_min: x0, y_min: y0, x_max: x1, y_max: y1 };
                    b.validate(w, h).map_err(|e| invariant("bounding box within image", e.to_string()))?;
                    Some(b)
                }
                None => None,
            };
            let joints_2d = fixed(&pv.joints_2d, &json_path, "joints_2d")?;
            let visible = fixed(&pv.visible, &json_path, "visible")?;
            for j in 0..NUM_JOINTS {
                if visible[j] {
                    let inside = match (bbox, joints_2d[j]) {
                        (Some(b), Some([x, y])) => b.contains_point(x.round(), y.round()),
                        _ => false,
                    };
                    if !inside {
                        return Err(invariant(
                            "visible joints lie inside the person's box",
                            format!("person {} view {v} joint {j}", p.id),
                        ));
                    }
                }
            }
            pviews.push(PersonView { bbox, joints_2d, visible });
        }
        persons.push(PersonAnnotation { id: p.id, joints_3d, views: pviews });
    }
    Ok(Scene { id: file.id, width: w, height: h, cameras, views, persons })
}

/// Heatmap raster file: u32 C, u32 H, u32 W, then C·H·W f32, little-endian.
pub fn write_heatmaps(path: &Path, maps: &[Heatmap]) -> Result<(), DataError> {
    let (h, w) = maps.first().map_or((0, 0), |m| (m.height, m.width));
    let mut buf = Vec::with_capacity(12 + 4 * maps.len() * h * w);
    for v in [maps.len(), h, w] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for m in maps {
        for v in &m.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_heatmaps(path: &Path, view: usize) -> Result<Vec<Heatmap>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let parse = |message: String| DataError::Parse { file: path.to_path_buf(), message };
    if bytes.len() < 12 {
        return Err(parse("truncated header".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if bytes.len() != 12 + 4 * c * h * w {
        return Err(parse(format!("expected {} bytes for {c}x{h}x{w}, found {}", 12 + 4 * c * h * w, bytes.len())));
    }
    let values: Vec<f64> = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(parse("non-finite heatmap value".into()));
    }
    (0..c)
        .map(|j| Heatmap::new(view, j, w, h, values[j * h * w..(j + 1) * h * w].to_vec()).map_err(|e| parse(e.to_string())))
        .collect()
}

/// Folds of scene ids, stored as `split.json` at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub folds: Vec<Fold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub name: String,
    pub scenes: Vec<String>,
}

pub fn write_split(root: &Path, split: &Split) -> Result<(), DataError> {
    let path = root.join("split.json");
    let mut text = serde_json::to_string_pretty(split).expect("split serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

/// Reads `split.json`; a dataset without one is a single fold `all` holding
/// every scene directory in name order.
pub fn read_split(root: &Path) -> Result<Split, DataError> {
    let path = root.join("split.json");
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        return serde_json::from_str(&text).map_err(|e| DataError::Parse { file: path, message: e.to_string() });
    }
    let mut scenes = Vec::new();
    if root.is_dir() {
        for entry in fs::read_dir(root).map_err(io_err(root))? {
            let entry = entry.map_err(io_err(root))?;
            if entry.path().join("scene.json").exists() {
                scenes.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
    }
    scenes.sort();
    Ok(Split { folds: vec![Fold { name: "all".into(), scenes }] })
}

/// Loads the scenes of the named folds (all folds when `folds` is empty).
pub fn load_folds(root: &Path, folds: &[String]) -> Result<Vec<Scene>, DataError> {
    let split = read_split(root)?;
    let mut out = Vec::new();
    for fold in &split.folds {
        if folds.is_empty() || folds.contains(&fold.name) {
            for id in &fold.scenes {
                out.push(load_scene(&root.join(id))?);
            }
        }
    }
    Ok(out)
}

pub fn save_dataset(root: &Path, folds: &[(&str, &[Scene])]) -> Result<(), DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut split = Split { folds: Vec::new() };
    for (name, scenes) in folds {
        for s in scenes.iter() {
            save_scene(&root.join(&s.id), s)?;
        }
        split.folds.push(Fold { name: name.to_string(), scenes: scenes.iter().map(|s| s.id.clone()).collect() });
    }
    write_split(root, &split)
}

/// Writes `data` atomically (temporary file + rename).
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(data).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// A person is supported by every view where a joint is visible.
    Natural,
    /// Each person keeps a uniformly drawn number (1..=V) of its natural
    /// supporting views; the others behave as fully occluded.
    Forced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub views: usize,
    pub persons_min: usize,
    pub persons_max: usize,
    /// Persons stand within this radius of the room centre (meters).
    pub room_radius: f64,
    pub camera_distance: f64,
    pub camera_height: f64,
    pub fov_deg: f64,
    pub joint_radius: f64,
    pub head_radius: f64,
    pub bone_radius: f64,
    pub torso_radius: f64,
    /// Sensor range; farther surfaces read as unknown depth.
    pub max_depth: f64,
    pub box_pad: usize,
    pub label_sigma: f64,
    pub label_peak: f64,
    pub support: SupportMode,
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 80,
            views: 3,
            persons_min: 1,
            persons_max: 3,
            room_radius: 0.9,
            camera_distance: 3.2,
            camera_height: 2.2,
            fov_deg: 50.0,
            joint_radius: 0.05,
            head_radius: 0.1,
            bone_radius: 0.045,
            torso_radius: 0.13,
            max_depth: 8.0,
            box_pad: 2,
            label_sigma: 1.0,
            label_peak: 1000.0,
            support: SupportMode::Natural,
            seed: 0,
            train_scenes: 200,
            test_scenes: 50,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Generation(m.to_string()));
        if self.height == 0 || self.width == 0 || self.views == 0 {
            return bad("image size and view count must be positive");
        }
        if self.persons_min == 0 || self.persons_min > self.persons_max {
            return bad("person count range must satisfy 1 <= min <= max");
        }
        let lengths = [
            self.room_radius,
            self.camera_distance,
            self.camera_height,
            self.joint_radius,
            self.head_radius,
            self.bone_radius,
            self.torso_radius,
            self.max_depth,
            self.label_sigma,
            self.label_peak,
        ];
        if lengths.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("all lengths must be positive");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 170.0) {
            return bad("fov must lie in (0, 170) degrees");
        }
        Ok(())
    }

    /// Fixed rig: cameras on a circle around the room centre, looking at
    /// chest height. Returns cameras (shared frame = camera 0) and the
    /// world-to-reference transform.
    pub fn rig(&self) -> Result<(Vec<Camera>, RigidTransform), DataError> {
        let fx = (self.width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan();
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        let target = Point3::new(0.0, 1.1, 0.0);
        let up = Point3::new(0.0, 1.0, 0.0);
        let mut cam_to_world = Vec::new();
        for v in 0..self.views {
            let az = (v as f64 * 360.0 / self.views as f64 + 10.0 * (v % 2) as f64).to_radians();
            let eye = Point3::new(self.camera_distance * az.sin(), self.camera_height, self.camera_distance * az.cos());
            cam_to_world.push(RigidTransform::look_at(eye, target, up).map_err(|e| DataError::Generation(e.to_string()))?);
        }
        let world_to_ref = invert_transform(&cam_to_world[0]);
        let cameras = cam_to_world
            .iter()
            .enumerate()
            .map(|(v, t)| {
                let to_reference = if v == 0 { RigidTransform::IDENTITY } else { world_to_ref.compose(t) };
                Camera { id: v, fx, fy: fx, cx, cy, width: self.width, height: self.height, to_reference }
            })
            .collect();
        Ok((cameras, world_to_ref))
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Sphere { centre: Point3, radius: f64 },
    Capsule { a: Point3, b: Point3, radius: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Shape,
    person: usize,
}

/// World-frame (y up) skeleton plus the primitives used to render it.
struct Figure {
    joints: [Point3; NUM_JOINTS],
    primitives: Vec<Shape>,
}

fn rotate_y(p: Point3, yaw: f64) -> Point3 {
    let (s, c) = yaw.sin_cos();
    Point3::new(c * p.x + s * p.z, p.y, -s * p.x + c * p.z)
}

fn arm(shoulder: Point3, side: f64, scale: f64, rng: &mut impl Rng) -> (Point3, Point3) {
    let abduction = rng.gen_range(0.0f64..75.0).to_radians();
    let flexion = rng.gen_range(-20.0f64..95.0).to_radians();
    let bend = rng.gen_range(0.0f64..120.0).to_radians();
    // hanging arm, swung outward then raised forward
    let out = Point3::new(side * abduction.sin(), -abduction.cos(), 0.0);
    let upper = Point3::new(out.x, out.y * flexion.cos(), -out.y * flexion.sin());
    let hint = Point3::new(0.0, 0.3, 1.0);
    let perp = (hint - upper * hint.dot(upper)).normalized();
    let fore = (upper * bend.cos() + perp * bend.sin()).normalized();
    let elbow = shoulder + upper * (0.28 * scale);
    let wrist = elbow + fore * (0.26 * scale);
    (elbow, wrist)
}

fn make_figure(cfg: &SynthConfig, position: (f64, f64), yaw: f64, rng: &mut impl Rng) -> Figure {
    let s = rng.gen_range(0.9..1.1);
    let lean = rng.gen_range(-0.06..0.08);
    let local = |x: f64, y: f64, z: f64| Point3::new(x * s, y * s, z * s);
    let neck = local(0.0, 1.45, lean);
    let head = neck + local(0.0, 0.2, 0.03);
    let l_sh = local(0.19, 1.42, lean);
    let r_sh = local(-0.19, 1.42, lean);
    let l_hip = local(0.11, 0.95, 0.0);
    let r_hip = local(-0.11, 0.95, 0.0);
    let (l_el, l_wr) = arm(l_sh, 1.0, s, rng);
    let (r_el, r_wr) = arm(r_sh, -1.0, s, rng);
    let to_world = |p: Point3| {
        let q = rotate_y(p, yaw);
        Point3::new(q.x + position.0, q.y, q.z + position.1)
    };
    let joints = [head, neck, l_sh, r_sh, l_hip, r_hip, l_el, r_el, l_wr, r_wr].map(to_world);
    let [head, neck, l_sh, r_sh, l_hip, r_hip, l_el, r_el, l_wr, r_wr] = joints;
    let mid_hip = (l_hip + r_hip) * 0.5;
    let foot = |hip: Point3| Point3::new(hip.x, 0.06, hip.z);
    let (jr, br, tr) = (cfg.joint_radius * s, cfg.bone_radius * s, cfg.torso_radius * s);
    let mut primitives = vec![
        Shape::Sphere { centre: head, radius: cfg.head_radius * s },
        Shape::Capsule { a: neck, b: mid_hip, radius: tr },
        Shape::Capsule { a: head, b: neck, radius: 0.05 * s },
        Shape::Capsule { a: l_sh, b: r_sh, radius: br * 1.4 },
        Shape::Capsule { a: l_sh, b: l_hip, radius: br * 1.8 },
        Shape::Capsule { a: r_sh, b: r_hip, radius: br * 1.8 },
        Shape::Capsule { a: l_hip, b: r_hip, radius: br * 1.8 },
        Shape::Capsule { a: l_sh, b: l_el, radius: br },
        Shape::Capsule { a: l_el, b: l_wr, radius: br },
        Shape::Capsule { a: r_sh, b: r_el, radius: br },
        Shape::Capsule { a: r_el, b: r_wr, radius: br },
        Shape::Capsule { a: l_hip, b: foot(l_hip), radius: br * 1.5 },
        Shape::Capsule { a: r_hip, b: foot(r_hip), radius: br * 1.5 },
    ];
    primitives.extend(joints[1..].iter().map(|j| Shape::Sphere { centre: *j, radius: jr }));
    Figure { joints, primitives }
}

/// Render radius associated with each joint (used for visibility).
fn joint_render_radius(cfg: &SynthConfig, joint: usize) -> f64 {
    if joint == Joint::Head.index() {
        cfg.head_radius * 1.1
    } else {
        cfg.joint_radius * 1.1
    }
}

/// Nearest positive ray parameter `s` of a unit-direction ray.
fn intersect(shape: &Shape, dir: Point3) -> Option<f64> {
    match *shape {
        Shape::Sphere { centre, radius } => {
            let b = dir.dot(centre);
            let c = centre.dot(centre) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = b - disc.sqrt();
            (s > 0.0).then_some(s)
        }
        Shape::Capsule { a, b, radius } => {
            // ray origin is the camera centre (0,0,0)
            let ba = b - a;
            let oa = Point3::ORIGIN - a;
            let baba = ba.dot(ba);
            let bard = ba.dot(dir);
            let baoa = ba.dot(oa);
            let rdoa = dir.dot(oa);
            let oaoa = oa.dot(oa);
            let qa = baba - bard * bard;
            let qb = baba * rdoa - baoa * bard;
            let qc = baba * oaoa - baoa * baoa - radius * radius * baba;
            let h = qb * qb - qa * qc;
            if h >= 0.0 && qa > 1e-12 {
                let t = (-qb - h.sqrt()) / qa;
                let y = baoa + t * bard;
                if y > 0.0 && y < baba && t > 0.0 {
                    return Some(t);
                }
            }
            let caps = [a, b];
            caps.iter()
                .filter_map(|c| intersect(&Shape::Sphere { centre: *c, radius }, dir))
                .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |m| m.min(s))))
        }
    }
}

fn to_camera_shape(shape: &Shape, world_to_cam: &RigidTransform) -> Shape {
    match *shape {
        Shape::Sphere { centre, radius } => Shape::Sphere { centre: transform_point(centre, world_to_cam), radius },
        Shape::Capsule { a, b, radius } => {
            Shape::Capsule { a: transform_point(a, world_to_cam), b: transform_point(b, world_to_cam), radius }
        }
    }
}

fn bounding_sphere(shape: &Shape) -> (Point3, f64) {
    match *shape {
        Shape::Sphere { centre, radius } => (centre, radius),
        Shape::Capsule { a, b, radius } => ((a + b) * 0.5, a.distance(b) / 2.0 + radius),
    }
}

const PERSON_TONES: [[f64; 3]; 4] = [[0.85, 0.55, 0.45], [0.45, 0.6, 0.85], [0.5, 0.8, 0.5], [0.8, 0.75, 0.4]];

/// Ray-casts z-depth and a flat depth-shaded colour image for one camera.
fn render_view(
    cfg: &SynthConfig,
    camera: &Camera,
    world_to_cam: &RigidTransform,
    primitives: &[Primitive],
) -> (DepthImage, ColorImage) {
    let prims: Vec<(Primitive, Point3, f64)> = primitives
        .iter()
        .map(|p| {
            let shape = to_camera_shape(&p.shape, world_to_cam);
            let (c, r) = bounding_sphere(&shape);
            (Primitive { shape, person: p.person }, c, r)
        })
        .collect();
    // floor plane y_world = 0 in camera coordinates: n·p + d = 0
    let cam_to_world = invert_transform(world_to_cam);
    let m = cam_to_world.matrix();
    let normal = Point3::new(m[1][0], m[1][1], m[1][2]);
    let offset = m[1][3];

    let (w, h) = (cfg.width, cfg.height);
    let n = w * h;
    let mut depth = vec![0.0; n];
    let mut colour = vec![0.0; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let ray = Point3::new((x as f64 - camera.cx) / camera.fx, (y as f64 - camera.cy) / camera.fy, 1.0);
            let len = ray.norm();
            let dir = ray * (1.0 / len);
            let mut best: Option<(f64, Option<usize>)> = None;
            let denom = normal.dot(dir);
            if denom.abs() > 1e-12 {
                let s = -offset / denom;
                if s > 0.0 {
                    best = Some((s, None));
                }
            }
            for (p, c, r) in &prims {
                // cull by bounding sphere
                let b = dir.dot(*c);
                if c.dot(*c) - b * b > r * r {
                    continue;
                }
                if let Some(s) = intersect(&p.shape, dir) {
                    if best.map_or(true, |(bs, _)| s < bs) {
                        best = Some((s, Some(p.person)));
                    }
                }
            }
            let i = y * w + x;
            if let Some((s, who)) = best {
                let z = ((s / len) as f32) as f64;
                if z > 0.0 && z <= cfg.max_depth {
                    depth[i] = z;
                    let shade = (1.25 - 0.15 * z).clamp(0.15, 1.0);
                    let tone = match who {
                        Some(p) => PERSON_TONES[p % PERSON_TONES.len()],
                        None => [0.6, 0.6, 0.62],
                    };
                    for c in 0..3 {
                        colour[c * n + i] = (tone[c] * shade * 255.0).round() / 255.0;
                    }
                }
            }
        }
    }
    (
        DepthImage { view: camera.id, width: w, height: h, values: depth },
        ColorImage { width: w, height: h, values: colour },
    )
}

fn place_persons(cfg: &SynthConfig, count: usize, rng: &mut impl Rng) -> Vec<((f64, f64), f64)> {
    let mut out: Vec<((f64, f64), f64)> = Vec::new();
    let mut attempts = 0;
    while out.len() < count && attempts < 1000 {
        attempts += 1;
        let r = cfg.room_radius * rng.gen::<f64>().sqrt();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let pos = (r * a.cos(), r * a.sin());
        if out.iter().all(|(q, _)| ((q.0 - pos.0).powi(2) + (q.1 - pos.1).powi(2)).sqrt() > 0.65) {
            out.push((pos, rng.gen_range(0.0..std::f64::consts::TAU)));
        }
    }
    out
}

fn generate_scene(cfg: &SynthConfig, id: String, rng: &mut impl Rng) -> Result<Scene, DataError> {
    let (cameras, world_to_ref) = cfg.rig()?;
    let count = rng.gen_range(cfg.persons_min..=cfg.persons_max);
    let placements = place_persons(cfg, count, rng);
    if placements.len() < count {
        return Err(DataError::Generation(format!("could not place {count} persons in the room")));
    }
    let figures: Vec<Figure> = placements.iter().map(|(pos, yaw)| make_figure(cfg, *pos, *yaw, rng)).collect();
    let primitives: Vec<Primitive> = figures
        .iter()
        .enumerate()
        .flat_map(|(n, f)| f.primitives.iter().map(move |s| Primitive { shape: *s, person: n }))
        .collect();

    let mut views = Vec::new();
    let mut world_to_cams = Vec::new();
    for cam in &cameras {
        let world_to_cam = invert_transform(&cam.to_reference).compose(&world_to_ref);
        let (depth, colour) = render_view(cfg, cam, &world_to_cam, &primitives);
        views.push(View { colour, depth });
        world_to_cams.push(world_to_cam);
    }

    let mut persons = Vec::new();
    for (n, fig) in figures.iter().enumerate() {
        let joints_3d = fig.joints.map(|j| Some(transform_point(j, &world_to_ref)));
        let mut pviews = Vec::new();
        for (v, cam) in cameras.iter().enumerate() {
            let mut pv = PersonView::absent();
            let mut projected = [None; NUM_JOINTS];
            for (j, world) in fig.joints.iter().enumerate() {
                let pc = transform_point(*world, &world_to_cams[v]);
                let Ok((px, py)) = project_point(pc, cam) else { continue };
                let (rx, ry) = (px.round(), py.round());
                if rx < 0.0 || ry < 0.0 || rx >= cfg.width as f64 || ry >= cfg.height as f64 {
                    continue;
                }
                let d = views[v].depth.at(rx as usize, ry as usize);
                if d > 0.0 && d >= pc.z - joint_render_radius(cfg, j) - 0.05 {
                    pv.visible[j] = true;
                    projected[j] = Some([px, py]);
                }
            }
            let vis: Vec<[f64; 2]> = projected.iter().flatten().copied().collect();
            if !vis.is_empty() {
                let pad = cfg.box_pad as f64;
                let min_x = vis.iter().map(|p| p[0].round()).fold(f64::INFINITY, f64::min) - pad;
                let max_x = vis.iter().map(|p| p[0].round()).fold(f64::NEG_INFINITY, f64::max) + pad + 1.0;
                let min_y = vis.iter().map(|p| p[1].round()).fold(f64::INFINITY, f64::min) - pad;
                let max_y = vis.iter().map(|p| p[1].round()).fold(f64::NEG_INFINITY, f64::max) + pad + 1.0;
                pv.bbox = Some(BoundingBox {
                    view: v,
                    person: n,
                    x_min: min_x.max(0.0) as usize,
                    y_min: min_y.max(0.0) as usize,
                    x_max: (max_x.min(cfg.width as f64)) as usize,
                    y_max: (max_y.min(cfg.height as f64)) as usize,
                });
                pv.joints_2d = projected;
            }
            pviews.push(pv);
        }
        if pviews.iter().all(|pv| pv.bbox.is_none()) {
            return Err(DataError::Generation(format!("person {n} of scene {id} is outside every view")));
        }
        if cfg.support == SupportMode::Forced {
            let natural: Vec<usize> = (0..pviews.len()).filter(|v| pviews[*v].bbox.is_some()).collect();
            let keep = rng.gen_range(1..=natural.len());
            let mut order = natural.clone();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for v in &order[keep..] {
                pviews[*v] = PersonView::absent();
            }
        }
        persons.push(PersonAnnotation { id: n, joints_3d, views: pviews });
    }
    Ok(Scene { id, width: cfg.width, height: cfg.height, cameras, views, persons })
}

/// Deterministic train/test scene sets. Scene ids are `train_0000`, …,
/// `test_0000`, …; each scene has its own RNG stream derived from the seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Vec<Scene>, Vec<Scene>), DataError> {
    cfg.validate()?;
    let make = |prefix: &str, count: usize, stream: u64| -> Result<Vec<Scene>, DataError> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream * 1_000_003 + i as u64);
                generate_scene(cfg, format!("{prefix}_{i:04}"), &mut rng)
            })
            .collect()
    };
    Ok((make("train", cfg.train_scenes, 1)?, make("test", cfg.test_scenes, 2)?))
}

/// Ideal heatmaps for one person in one view: `peak · exp(−d²/2σ²)` around
/// each visible joint's projection, all-zero for invisible joints.
pub fn make_target_heatmaps(scene: &Scene, view: usize, person: usize, sigma: f64, peak: f64) -> Vec<Heatmap> {
    let (w, h) = (scene.width, scene.height);
    let pv = &scene.persons[person].views[view];
    (0..NUM_JOINTS)
        .map(|j| {
            let mut hm = Heatmap::filled(view, j, w, h, 0.0);
            if let (true, Some([px, py])) = (pv.visible[j], pv.joints_2d[j]) {
                for (i, v) in hm.values.iter_mut().enumerate() {
                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                    *v = peak * (-((x - px).powi(2) + (y - py).powi(2)) / (2.0 * sigma * sigma)).exp();
                }
            }
            hm
        })
        .collect()
}

/// Pixels adjacent to a continuous position (the 2×2 cell around it).
fn neighbourhood(x: f64, y: f64) -> impl Iterator<Item = (i64, i64)> {
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)].into_iter()
}

/// Best error a pixel-grid method can guarantee for one joint: over its
/// supporting views where it is visible, the largest distance between the
/// true joint and a lifted pixel adjacent to its projection (in box, with
/// known depth). `None` for joints visible nowhere.
pub fn joint_quantization_error(scene: &Scene, person: usize, joint: usize) -> Option<f64> {
    let p = &scene.persons[person];
    let truth = p.joints_3d[joint]?;
    let mut worst: Option<f64> = None;
    for (v, pv) in p.views.iter().enumerate() {
        let (Some(b), true, Some([x, y])) = (pv.bbox, pv.visible[joint], pv.joints_2d[joint]) else { continue };
        let cam = &scene.cameras[v];
        let depth = &scene.views[v].depth;
        for (px, py) in neighbourhood(x, y) {
            if px < 0 || py < 0 || !b.contains(px as usize, py as usize) {
                continue;
            }
            let d = depth.at(px as usize, py as usize);
            if d <= 0.0 {
                continue;
            }
            let lifted = cam.to_reference_frame(cam.backproject(px as f64, py as f64, d));
            let e = lifted.distance(truth);
            worst = Some(worst.map_or(e, |w| w.max(e)));
        }
    }
    worst
}

/// Per-scene quantization bound in centimeters: the mean per-joint
/// quantization error over joints visible in at least one supporting view.
pub fn quantization_bound(scene: &Scene) -> Option<f64> {
    let errs: Vec<f64> = (0..scene.persons.len())
        .flat_map(|n| (0..NUM_JOINTS).filter_map(move |j| joint_quantization_error(scene, n, j)))
        .collect();
    (!errs.is_empty()).then(|| 100.0 * errs.iter().sum::<f64>() / errs.len() as f64)
}
