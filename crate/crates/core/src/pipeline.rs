//! Toy heatmap predictor, the two training modes (3D fusion loss and 2D
//! heatmap loss), evaluation reports and checkpoints.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_to_input, sample_augmentation, AugmentConfig, AugmentError, AugmentationRecord, InverseWarp};
use crate::data::{joint_quantization_error, make_target_heatmaps, write_atomic, DataError, Scene};
use crate::fusion::{
    aggregate, com_2d, joint_errors, lift_and_fuse_2d, lift_heatmaps, lift_view, FusionError, Joint, JointType, Pose2,
    Pose3, ViewEvidence, NUM_JOINTS,
};
use crate::geometry::Point3;
use crate::heatmap::{build_input_tensor, live_pixels, mask_heatmap, Heatmap, HeatmapError, MaskConfig, INPUT_CHANNELS};
use crate::matching::lift_box_center;
use crate::tensorgrad::{adam_step, AdamState, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("person {0} has no supporting view")]
    NoSupport(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "proposed-3d")]
    Proposed3d,
    #[serde(rename = "baseline-2d")]
    Baseline2d,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Proposed3d => "proposed-3d",
            LossMode::Baseline2d => "baseline-2d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "proposed-3d" | "3d" => Some(LossMode::Proposed3d),
            "baseline-2d" | "2d" => Some(LossMode::Baseline2d),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Predictor

const PARAM_NAMES: [&str; 6] = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias"];

/// Three 3×3 convolutions, `5 → hidden → hidden → J`, ReLU between them and
/// a linear output layer. One instance is shared by every view.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPredictor {
    pub hidden: usize,
    pub params: Vec<Tensor>,
}

impl ToyPredictor {
    fn shapes(hidden: usize) -> [Vec<usize>; 6] {
        [
            vec![hidden, INPUT_CHANNELS, 3, 3],
            vec![hidden],
            vec![hidden, hidden, 3, 3],
            vec![hidden],
            vec![NUM_JOINTS, hidden, 3, 3],
            vec![NUM_JOINTS],
        ]
    }

    /// Uniform fan-in initialisation; biases start at zero and the output
    /// layer is scaled down so initial heatmaps are nearly flat.
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::shapes(hidden)
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                if i % 2 == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in = (shape[1] * 9) as f64;
                let bound = (6.0 / fan_in).sqrt() * if i == 4 { 0.1 } else { 1.0 };
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("shape matches")
            })
            .collect();
        ToyPredictor { hidden, params }
    }

    pub fn zeros(hidden: usize) -> Self {
        ToyPredictor { hidden, params: Self::shapes(hidden).iter().map(|s| Tensor::zeros(s)).collect() }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records parameters on the tape (as leaves when `trainable`).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) }).collect()
    }

    /// `input: [5, H, W]` → `[J, H, W]`.
    pub fn forward(tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var, TensorError> {
        let h1 = tape.conv2d(input, vars[0], vars[1])?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.conv2d(h1, vars[2], vars[3])?;
        let h2 = tape.relu(h2)?;
        tape.conv2d(h2, vars[4], vars[5])
    }

    /// Checkpoint bytes: one JSON header line, then every parameter as
    /// little-endian f64 in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format: "posefuse-checkpoint".into(),
            version: 1,
            hidden: self.hidden,
            joints: NUM_JOINTS,
            tensors: PARAM_NAMES
                .iter()
                .zip(&self.params)
                .map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for t in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let bad = |m: String| PipelineError::Checkpoint(m);
        let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
        if header.format != "posefuse-checkpoint" || header.version != 1 {
            return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
        }
        if header.joints != NUM_JOINTS {
            return Err(bad(format!("checkpoint has {} joints, expected {NUM_JOINTS}", header.joints)));
        }
        let expected = Self::shapes(header.hidden);
        if header.tensors.len() != expected.len()
            || header.tensors.iter().zip(&expected).any(|(t, s)| &t.shape != s)
        {
            return Err(bad("tensor shapes do not match the predictor layout".into()));
        }
        let mut pos = nl + 1;
        let mut params = Vec::new();
        for shape in expected {
            let n: usize = shape.iter().product();
            let end = pos + 8 * n;
            if bytes.len() < end {
                return Err(bad("truncated parameter data".into()));
            }
            let data: Vec<f64> =
                bytes[pos..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite parameter".into()));
            }
            params.push(Tensor::new(shape, data)?);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after parameters".into()));
        }
        Ok(ToyPredictor { hidden: header.hidden, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        Ok(write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes =
            std::fs::read(path).map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    hidden: usize,
    joints: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Annotation access

/// Counts reads of 3D and 2D joint annotations, so a training run can show
/// which supervision it consumed.
#[derive(Debug, Default)]
pub struct AnnotationCounters {
    reads_3d: AtomicUsize,
    reads_2d: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationReads {
    pub reads_3d: usize,
    pub reads_2d: usize,
}

impl AnnotationCounters {
    pub fn joints_3d(&self, scene: &Scene, person: usize) -> [Option<Point3>; NUM_JOINTS] {
        self.reads_3d.fetch_add(1, Ordering::Relaxed);
        scene.persons[person].joints_3d
    }

    pub fn joints_2d(&self, scene: &Scene, person: usize, view: usize) -> [Option<[f64; 2]>; NUM_JOINTS] {
        self.reads_2d.fetch_add(1, Ordering::Relaxed);
        scene.persons[person].views[view].joints_2d
    }

    pub fn snapshot(&self) -> AnnotationReads {
        AnnotationReads { reads_3d: self.reads_3d.load(Ordering::Relaxed), reads_2d: self.reads_2d.load(Ordering::Relaxed) }
    }
}

// ---------------------------------------------------------------------------
// Forward pass

/// Per-scene constants shared by all persons: augmentation record, inverse
/// warps, lifted pixel clouds and pixel coordinates.
pub struct SceneContext {
    pub record: AugmentationRecord,
    pub warps: Vec<InverseWarp>,
    /// Per view, flattened `[H·W, 3]` shared-frame coordinates.
    pub clouds: Vec<Arc<Vec<f64>>>,
    /// Flattened `[H·W, 2]` pixel coordinates `(x, y)`.
    pub pixels: Arc<Vec<f64>>,
    pub mask: MaskConfig,
}

impl SceneContext {
    pub fn new(scene: &Scene, record: AugmentationRecord, mask: MaskConfig) -> Result<Self, PipelineError> {
        if record.views.len() != scene.num_views() {
            return Err(PipelineError::Config(format!(
                "augmentation record has {} views, scene has {}",
                record.views.len(),
                scene.num_views()
            )));
        }
        let warps = record.views.iter().map(InverseWarp::new).collect();
        let clouds = scene
            .views
            .iter()
            .zip(&scene.cameras)
            .map(|(v, c)| Arc::new(lift_view(&v.depth, c).iter().flat_map(|p| p.to_array()).collect()))
            .collect();
        let w = scene.width;
        let pixels = Arc::new((0..scene.width * scene.height).flat_map(|i| [(i % w) as f64, (i / w) as f64]).collect());
        Ok(SceneContext { record, warps, clouds, pixels, mask })
    }

    pub fn identity(scene: &Scene) -> Result<Self, PipelineError> {
        Self::new(scene, AugmentationRecord::identity(scene.num_views(), scene.height, scene.width), MaskConfig::default())
    }
}

/// Masked heatmaps of one supporting view, `[J, H·W]` in the original frame.
#[derive(Debug, Clone, Copy)]
pub struct ViewOutput {
    pub view: usize,
    pub heatmaps: Var,
}

/// Builds, augments and predicts every supporting view of a person, maps
/// the predictions back to the original frame and ε-masks them.
pub fn forward_person(
    tape: &mut Tape,
    vars: &[Var],
    scene: &Scene,
    person: usize,
    ctx: &SceneContext,
) -> Result<Vec<ViewOutput>, PipelineError> {
    let views = scene.supporting_views(person);
    if views.is_empty() {
        return Err(PipelineError::NoSupport(person));
    }
    let n = scene.width * scene.height;
    let mut out = Vec::with_capacity(views.len());
    for v in views {
        let bbox = scene.persons[person].views[v].bbox.expect("supporting view has a box");
        let depth = &scene.views[v].depth;
        let input = build_input_tensor(&scene.views[v].colour, depth, &bbox)?;
        let aug = &ctx.record.views[v];
        let ain = apply_to_input(&input, aug)?;
        let x = tape.constant(Tensor::new(vec![INPUT_CHANNELS, ain.height, ain.width], ain.values)?);
        let pred = ToyPredictor::forward(tape, vars, x)?;
        let warp = &ctx.warps[v];
        let back = tape.resample(pred, NUM_JOINTS, warp.map.clone())?;
        let live = live_pixels(&bbox, depth);
        let keep: Vec<bool> = (0..NUM_JOINTS * n).map(|i| live[i % n] && warp.covered[i % n]).collect();
        let heatmaps = tape.mask_fill(back, Arc::new(keep), ctx.mask.epsilon)?;
        out.push(ViewOutput { view: v, heatmaps });
    }
    Ok(out)
}

/// Softmax centre of mass of joint `j` over the concatenated clouds.
fn fused_joint(
    tape: &mut Tape,
    outputs: &[ViewOutput],
    coords: Var,
    joint: usize,
    n: usize,
) -> Result<Var, TensorError> {
    let parts: Vec<Var> =
        outputs.iter().map(|o| tape.slice(o.heatmaps, joint * n, vec![n])).collect::<Result<_, _>>()?;
    let logits = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
    tape.softmax_centroid(logits, coords)
}

fn concat_clouds(ctx: &SceneContext, outputs: &[ViewOutput]) -> Tensor {
    let data: Vec<f64> = outputs.iter().flat_map(|o| ctx.clouds[o.view].iter().copied()).collect();
    let len = data.len();
    Tensor::new(vec![len / 3, 3], data).expect("cloud shape")
}

/// Mean 3D joint error (meters) of one person over annotated joints.
pub fn loss_3d_person(
    tape: &mut Tape,
    outputs: &[ViewOutput],
    scene: &Scene,
    person: usize,
    ctx: &SceneContext,
    annotations: &AnnotationCounters,
) -> Result<Option<Var>, PipelineError> {
    let truth = annotations.joints_3d(scene, person);
    let n = scene.width * scene.height;
    let coords = tape.constant(concat_clouds(ctx, outputs));
    let mut errors = Vec::new();
    for (j, gt) in truth.iter().enumerate() {
        let Some(gt) = gt else { continue };
        let p = fused_joint(tape, outputs, coords, j, n)?;
        let target = tape.constant(Tensor::vector(gt.to_array().to_vec()));
        let d = tape.sub(p, target)?;
        errors.push(tape.euclidean_norm(d)?);
    }
    if errors.is_empty() {
        return Ok(None);
    }
    let all = tape.concat(&errors)?;
    Ok(Some(tape.mean(all)?))
}

/// Mean 2D distance (pixels) between per-view heatmap centres of mass and
/// the 2D annotations.
pub fn loss_2d_person(
    tape: &mut Tape,
    outputs: &[ViewOutput],
    scene: &Scene,
    person: usize,
    ctx: &SceneContext,
    annotations: &AnnotationCounters,
) -> Result<Option<Var>, PipelineError> {
    let n = scene.width * scene.height;
    let pixels = tape.constant(Tensor::new(vec![n, 2], ctx.pixels.to_vec())?);
    let mut errors = Vec::new();
    for o in outputs {
        let truth = annotations.joints_2d(scene, person, o.view);
        for (j, gt) in truth.iter().enumerate() {
            let Some(gt) = gt else { continue };
            let logits = tape.slice(o.heatmaps, j * n, vec![n])?;
            let c = tape.softmax_centroid(logits, pixels)?;
            let target = tape.constant(Tensor::vector(gt.to_vec()));
            let d = tape.sub(c, target)?;
            errors.push(tape.euclidean_norm(d)?);
        }
    }
    if errors.is_empty() {
        return Ok(None);
    }
    let all = tape.concat(&errors)?;
    Ok(Some(tape.mean(all)?))
}

/// Scalar training loss for one person and its parameter gradients.
pub fn person_loss_and_grads(
    predictor: &ToyPredictor,
    scene: &Scene,
    person: usize,
    ctx: &SceneContext,
    mode: LossMode,
    annotations: &AnnotationCounters,
) -> Result<Option<(f64, Vec<Tensor>)>, PipelineError> {
    let mut tape = Tape::new();
    let vars = predictor.bind(&mut tape, true);
    let outputs = forward_person(&mut tape, &vars, scene, person, ctx)?;
    let loss = match mode {
        LossMode::Proposed3d => loss_3d_person(&mut tape, &outputs, scene, person, ctx, annotations)?,
        LossMode::Baseline2d => loss_2d_person(&mut tape, &outputs, scene, person, ctx, annotations)?,
    };
    let Some(loss) = loss else { return Ok(None) };
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(&predictor.params)
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(Some((tape.value(loss).item(), g)))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    /// Standard augmentation (flip, crop, rotation, colour jitter) when true.
    pub augment: bool,
    pub data: String,
    pub train_folds: Vec<String>,
    pub out: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: LossMode::Proposed3d,
            epochs: 60,
            lr: 1e-3,
            seed: 0,
            hidden: 16,
            augment: true,
            data: "data".into(),
            train_folds: vec!["train".into()],
            out: "run".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 {
            return Err(PipelineError::Config("epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PipelineError::Config("lr must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(PipelineError::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean training loss per epoch (meters for 3D, pixels for 2D).
    pub losses: Vec<f64>,
    pub best_epoch: usize,
    pub annotation_reads: AnnotationReads,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9).wrapping_add(b));
    rng.gen()
}

/// Trains with one Adam step per scene; per-person gradients are averaged
/// over the scene's persons. When `checkpoint` is given it is rewritten
/// after every epoch that improves the mean loss. `on_epoch` sees
/// `(epoch, mean loss)`.
pub fn train(
    cfg: &TrainConfig,
    scenes: &[Scene],
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ToyPredictor, TrainOutcome), PipelineError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut predictor = ToyPredictor::new(cfg.hidden, cfg.seed);
    let mut adam = AdamState::new(&predictor.params, cfg.lr);
    let counters = AnnotationCounters::default();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, epoch as u64)));
        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        for &si in &order {
            let scene = &scenes[si];
            let record = if cfg.augment {
                let aug = AugmentConfig::standard(scene.height, scene.width);
                sample_augmentation(&aug, scene.num_views(), scene.height, scene.width, mix_seed(cfg.seed, 2 + epoch as u64, si as u64))?
            } else {
                AugmentationRecord::identity(scene.num_views(), scene.height, scene.width)
            };
            let ctx = SceneContext::new(scene, record, MaskConfig::default())?;
            let mut acc: Option<Vec<Tensor>> = None;
            let mut used = 0usize;
            let mut scene_loss = 0.0;
            for person in 0..scene.persons.len() {
                if scene.supporting_views(person).is_empty() {
                    continue;
                }
                let Some((loss, grads)) = person_loss_and_grads(&predictor, scene, person, &ctx, cfg.mode, &counters)? else {
                    continue;
                };
                scene_loss += loss;
                used += 1;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (t, g) in a.iter_mut().zip(&grads) {
                            t.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let Some(mut grads) = acc else { continue };
            let inv = 1.0 / used as f64;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
            adam_step(&mut predictor.params, &grads, &mut adam)?;
            epoch_sum += scene_loss * inv;
            epoch_count += 1;
        }
        if epoch_count == 0 {
            return Err(PipelineError::EmptyDataset);
        }
        let mean = epoch_sum / epoch_count as f64;
        losses.push(mean);
        on_epoch(epoch, mean);
        if mean < best.0 {
            best = (mean, epoch);
            if let Some(path) = checkpoint {
                predictor.save(path)?;
            }
        }
    }
    Ok((predictor, TrainOutcome { losses, best_epoch: best.1, annotation_reads: counters.snapshot() }))
}

// ---------------------------------------------------------------------------
// Evaluation

/// Where evaluation heatmaps come from.
#[derive(Debug, Clone, Copy)]
pub enum HeatmapSource<'a> {
    Predictor(&'a ToyPredictor),
    /// Ideal Gaussians around the annotated projections.
    Oracle { sigma: f64, peak: f64 },
}

/// Masked heatmaps in the original frame for each supporting view of a
/// person (no augmentation), as `(view, J heatmaps)`.
pub fn person_heatmaps(
    source: HeatmapSource<'_>,
    scene: &Scene,
    person: usize,
    ctx: &SceneContext,
) -> Result<Vec<(usize, Vec<Heatmap>)>, PipelineError> {
    let (w, h) = (scene.width, scene.height);
    let n = w * h;
    match source {
        HeatmapSource::Predictor(p) => {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, false);
            let outputs = forward_person(&mut tape, &vars, scene, person, ctx)?;
            Ok(outputs
                .iter()
                .map(|o| {
                    let data = tape.value(o.heatmaps).data();
                    let maps = (0..NUM_JOINTS)
                        .map(|j| Heatmap { view: o.view, joint: j, width: w, height: h, values: data[j * n..(j + 1) * n].to_vec() })
                        .collect();
                    (o.view, maps)
                })
                .collect())
        }
        HeatmapSource::Oracle { sigma, peak } => {
            let views = scene.supporting_views(person);
            if views.is_empty() {
                return Err(PipelineError::NoSupport(person));
            }
            views
                .into_iter()
                .map(|v| {
                    let bbox = scene.persons[person].views[v].bbox.expect("supporting view has a box");
                    let maps = make_target_heatmaps(scene, v, person, sigma, peak)
                        .iter()
                        .map(|m| mask_heatmap(m, &bbox, &scene.views[v].depth, &ctx.mask))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok((v, maps))
                })
                .collect()
        }
    }
}

/// Fallback for joints a method cannot resolve: the lifted centre of the
/// person's first supporting box.
fn fallback_point(scene: &Scene, person: usize) -> Option<Point3> {
    scene.supporting_views(person).into_iter().find_map(|v| {
        let b = scene.persons[person].views[v].bbox?;
        lift_box_center(&b, &scene.views[v].depth, &scene.cameras[v])
    })
}

/// 3D pose of one person from masked heatmaps, by the given inference path.
pub fn infer_pose(
    scene: &Scene,
    person: usize,
    heatmaps: &[(usize, Vec<Heatmap>)],
    mode: LossMode,
    mask: &MaskConfig,
) -> Result<Pose3, PipelineError> {
    let depths = scene.depths();
    let mut pose = match mode {
        LossMode::Proposed3d => {
            let mut pose = Pose3::empty(person);
            for j in 0..NUM_JOINTS {
                let maps: Vec<Heatmap> = heatmaps.iter().map(|(_, m)| m[j].clone()).collect();
                let cloud = lift_heatmaps(person, &maps, &depths, &scene.cameras)?;
                pose.joints[j] = match aggregate(&cloud, mask) {
                    Ok(p) => Some(p),
                    Err(FusionError::Unresolvable) => None,
                    Err(e) => return Err(e.into()),
                };
            }
            pose
        }
        LossMode::Baseline2d => {
            let poses: Vec<Pose2> = heatmaps
                .iter()
                .map(|(v, maps)| Pose2 {
                    person,
                    view: *v,
                    joints: std::array::from_fn(|j| com_2d(&maps[j], mask)),
                })
                .collect();
            let evidence: Vec<ViewEvidence<'_>> = heatmaps
                .iter()
                .zip(&poses)
                .map(|((v, maps), pose)| ViewEvidence {
                    pose,
                    depth: &scene.views[*v].depth,
                    camera: &scene.cameras[*v],
                    heatmaps: maps,
                })
                .collect();
            lift_and_fuse_2d(person, &evidence)
        }
    };
    if pose.joints.iter().any(Option::is_none) {
        if let Some(f) = fallback_point(scene, person) {
            pose.joints.iter_mut().filter(|j| j.is_none()).for_each(|j| *j = Some(f));
        }
    }
    Ok(pose)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTypeScore {
    pub joint_type: String,
    pub mpjpe_cm: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportScore {
    pub supporting_views: usize,
    /// Mean over shoulders, hips, elbows and wrists.
    pub mpjpe_cm: Option<f64>,
    pub poses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inference: String,
    pub scenes: usize,
    pub poses: usize,
    /// Left and right joints pooled per type.
    pub per_joint_type: Vec<JointTypeScore>,
    /// Mean of the per-type values.
    pub average_cm: Option<f64>,
    pub per_supporting_views: Vec<SupportScore>,
}

impl EvalReport {
    pub fn joint_type(&self, t: JointType) -> Option<f64> {
        self.per_joint_type.iter().find(|s| s.joint_type == t.name()).and_then(|s| s.mpjpe_cm)
    }

    pub fn support(&self, views: usize) -> Option<&SupportScore> {
        self.per_supporting_views.iter().find(|s| s.supporting_views == views)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Per-person result of evaluation: support count and per-joint errors.
#[derive(Debug, Clone)]
pub struct PersonResult {
    pub supporting_views: usize,
    pub errors: Vec<(Joint, f64)>,
}

fn evaluate_scene(
    scene: &Scene,
    source: HeatmapSource<'_>,
    mode: LossMode,
) -> Result<Vec<PersonResult>, PipelineError> {
    let ctx = SceneContext::identity(scene)?;
    let mut out = Vec::new();
    for person in 0..scene.persons.len() {
        let support = scene.supporting_views(person).len();
        if support == 0 {
            continue;
        }
        let maps = person_heatmaps(source, scene, person, &ctx)?;
        let pose = infer_pose(scene, person, &maps, mode, &ctx.mask)?;
        let truth = Pose3 { person, joints: scene.persons[person].joints_3d };
        out.push(PersonResult { supporting_views: support, errors: joint_errors(&pose, &truth) });
    }
    Ok(out)
}

fn map_scenes<T: Send>(
    scenes: &[Scene],
    f: impl Fn(&Scene) -> Result<T, PipelineError> + Sync + Send,
) -> Result<Vec<T>, PipelineError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let run = || scenes.par_iter().map(&f).collect::<Result<Vec<_>, _>>();
        match std::env::var("POSEFUSE_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
            Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| PipelineError::Config(e.to_string()))?
                .install(run),
            _ => run(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        scenes.iter().map(f).collect()
    }
}

/// Scores a heatmap source on a set of scenes. Scenes are processed in
/// parallel; aggregation is sequential in scene order.
pub fn evaluate(scenes: &[Scene], source: HeatmapSource<'_>, mode: LossMode) -> Result<EvalReport, PipelineError> {
    if scenes.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let per_scene = map_scenes(scenes, |s| evaluate_scene(s, source, mode))?;
    let results: Vec<PersonResult> = per_scene.into_iter().flatten().collect();
    let inference = match source {
        HeatmapSource::Predictor(_) => mode.name().to_string(),
        HeatmapSource::Oracle { .. } => format!("oracle/{}", mode.name()),
    };
    Ok(summarize(inference, scenes.len(), &results))
}

pub fn summarize(inference: String, scenes: usize, results: &[PersonResult]) -> EvalReport {
    let mean = |v: &[f64]| (!v.is_empty()).then(|| 100.0 * v.iter().sum::<f64>() / v.len() as f64);
    let per_joint_type: Vec<JointTypeScore> = JointType::ALL
        .iter()
        .map(|t| {
            let errs: Vec<f64> =
                results.iter().flat_map(|r| &r.errors).filter(|(j, _)| j.joint_type() == *t).map(|(_, e)| *e).collect();
            JointTypeScore { joint_type: t.name().to_string(), mpjpe_cm: mean(&errs), count: errs.len() }
        })
        .collect();
    let type_means: Vec<f64> = per_joint_type.iter().filter_map(|s| s.mpjpe_cm).collect();
    let average_cm = (type_means.len() == JointType::ALL.len()).then(|| type_means.iter().sum::<f64>() / type_means.len() as f64);
    let max_support = results.iter().map(|r| r.supporting_views).max().unwrap_or(0);
    let per_supporting_views = (1..=max_support)
        .map(|k| {
            let bucket: Vec<&PersonResult> = results.iter().filter(|r| r.supporting_views == k).collect();
            // per type means over the four limb types, then averaged
            let type_scores: Vec<f64> = JointType::ALL
                .iter()
                .filter(|t| t.in_view_breakdown())
                .filter_map(|t| {
                    let errs: Vec<f64> = bucket
                        .iter()
                        .flat_map(|r| &r.errors)
                        .filter(|(j, _)| j.joint_type() == *t)
                        .map(|(_, e)| *e)
                        .collect();
                    mean(&errs)
                })
                .collect();
            SupportScore {
                supporting_views: k,
                mpjpe_cm: (!type_scores.is_empty()).then(|| type_scores.iter().sum::<f64>() / type_scores.len() as f64),
                poses: bucket.len(),
            }
        })
        .collect();
    EvalReport { inference, scenes, poses: results.len(), per_joint_type, average_cm, per_supporting_views }
}

/// Oracle fusion on one scene against its quantization bound, both in
/// centimeters, over joints visible in at least one supporting view.
pub fn oracle_vs_bound(scene: &Scene, sigma: f64, peak: f64) -> Result<Option<(f64, f64)>, PipelineError> {
    let ctx = SceneContext::identity(scene)?;
    let mut errors = Vec::new();
    let mut bounds = Vec::new();
    for person in 0..scene.persons.len() {
        if scene.supporting_views(person).is_empty() {
            continue;
        }
        let maps = person_heatmaps(HeatmapSource::Oracle { sigma, peak }, scene, person, &ctx)?;
        let pose = infer_pose(scene, person, &maps, LossMode::Proposed3d, &ctx.mask)?;
        for j in 0..NUM_JOINTS {
            let Some(bound) = joint_quantization_error(scene, person, j) else { continue };
            let (Some(p), Some(t)) = (pose.joints[j], scene.persons[person].joints_3d[j]) else { continue };
            errors.push(p.distance(t));
            bounds.push(bound);
        }
    }
    if errors.is_empty() {
        return Ok(None);
    }
    let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
    Ok(Some((mean(&errors), mean(&bounds))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny(n: usize) -> Vec<Scene> {
        let cfg = SynthConfig {
            height: 16,
            width: 20,
            fov_deg: 60.0,
            box_pad: 1,
            train_scenes: n,
            test_scenes: 0,
            seed: 3,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg).unwrap().0
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ToyPredictor::new(4, 1);
        let q = ToyPredictor::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, q);
        let mut bytes = p.to_bytes();
        bytes.pop();
        assert!(ToyPredictor::from_bytes(&bytes).is_err());
    }

    #[test]
    fn zero_predictor_gives_uniform_in_box_centroid() {
        let scenes = tiny(1);
        let s = &scenes[0];
        let ctx = SceneContext::identity(s).unwrap();
        let p = ToyPredictor::zeros(4);
        let maps = person_heatmaps(HeatmapSource::Predictor(&p), s, 0, &ctx).unwrap();
        let pose = infer_pose(s, 0, &maps, LossMode::Proposed3d, &ctx.mask).unwrap();
        // uniform weights over live in-box pixels of all supporting views
        let mut sum = Point3::ORIGIN;
        let mut count = 0.0;
        for (v, _) in &maps {
            let b = s.persons[0].views[*v].bbox.unwrap();
            let cam = &s.cameras[*v];
            let depth = &s.views[*v].depth;
            for y in b.y_min..b.y_max {
                for x in b.x_min..b.x_max {
                    if depth.at(x, y) > 0.0 {
                        sum = sum + cam.to_reference_frame(cam.backproject(x as f64, y as f64, depth.at(x, y)));
                        count += 1.0;
                    }
                }
            }
        }
        let expected = sum * (1.0 / count);
        for j in pose.joints {
            assert!(j.unwrap().distance(expected) < 1e-9);
        }
    }

    #[test]
    fn identity_record_matches_plain_prediction() {
        let scenes = tiny(1);
        let s = &scenes[0];
        let p = ToyPredictor::new(4, 2);
        let ctx = SceneContext::identity(s).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let outs = forward_person(&mut tape, &vars, s, 0, &ctx).unwrap();
        let v = outs[0].view;
        let bbox = s.persons[0].views[v].bbox.unwrap();
        let input = build_input_tensor(&s.views[v].colour, &s.views[v].depth, &bbox).unwrap();
        let mut t2 = Tape::new();
        let vars2 = p.bind(&mut t2, false);
        let x = t2.constant(Tensor::new(vec![5, s.height, s.width], input.values).unwrap());
        let raw = ToyPredictor::forward(&mut t2, &vars2, x).unwrap();
        let live = live_pixels(&bbox, &s.views[v].depth);
        let n = s.width * s.height;
        let got = tape.value(outs[0].heatmaps).data();
        for (i, r) in t2.value(raw).data().iter().enumerate() {
            let expect = if live[i % n] { *r } else { MaskConfig::default().epsilon };
            assert_eq!(got[i], expect);
        }
    }

    #[test]
    fn views_are_predicted_independently() {
        let scenes = tiny(2);
        let s = scenes.iter().find(|s| s.supporting_views(0).len() >= 2).expect("multi-view person");
        let p = ToyPredictor::new(4, 3);
        let ctx = SceneContext::identity(s).unwrap();
        let full = person_heatmaps(HeatmapSource::Predictor(&p), s, 0, &ctx).unwrap();
        // drop every other supporting view
        let mut reduced = s.clone();
        let keep = full[0].0;
        for (v, pv) in reduced.persons[0].views.iter_mut().enumerate() {
            if v != keep {
                pv.bbox = None;
            }
        }
        let alone = person_heatmaps(HeatmapSource::Predictor(&p), &reduced, 0, &ctx).unwrap();
        assert_eq!(alone.len(), 1);
        assert_eq!(alone[0].1, full[0].1);
    }

    #[test]
    fn loss_modes_read_only_their_annotations() {
        let scenes = tiny(2);
        for mode in [LossMode::Proposed3d, LossMode::Baseline2d] {
            let cfg = TrainConfig { mode, epochs: 1, hidden: 4, ..TrainConfig::default() };
            let (_, out) = train(&cfg, &scenes, None, |_, _| {}).unwrap();
            let r = out.annotation_reads;
            match mode {
                LossMode::Proposed3d => assert!(r.reads_3d > 0 && r.reads_2d == 0),
                LossMode::Baseline2d => assert!(r.reads_2d > 0 && r.reads_3d == 0),
            }
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(train(&TrainConfig::default(), &[], None, |_, _| {}), Err(PipelineError::EmptyDataset)));
    }

    #[test]
    fn buckets_partition_poses() {
        let scenes = tiny(3);
        let r = evaluate(&scenes, HeatmapSource::Oracle { sigma: 1.0, peak: 1000.0 }, LossMode::Proposed3d).unwrap();
        assert_eq!(r.per_supporting_views.iter().map(|s| s.poses).sum::<usize>(), r.poses);
    }
}
