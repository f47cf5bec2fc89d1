use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use posefuse::data::{generate_synthetic, load_folds, load_scene, read_heatmaps, save_dataset, SupportMode, SynthConfig};
use posefuse::fusion::{aggregate, lift_heatmaps, softmax_weights, Joint};
use posefuse::gradcheck;
use posefuse::heatmap::{mask_heatmap, BoundingBox, Heatmap, MaskConfig};
use posefuse::matching::{match_boxes, BoxCombination, MatchConfig};
use posefuse::pipeline::{evaluate, train, HeatmapSource, LossMode, ToyPredictor, TrainConfig};

#[derive(Parser)]
#[command(name = "posefuse", version, about = "Multi-view 3D pose fusion from 2D heatmaps and depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset
    SynthGen(SynthArgs),
    /// Train the toy predictor with the 3D or 2D loss
    Train(TrainArgs),
    /// Evaluate a checkpoint and write an EvalReport
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites
    Gradcheck(GradArgs),
    /// Associate detected boxes across views
    Match(MatchArgs),
    /// Fuse per-view heatmap rasters into a 3D pose
    Fuse(FuseArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// JSON generator config; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    /// `natural` or `forced`
    #[arg(long)]
    support: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// `proposed-3d` or `baseline-2d`
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
    /// Dataset root
    #[arg(long)]
    data: Option<String>,
    /// Comma-separated fold names
    #[arg(long, value_delimiter = ',')]
    train_folds: Option<Vec<String>>,
    /// Output directory (checkpoint, loss curve, resolved config)
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated fold names (default: all folds)
    #[arg(long, value_delimiter = ',')]
    folds: Vec<String>,
    /// Inference path: `proposed-3d` or `baseline-2d`
    #[arg(long, default_value = "proposed-3d")]
    mode: String,
    /// Use ideal Gaussian heatmaps instead of a predictor
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MatchArgs {
    /// Scene directory providing depth images and cameras
    #[arg(long)]
    scene: PathBuf,
    /// Detections JSON; defaults to the scene's annotated boxes
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long, default_value_t = posefuse::matching::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Person whose boxes mask the heatmaps
    #[arg(long)]
    person: usize,
    /// `VIEW=PATH` heatmap raster per supporting view (repeatable)
    #[arg(long = "heatmap", required = true)]
    heatmaps: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Plain-text point list for external 3D plotting
    #[arg(long)]
    points: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Match(a) => match_cmd(a),
        Command::Fuse(a) => fuse_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_mode(s: &str) -> Result<LossMode> {
    LossMode::parse(s).with_context(|| format!("unknown mode `{s}` (expected proposed-3d or baseline-2d)"))
}

fn synth_gen(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.train_scenes {
        cfg.train_scenes = v;
    }
    if let Some(v) = a.test_scenes {
        cfg.test_scenes = v;
    }
    if let Some(v) = a.height {
        cfg.height = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    if let Some(v) = a.views {
        cfg.views = v;
    }
    if let Some(s) = a.support {
        cfg.support = match s.as_str() {
            "natural" => SupportMode::Natural,
            "forced" => SupportMode::Forced,
            other => bail!("unknown support mode `{other}` (expected natural or forced)"),
        };
    }
    let (train_set, test_set) = generate_synthetic(&cfg)?;
    save_dataset(&a.out, &[("train", &train_set), ("test", &test_set)])?;
    write_json(&a.out.join("synth_config.json"), &cfg)?;
    println!("wrote {} train and {} test scenes to {}", train_set.len(), test_set.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = &a.mode {
        cfg.mode = parse_mode(m)?;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.augment {
        cfg.augment = v;
    }
    if let Some(v) = a.data {
        cfg.data = v;
    }
    if let Some(v) = a.train_folds {
        cfg.train_folds = v;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    cfg.validate()?;
    let scenes = load_folds(Path::new(&cfg.data), &cfg.train_folds)?;
    if scenes.is_empty() {
        bail!("dataset {} has no scenes in folds {:?}", cfg.data, cfg.train_folds);
    }
    let out = PathBuf::from(&cfg.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("train_config.json"), &cfg)?;
    let ckpt = out.join("model.ckpt");
    let (_, outcome) = train(&cfg, &scenes, Some(&ckpt), |epoch, loss| {
        eprintln!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    })?;
    write_json(&out.join("losses.json"), &outcome)?;
    println!("checkpoint {} (best epoch {})", ckpt.display(), outcome.best_epoch + 1);
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode> {
    let mode = parse_mode(&a.mode)?;
    let scenes = load_folds(&a.data, &a.folds)?;
    if scenes.is_empty() {
        bail!("dataset {} is empty", a.data.display());
    }
    let report = if a.oracle {
        evaluate(&scenes, HeatmapSource::Oracle { sigma: 1.0, peak: 1000.0 }, mode)?
    } else {
        let path = a.checkpoint.expect("clap enforces checkpoint");
        let predictor = ToyPredictor::load(&path)?;
        evaluate(&scenes, HeatmapSource::Predictor(&predictor), mode)?
    };
    fs::write(&a.out, report.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    match report.average_cm {
        Some(avg) => println!("{}: average MPJPE {avg:.2} cm over {} poses", report.inference, report.poses),
        None => println!("{}: no joints scored", report.inference),
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(a: GradArgs) -> Result<ExitCode> {
    let results = gradcheck::run_all(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        println!("{status} {:<22} {:<36} {:.2e} (< {:.0e})", r.suite, r.name, r.max_rel_error, r.tolerance);
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed", results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Detections: one list of boxes per view. Scores are accepted and ignored.
#[derive(Deserialize)]
struct Detections {
    views: Vec<Vec<Detection>>,
}

#[derive(Deserialize)]
struct Detection {
    #[serde(rename = "box")]
    bbox: [usize; 4],
    #[serde(default)]
    #[allow(dead_code)]
    score: Option<f64>,
}

#[derive(Serialize)]
struct MatchOutput<'a> {
    threshold: f64,
    combinations: &'a [BoxCombination],
}

fn match_cmd(a: MatchArgs) -> Result<ExitCode> {
    if !(a.threshold > 0.0 && a.threshold.is_finite()) {
        bail!("threshold must be positive");
    }
    let scene = load_scene(&a.scene)?;
    let boxes: Vec<Vec<BoundingBox>> = match &a.detections {
        Some(path) => {
            let det: Detections = read_json(path)?;
            if det.views.len() != scene.num_views() {
                bail!("detections list {} views, scene has {}", det.views.len(), scene.num_views());
            }
            det.views
                .iter()
                .enumerate()
                .map(|(v, ds)| {
                    ds.iter()
                        .enumerate()
                        .map(|(i, d)| {
                            let [x0, y0, x1, y1] = d.bbox;
                            BoundingBox::new(v, i, (x0, y0), (x1, y1), (scene.width, scene.height))
                                .with_context(|| format!("detection {i} in view {v}"))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?
        }
        None => (0..scene.num_views()).map(|v| scene.boxes_in_view(v)).collect(),
    };
    let combos = match_boxes(&boxes, &scene.depths(), &scene.cameras, &MatchConfig { threshold: a.threshold });
    write_json(&a.out, &MatchOutput { threshold: a.threshold, combinations: &combos })?;
    println!("{} boxes into {} combinations", boxes.iter().map(Vec::len).sum::<usize>(), combos.len());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct FusedJoint {
    joint: Joint,
    position: Option<[f64; 3]>,
}

#[derive(Serialize)]
struct FusedPose {
    person: usize,
    joints: Vec<FusedJoint>,
}

fn fuse_cmd(a: FuseArgs) -> Result<ExitCode> {
    let scene = load_scene(&a.scene)?;
    if a.person >= scene.persons.len() {
        bail!("scene has {} persons, no person {}", scene.persons.len(), a.person);
    }
    let cfg = MaskConfig::default();
    let mut per_view: Vec<Vec<Heatmap>> = Vec::new();
    for arg in &a.heatmaps {
        let (view, path) = arg.split_once('=').with_context(|| format!("expected VIEW=PATH, got `{arg}`"))?;
        let view: usize = view.parse().with_context(|| format!("bad view index `{view}`"))?;
        if view >= scene.num_views() {
            bail!("view {view} does not exist (scene has {})", scene.num_views());
        }
        let bbox = scene.persons[a.person].views[view]
            .bbox
            .with_context(|| format!("person {} has no box in view {view}", a.person))?;
        let maps = read_heatmaps(Path::new(path), view)?;
        if maps.len() != Joint::ALL.len() {
            bail!("{path}: expected {} channels, found {}", Joint::ALL.len(), maps.len());
        }
        let masked = maps
            .iter()
            .map(|m| mask_heatmap(m, &bbox, &scene.views[view].depth, &cfg))
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("masking {path}"))?;
        per_view.push(masked);
    }
    let depths = scene.depths();
    let mut joints = Vec::new();
    let mut lines = vec!["# kind joint x y z weight".to_string()];
    for j in Joint::ALL {
        let maps: Vec<Heatmap> = per_view.iter().map(|m| m[j.index()].clone()).collect();
        let cloud = lift_heatmaps(a.person, &maps, &depths, &scene.cameras)?;
        let position = aggregate(&cloud, &cfg).ok();
        if let Some(p) = position {
            for (q, w) in cloud.points.iter().zip(softmax_weights(&cloud)) {
                if w > 1e-6 {
                    lines.push(format!("cloud {} {:.6} {:.6} {:.6} {w:.6e}", j.index(), q.x, q.y, q.z));
                }
            }
            lines.push(format!("joint {} {:.6} {:.6} {:.6} 1", j.index(), p.x, p.y, p.z));
        }
        joints.push(FusedJoint { joint: j, position: position.map(|p| p.to_array()) });
    }
    write_json(&a.out, &FusedPose { person: a.person, joints })?;
    if let Some(path) = &a.points {
        fs::write(path, lines.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    println!("fused person {} from {} views", a.person, per_view.len());
    Ok(ExitCode::SUCCESS)
}
