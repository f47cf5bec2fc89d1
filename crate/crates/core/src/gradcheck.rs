//! Finite-difference suites comparing reverse-mode gradients with central
//! differences: every tape op, the fusion adjoint, the inverse-augmentation
//! adjoint and the whole scene-to-loss chain.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{CropWindow, ColorJitter, InverseWarp, ViewAugmentation};
use crate::data::{generate_synthetic, Scene, SynthConfig};
use crate::fusion::{aggregate, aggregate_adjoint, WeightedCloud};
use crate::geometry::Point3;
use crate::heatmap::MaskConfig;
use crate::pipeline::{loss_2d_person, loss_3d_person, forward_person, AnnotationCounters, LossMode, SceneContext, ToyPredictor};
use crate::tensorgrad::{finite_difference_check, max_relative_error, SparseMap, Tape, Tensor, TensorError, Var};
use crate::augment::AugmentationRecord;

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Reduces any tensor to a scalar through a fixed random projection.
fn project(tape: &mut Tape, v: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = tape.constant(Tensor::new(tape.shape(v).to_vec(), weights.data().to_vec())?);
    let m = tape.mul(v, w)?;
    tape.mean(m)
}

type OpCase = (&'static str, Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var, TensorError>>);

/// Every tape op, each checked with respect to one of its operands.
pub fn ops_suite(seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-6;
    let mut cases: Vec<OpCase> = Vec::new();

    let other = rand_tensor(&mut rng, &[7], -1.0, 1.0);
    let proj7 = rand_tensor(&mut rng, &[7], -1.0, 1.0);
    for name in ["add", "sub", "mul"] {
        let (o, p) = (other.clone(), proj7.clone());
        cases.push((
            name,
            rand_tensor(&mut rng, &[7], -1.0, 1.0),
            Box::new(move |t, x| {
                let b = t.constant(o.clone());
                let y = match name {
                    "add" => t.add(x, b)?,
                    "sub" => t.sub(b, x)?,
                    _ => t.mul(x, b)?,
                };
                project(t, y, &p)
            }),
        ));
    }
    {
        let p = proj7.clone();
        cases.push(("scalar_div", rand_tensor(&mut rng, &[7], -1.0, 1.0), Box::new(move |t, x| {
            let y = t.scalar_div(x, 3.7)?;
            project(t, y, &p)
        })));
    }
    {
        // entries kept away from the kink
        let p = proj7.clone();
        let mut x = rand_tensor(&mut rng, &[7], 0.1, 1.0);
        x.data_mut().iter_mut().step_by(2).for_each(|v| *v = -*v);
        cases.push(("relu", x, Box::new(move |t, x| {
            let y = t.relu(x)?;
            project(t, y, &p)
        })));
    }
    {
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let input = rand_tensor(&mut rng, &[2, 5, 6], -1.0, 1.0);
        let p = rand_tensor(&mut rng, &[3, 5, 6], -1.0, 1.0);
        let (w1, b1, p1) = (w.clone(), b.clone(), p.clone());
        cases.push(("conv2d/input", input.clone(), Box::new(move |t, x| {
            let (wv, bv) = (t.constant(w1.clone()), t.constant(b1.clone()));
            let y = t.conv2d(x, wv, bv)?;
            project(t, y, &p1)
        })));
        let (i2, b2, p2) = (input.clone(), b.clone(), p.clone());
        cases.push(("conv2d/weight", w.clone(), Box::new(move |t, x| {
            let (iv, bv) = (t.constant(i2.clone()), t.constant(b2.clone()));
            let y = t.conv2d(iv, x, bv)?;
            project(t, y, &p2)
        })));
        let (i3, w3, p3) = (input, w, p);
        cases.push(("conv2d/bias", b, Box::new(move |t, x| {
            let (iv, wv) = (t.constant(i3.clone()), t.constant(w3.clone()));
            let y = t.conv2d(iv, wv, x)?;
            project(t, y, &p3)
        })));
    }
    {
        let w = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let input = rand_tensor(&mut rng, &[6], -1.0, 1.0);
        let p = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let (b1, p1, i1) = (b.clone(), p.clone(), input.clone());
        cases.push(("linear/weight", w.clone(), Box::new(move |t, x| {
            let (iv, bv) = (t.constant(i1.clone()), t.constant(b1.clone()));
            let y = t.linear(iv, x, bv)?;
            project(t, y, &p1)
        })));
        let (w2, b2, p2) = (w.clone(), b.clone(), p.clone());
        cases.push(("linear/input", input.clone(), Box::new(move |t, x| {
            let (wv, bv) = (t.constant(w2.clone()), t.constant(b2.clone()));
            let y = t.linear(x, wv, bv)?;
            project(t, y, &p2)
        })));
        let (w3, i3) = (w, input);
        cases.push(("linear/bias", b, Box::new(move |t, x| {
            let (iv, wv) = (t.constant(i3.clone()), t.constant(w3.clone()));
            let y = t.linear(iv, wv, x)?;
            project(t, y, &p)
        })));
    }
    {
        let p = rand_tensor(&mut rng, &[9], -1.0, 1.0);
        cases.push(("softmax_over_set", rand_tensor(&mut rng, &[9], -2.0, 2.0), Box::new(move |t, x| {
            let y = t.softmax_over_set(x)?;
            project(t, y, &p)
        })));
    }
    {
        let coords = rand_tensor(&mut rng, &[5, 3], -2.0, 2.0);
        let weights = rand_tensor(&mut rng, &[5], 0.0, 1.0);
        let p = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let (w1, p1) = (weights.clone(), p.clone());
        cases.push(("weighted_sum/coords", coords.clone(), Box::new(move |t, x| {
            let wv = t.constant(w1.clone());
            let y = t.weighted_sum(x, wv)?;
            project(t, y, &p1)
        })));
        let (c2, p2) = (coords.clone(), p.clone());
        cases.push(("weighted_sum/weights", weights, Box::new(move |t, x| {
            let cv = t.constant(c2.clone());
            let y = t.weighted_sum(cv, x)?;
            project(t, y, &p2)
        })));
        let logits = rand_tensor(&mut rng, &[5], -2.0, 2.0);
        let (c3, p3) = (coords.clone(), p.clone());
        cases.push(("softmax_centroid/logits", logits.clone(), Box::new(move |t, x| {
            let cv = t.constant(c3.clone());
            let y = t.softmax_centroid(x, cv)?;
            project(t, y, &p3)
        })));
        cases.push(("softmax_centroid/coords", coords, Box::new(move |t, x| {
            let lv = t.constant(logits.clone());
            let y = t.softmax_centroid(lv, x)?;
            project(t, y, &p)
        })));
    }
    cases.push(("euclidean_norm", rand_tensor(&mut rng, &[4], 0.2, 1.0), Box::new(|t, x| t.euclidean_norm(x))));
    cases.push(("mean", rand_tensor(&mut rng, &[6], -1.0, 1.0), Box::new(|t, x| {
        let m = t.mul(x, x)?;
        t.mean(m)
    })));
    {
        let keep: Arc<Vec<bool>> = Arc::new((0..8).map(|i| i % 3 != 0).collect());
        let p = rand_tensor(&mut rng, &[8], -1.0, 1.0);
        cases.push(("mask_fill", rand_tensor(&mut rng, &[8], -1.0, 1.0), Box::new(move |t, x| {
            let y = t.mask_fill(x, keep.clone(), -5.0)?;
            let sq = t.mul(y, y)?;
            project(t, sq, &p)
        })));
    }
    {
        let rows: Vec<Vec<(usize, f64)>> =
            (0..5).map(|r| vec![(r % 4, 0.25 + 0.1 * r as f64), ((r + 1) % 4, 0.5)]).collect();
        let map = Arc::new(SparseMap::from_rows(4, rows));
        let p = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        cases.push(("resample", rand_tensor(&mut rng, &[2, 4], -1.0, 1.0), Box::new(move |t, x| {
            let y = t.resample(x, 2, map.clone())?;
            project(t, y, &p)
        })));
    }
    {
        let p = rand_tensor(&mut rng, &[2, 2], -1.0, 1.0);
        cases.push(("slice", rand_tensor(&mut rng, &[7], -1.0, 1.0), Box::new(move |t, x| {
            let y = t.slice(x, 2, vec![2, 2])?;
            project(t, y, &p)
        })));
        let p2 = rand_tensor(&mut rng, &[10], -1.0, 1.0);
        cases.push(("concat", rand_tensor(&mut rng, &[5], -1.0, 1.0), Box::new(move |t, x| {
            let s = t.scalar_div(x, 2.0)?;
            let y = t.concat(&[x, s])?;
            project(t, y, &p2)
        })));
    }

    cases
        .into_iter()
        .map(|(name, point, f)| {
            Ok(CheckResult { suite: "ops", name: name.into(), max_rel_error: finite_difference_check(f, &point, STEP)?, tolerance: tol })
        })
        .collect()
}

/// Closed-form fusion adjoint against central differences of
/// `⟨g, aggregate(cloud)⟩` with respect to every activation.
pub fn aggregate_suite(seed: u64, clouds: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MaskConfig::default();
    (0..clouds)
        .map(|c| {
            let n = rng.gen_range(2..40);
            let cloud = WeightedCloud {
                person: 0,
                joint: 0,
                points: (0..n)
                    .map(|_| Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(1.0..5.0)))
                    .collect(),
                activations: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            };
            let g = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let pred = aggregate(&cloud, &cfg).expect("finite activations");
            let analytic = aggregate_adjoint(&cloud, pred, g);
            let numeric: Vec<f64> = (0..n)
                .map(|k| {
                    let eval = |delta: f64| {
                        let mut c = cloud.clone();
                        c.activations[k] += delta;
                        aggregate(&c, &cfg).expect("finite").dot(g)
                    };
                    (eval(STEP) - eval(-STEP)) / (2.0 * STEP)
                })
                .collect();
            CheckResult {
                suite: "aggregate_adjoint",
                name: format!("cloud {c} ({n} points)"),
                max_rel_error: max_relative_error(&analytic, &numeric),
                tolerance: 1e-6,
            }
        })
        .collect()
}

fn random_augmentation(rng: &mut impl Rng, h: usize, w: usize) -> ViewAugmentation {
    let (ch, cw) = (h - rng.gen_range(0..3), w - rng.gen_range(0..3));
    ViewAugmentation {
        height: h,
        width: w,
        flip: rng.gen_bool(0.5),
        crop: CropWindow { row: rng.gen_range(0..=h - ch), col: rng.gen_range(0..=w - cw), height: ch, width: cw },
        rotation_deg: rng.gen_range(-15.0..15.0),
        jitter: ColorJitter::NONE,
    }
}

/// Gradient through the inverse warp (bilinear resample + ε fill) checked
/// against central differences, plus the adjoint identity `⟨Mx, y⟩ = ⟨x, Mᵀy⟩`.
pub fn inverse_augmentation_suite(seed: u64, cases: usize) -> Result<Vec<CheckResult>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..cases {
        let (h, w) = (rng.gen_range(6..10), rng.gen_range(6..12));
        let aug = random_augmentation(&mut rng, h, w);
        let warp = InverseWarp::new(&aug);
        let n_in = aug.crop.height * aug.crop.width;
        let point = rand_tensor(&mut rng, &[2, n_in], -1.0, 1.0);
        let proj = rand_tensor(&mut rng, &[2, h * w], -1.0, 1.0);
        let keep: Arc<Vec<bool>> = Arc::new((0..2 * h * w).map(|i| warp.covered[i % (h * w)]).collect());
        let (map, p) = (warp.map.clone(), proj.clone());
        let err = finite_difference_check(
            move |t, x| {
                let y = t.resample(x, 2, map.clone())?;
                let m = t.mask_fill(y, keep.clone(), -3.0)?;
                let sq = t.mul(m, m)?;
                project(t, sq, &p)
            },
            &point,
            STEP,
        )?;
        out.push(CheckResult { suite: "inverse_augmentation", name: format!("warp {c} (fd)"), max_rel_error: err, tolerance: 1e-6 });

        let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut mx = vec![0.0; h * w];
        warp.map.apply(&x, &mut mx);
        let mut mty = vec![0.0; n_in];
        warp.map.apply_transpose(&y, &mut mty);
        let lhs: f64 = mx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&mty).map(|(a, b)| a * b).sum();
        out.push(CheckResult {
            suite: "inverse_augmentation",
            name: format!("warp {c} (adjoint identity)"),
            max_rel_error: (lhs - rhs).abs() / lhs.abs().max(1.0),
            tolerance: 1e-6,
        });
    }
    Ok(out)
}

/// A small synthetic scene (16×20) for the full-chain check.
pub fn chain_scene(seed: u64) -> Scene {
    let cfg = SynthConfig {
        height: 16,
        width: 20,
        fov_deg: 60.0,
        box_pad: 1,
        persons_min: 1,
        persons_max: 1,
        train_scenes: 1,
        test_scenes: 0,
        seed,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg).expect("chain scene generates").0.remove(0)
}

/// Scene → predictor → inverse augmentation → masking → fusion → loss,
/// differentiated with respect to every predictor parameter tensor.
pub fn chain_suite(seed: u64, mode: LossMode) -> Result<Vec<CheckResult>, crate::pipeline::PipelineError> {
    let scene = chain_scene(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let views = (0..scene.num_views()).map(|_| random_augmentation(&mut rng, scene.height, scene.width)).collect();
    let ctx = SceneContext::new(&scene, AugmentationRecord { views }, MaskConfig::default())?;
    // nonzero biases keep zero-input pixels off the ReLU kink
    let mut predictor = ToyPredictor::new(3, seed);
    for b in [1, 3, 5] {
        predictor.params[b].data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
    }
    let counters = AnnotationCounters::default();
    let mut out = Vec::new();
    for (i, name) in ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias"].iter().enumerate() {
        let f = |tape: &mut Tape, x: Var| -> Result<Var, TensorError> {
            let vars: Vec<Var> = predictor
                .params
                .iter()
                .enumerate()
                .map(|(k, p)| if k == i { x } else { tape.constant(p.clone()) })
                .collect();
            let outputs = forward_person(tape, &vars, &scene, 0, &ctx).map_err(pipeline_to_tensor)?;
            let loss = match mode {
                LossMode::Proposed3d => loss_3d_person(tape, &outputs, &scene, 0, &ctx, &counters),
                LossMode::Baseline2d => loss_2d_person(tape, &outputs, &scene, 0, &ctx, &counters),
            };
            loss.map_err(pipeline_to_tensor)?.ok_or(TensorError::NonFinite("no annotated joints"))
        };
        let err = finite_difference_check(f, &predictor.params[i], STEP)?;
        out.push(CheckResult { suite: "full_chain", name: format!("{} {name}", mode.name()), max_rel_error: err, tolerance: 1e-4 });
    }
    Ok(out)
}

fn pipeline_to_tensor(e: crate::pipeline::PipelineError) -> TensorError {
    match e {
        crate::pipeline::PipelineError::Tensor(t) => t,
        other => TensorError::Shape { op: "pipeline", detail: other.to_string() },
    }
}

/// All suites with fixed seeds.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>, crate::pipeline::PipelineError> {
    let mut out = ops_suite(seed)?;
    out.extend(aggregate_suite(seed, 20));
    out.extend(inverse_augmentation_suite(seed, 6)?);
    out.extend(chain_suite(seed, LossMode::Proposed3d)?);
    out.extend(chain_suite(seed, LossMode::Baseline2d)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass() {
        for r in ops_suite(1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn adjoints_pass() {
        for r in aggregate_suite(2, 10).into_iter().chain(inverse_augmentation_suite(2, 3).unwrap()) {
            assert!(r.passed(), "{r:?}");
        }
    }
}
