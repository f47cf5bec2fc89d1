//! Lifting masked heatmaps into a weighted point cloud in the shared frame,
//! softmax centre-of-mass aggregation, the MPJPE metric, and the 2D-domain
//! baseline (2D centre of mass, depth indexing, cross-view softmax fusion).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, Point3};
use crate::heatmap::{DepthImage, Heatmap, MaskConfig};
use crate::tensorgrad::{softmax, softmax_centroid_adjoint_into};

pub const NUM_JOINTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("no depth image for view {0}")]
    MissingDepth(usize),
    #[error("no camera for view {0}")]
    MissingCamera(usize),
    #[error("size mismatch: {0}")]
    Shape(String),
    #[error("joint unresolvable: every activation is masked")]
    Unresolvable,
    #[error("metric undefined: no joint is present in both poses")]
    UndefinedMetric,
    #[error("pose sets differ in length ({0} vs {1})")]
    Correspondence(usize, usize),
}

/// The ten upper-body joints, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    Head,
    Neck,
    LeftShoulder,
    RightShoulder,
    LeftHip,
    RightHip,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::Head,
        Joint::Neck,
        Joint::LeftShoulder,
        Joint::RightShoulder,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftElbow,
        Joint::RightElbow,
        Joint::LeftWrist,
        Joint::RightWrist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn joint_type(self) -> JointType {
        match self {
            Joint::Head => JointType::Head,
            Joint::Neck => JointType::Neck,
            Joint::LeftShoulder | Joint::RightShoulder => JointType::Shoulder,
            Joint::LeftHip | Joint::RightHip => JointType::Hip,
            Joint::LeftElbow | Joint::RightElbow => JointType::Elbow,
            Joint::LeftWrist | Joint::RightWrist => JointType::Wrist,
        }
    }
}

/// Joint types with left and right parts merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    Head,
    Neck,
    Shoulder,
    Hip,
    Elbow,
    Wrist,
}

impl JointType {
    pub const ALL: [JointType; 6] =
        [JointType::Head, JointType::Neck, JointType::Shoulder, JointType::Hip, JointType::Elbow, JointType::Wrist];

    pub fn name(self) -> &'static str {
        match self {
            JointType::Head => "head",
            JointType::Neck => "neck",
            JointType::Shoulder => "shoulder",
            JointType::Hip => "hip",
            JointType::Elbow => "elbow",
            JointType::Wrist => "wrist",
        }
    }

    /// Types reported in the per-supporting-view breakdown.
    pub fn in_view_breakdown(self) -> bool {
        !matches!(self, JointType::Head | JointType::Neck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub person: usize,
    pub joints: [Option<Point3>; NUM_JOINTS],
}

impl Pose3 {
    pub fn empty(person: usize) -> Self {
        Pose3 { person, joints: [None; NUM_JOINTS] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub person: usize,
    pub view: usize,
    pub joints: [Option<[f64; 2]>; NUM_JOINTS],
}

/// Back-projected pixels of every view with their activations, for one
/// person and joint. Masked pixels are kept with activation ε.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCloud {
    pub person: usize,
    pub joint: usize,
    pub points: Vec<Point3>,
    pub activations: Vec<f64>,
}

/// Shared-frame coordinates of every pixel of a view, row-major. Pixels with
/// unknown depth collapse onto the camera centre.
pub fn lift_view(depth: &DepthImage, camera: &Camera) -> Vec<Point3> {
    let mut out = Vec::with_capacity(depth.width * depth.height);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let p = camera.backproject(x as f64, y as f64, depth.at(x, y));
            out.push(camera.to_reference_frame(p));
        }
    }
    out
}

/// Lifts the masked heatmaps of one person and joint across views and
/// concatenates them, in the order given.
pub fn lift_heatmaps(
    person: usize,
    heatmaps: &[Heatmap],
    depths: &[DepthImage],
    cameras: &[Camera],
) -> Result<WeightedCloud, FusionError> {
    let joint = heatmaps.first().map(|h| h.joint).unwrap_or(0);
    let mut cloud = WeightedCloud { person, joint, points: Vec::new(), activations: Vec::new() };
    for h in heatmaps {
        let depth = depths.iter().find(|d| d.view == h.view).ok_or(FusionError::MissingDepth(h.view))?;
        let camera = cameras.iter().find(|c| c.id == h.view).ok_or(FusionError::MissingCamera(h.view))?;
        if depth.width != h.width || depth.height != h.height {
            return Err(FusionError::Shape(format!("heatmap {}x{} vs depth {}x{}", h.width, h.height, depth.width, depth.height)));
        }
        cloud.points.extend(lift_view(depth, camera));
        cloud.activations.extend_from_slice(&h.values);
    }
    Ok(cloud)
}

pub fn softmax_weights(cloud: &WeightedCloud) -> Vec<f64> {
    softmax(&cloud.activations)
}

/// Softmax-weighted centre of mass of the cloud.
pub fn aggregate(cloud: &WeightedCloud, cfg: &MaskConfig) -> Result<Point3, FusionError> {
    if !cloud.activations.iter().any(|a| *a > cfg.epsilon) {
        return Err(FusionError::Unresolvable);
    }
    let weights = softmax_weights(cloud);
    Ok(cloud.points.iter().zip(&weights).fold(Point3::ORIGIN, |acc, (p, w)| acc + *p * *w))
}

/// Gradient of a downstream scalar with respect to every activation, given
/// the upstream gradient `g` on the prediction: `a_k ⟨g, c_k − p̂⟩`.
pub fn aggregate_adjoint(cloud: &WeightedCloud, prediction: Point3, g: Point3) -> Vec<f64> {
    let weights = softmax_weights(cloud);
    let coords: Vec<f64> = cloud.points.iter().flat_map(|p| p.to_array()).collect();
    let mut out = vec![0.0; cloud.points.len()];
    softmax_centroid_adjoint_into(&weights, &coords, &prediction.to_array(), &g.to_array(), &mut out);
    out
}

/// Per-joint Euclidean errors (meters) for jointly present joints, paired
/// with the joint they belong to.
pub fn joint_errors(predicted: &Pose3, reference: &Pose3) -> Vec<(Joint, f64)> {
    Joint::ALL
        .iter()
        .filter_map(|j| match (predicted.joints[j.index()], reference.joints[j.index()]) {
            (Some(p), Some(r)) => Some((*j, p.distance(r))),
            _ => None,
        })
        .collect()
}

/// Mean per-joint position error in centimeters, over persons and joints
/// present in both sets. Poses correspond by position in the slices.
pub fn mpjpe_3d(predicted: &[Pose3], reference: &[Pose3]) -> Result<f64, FusionError> {
    if predicted.len() != reference.len() {
        return Err(FusionError::Correspondence(predicted.len(), reference.len()));
    }
    let errors: Vec<f64> =
        predicted.iter().zip(reference).flat_map(|(p, r)| joint_errors(p, r)).map(|(_, e)| e).collect();
    if errors.is_empty() {
        return Err(FusionError::UndefinedMetric);
    }
    Ok(100.0 * errors.iter().sum::<f64>() / errors.len() as f64)
}

/// 2D softmax centre of mass of a masked heatmap, `[x, y]` in pixels.
pub fn com_2d(masked: &Heatmap, cfg: &MaskConfig) -> Option<[f64; 2]> {
    if !masked.values.iter().any(|a| *a > cfg.epsilon) {
        return None;
    }
    let w = softmax(&masked.values);
    let mut out = [0.0; 2];
    for (i, wi) in w.iter().enumerate() {
        out[0] += wi * (i % masked.width) as f64;
        out[1] += wi * (i / masked.width) as f64;
    }
    Some(out)
}

/// Mean 2D Euclidean distance (pixels) over views, persons and joints present
/// in both. Poses are paired by `(person, view)`.
pub fn loss_2d(predicted: &[Pose2], reference: &[Pose2]) -> Result<f64, FusionError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in predicted {
        let Some(r) = reference.iter().find(|r| r.person == p.person && r.view == p.view) else { continue };
        for j in 0..NUM_JOINTS {
            if let (Some(a), Some(b)) = (p.joints[j], r.joints[j]) {
                sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(FusionError::UndefinedMetric);
    }
    Ok(sum / count as f64)
}

/// Per-view evidence for the 2D baseline: the view's 2D prediction for the
/// person, its depth, camera and the masked heatmaps (one per joint).
pub struct ViewEvidence<'a> {
    pub pose: &'a Pose2,
    pub depth: &'a DepthImage,
    pub camera: &'a Camera,
    pub heatmaps: &'a [Heatmap],
}

/// Lifts each view's 2D joints through the depth at the rounded pixel and
/// fuses the candidates by a softmax over the heatmap values sampled there.
/// Views with unknown depth at the position are dropped.
pub fn lift_and_fuse_2d(person: usize, views: &[ViewEvidence<'_>]) -> Pose3 {
    let mut pose = Pose3::empty(person);
    for j in 0..NUM_JOINTS {
        let mut candidates = Vec::new();
        let mut scores = Vec::new();
        for v in views {
            let Some([x, y]) = v.pose.joints[j] else { continue };
            let (px, py) = (x.round(), y.round());
            if px < 0.0 || py < 0.0 || px as usize >= v.depth.width || py as usize >= v.depth.height {
                continue;
            }
            let (px, py) = (px as usize, py as usize);
            let d = v.depth.at(px, py);
            if d <= 0.0 {
                continue;
            }
            candidates.push(v.camera.to_reference_frame(v.camera.backproject(px as f64, py as f64, d)));
            scores.push(v.heatmaps[j].at(px, py));
        }
        if candidates.is_empty() {
            continue;
        }
        let w = softmax(&scores);
        pose.joints[j] = Some(candidates.iter().zip(&w).fold(Point3::ORIGIN, |acc, (c, wi)| acc + *c * *wi));
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RigidTransform, Point3};
    use crate::heatmap::DEFAULT_EPSILON;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<Point3>, activations: Vec<f64>) -> WeightedCloud {
        WeightedCloud { person: 0, joint: 0, points, activations }
    }

    fn ident_cam(w: usize, h: usize) -> Camera {
        Camera::new(0, (1.0, 1.0), (0.0, 0.0), (w, h), RigidTransform::IDENTITY).unwrap()
    }

    #[test]
    fn single_pixel_view_lifts_to_principal_ray() {
        let cam = Camera::new(0, (50.0, 50.0), (0.0, 0.0), (1, 1), RigidTransform::IDENTITY).unwrap();
        let d = DepthImage::new(0, 1, 1, vec![2.5]).unwrap();
        let h = Heatmap::new(0, 3, 1, 1, vec![0.7]).unwrap();
        let c = lift_heatmaps(0, &[h], &[d], &[cam]).unwrap();
        assert_eq!(c.points, vec![Point3::new(0.0, 0.0, 2.5)]);
        assert_eq!(c.joint, 3);
    }

    #[test]
    fn missing_depth_is_an_error() {
        let h = Heatmap::new(1, 0, 1, 1, vec![0.0]).unwrap();
        assert_eq!(lift_heatmaps(0, &[h], &[], &[]), Err(FusionError::MissingDepth(1)));
    }

    #[test]
    fn aggregate_examples() {
        let cfg = MaskConfig::default();
        let p = Point3::new(0.3, -0.2, 2.0);
        let c = cloud(vec![Point3::ORIGIN, p, Point3::new(9.0, 9.0, 9.0)], vec![DEFAULT_EPSILON, 1.7, DEFAULT_EPSILON]);
        assert_eq!(aggregate(&c, &cfg).unwrap(), p);
        let c = cloud(vec![Point3::new(0.0, 0.0, 1.0), Point3::new(2.0, 0.0, 3.0)], vec![0.5, 0.5]);
        assert!((aggregate(&c, &cfg).unwrap() - Point3::new(1.0, 0.0, 2.0)).norm() < 1e-15);
        let c = cloud(
            vec![Point3::new(0.0, 0.0, 1.0), Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, 3.0)],
            vec![0.0, 2f64.ln(), 0.0],
        );
        assert!((aggregate(&c, &cfg).unwrap().z - 2.0).abs() < 1e-15);
        let c = cloud(vec![Point3::ORIGIN], vec![DEFAULT_EPSILON]);
        assert_eq!(aggregate(&c, &cfg), Err(FusionError::Unresolvable));
    }

    #[test]
    fn adjoint_properties() {
        // uniform activations, g orthogonal to every offset
        let c = cloud(vec![Point3::new(1.0, 0.0, 0.0), Point3::new(-1.0, 0.0, 0.0)], vec![0.3, 0.3]);
        let p = aggregate(&c, &MaskConfig::default()).unwrap();
        let g = aggregate_adjoint(&c, p, Point3::new(0.0, 1.0, 0.0));
        assert!(g.iter().all(|v| v.abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let c = cloud(
                (0..n).map(|_| Point3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.0..5.0))).collect(),
                (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            );
            let p = aggregate(&c, &MaskConfig::default()).unwrap();
            let g = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            assert!(aggregate_adjoint(&c, p, g).iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn mpjpe_examples() {
        let mut a = Pose3::empty(0);
        a.joints[0] = Some(Point3::new(1.0, 1.0, 1.0));
        assert_eq!(mpjpe_3d(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let mut b = a.clone();
        b.joints[0] = Some(Point3::new(1.03, 1.04, 1.0));
        assert!((mpjpe_3d(&[b], &[a.clone()]).unwrap() - 5.0).abs() < 1e-9);

        let o = Point3::ORIGIN;
        let mk = |d1: f64, d2: f64| {
            let mut p = Pose3::empty(0);
            p.joints[0] = Some(Point3::new(d1 / 100.0, 0.0, 0.0));
            p.joints[5] = Some(Point3::new(0.0, d2 / 100.0, 0.0));
            p
        };
        let mut zero = Pose3::empty(0);
        zero.joints[0] = Some(o);
        zero.joints[5] = Some(o);
        let m = mpjpe_3d(&[mk(1.0, 2.0), mk(3.0, 4.0)], &[zero.clone(), zero.clone()]).unwrap();
        assert!((m - 2.5).abs() < 1e-12);

        assert_eq!(mpjpe_3d(&[Pose3::empty(0)], &[a.clone()]), Err(FusionError::UndefinedMetric));
        assert_eq!(mpjpe_3d(&[], &[a]), Err(FusionError::Correspondence(0, 1)));
    }

    #[test]
    fn com_2d_examples() {
        let cfg = MaskConfig::default();
        let mut h = Heatmap::filled(0, 0, 5, 4, DEFAULT_EPSILON);
        h.values[2 * 5 + 3] = -2.0;
        assert_eq!(com_2d(&h, &cfg), Some([3.0, 2.0]));
        h.values[0] = -2.0;
        assert_eq!(com_2d(&h, &cfg), Some([1.5, 1.0]));
        assert_eq!(com_2d(&Heatmap::filled(0, 0, 5, 4, DEFAULT_EPSILON), &cfg), None);
    }

    #[test]
    fn com_2d_matches_lifted_aggregate() {
        // unit depth and identity intrinsics: the 3D centre of mass is (x, y, 1)
        let (w, h) = (6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hm = Heatmap::new(0, 0, w, h, (0..w * h).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let d = DepthImage::new(0, w, h, vec![1.0; w * h]).unwrap();
        let c = lift_heatmaps(0, &[hm.clone()], &[d], &[ident_cam(w, h)]).unwrap();
        let p = aggregate(&c, &MaskConfig::default()).unwrap();
        let q = com_2d(&hm, &MaskConfig::default()).unwrap();
        assert!((p.x - q[0]).abs() < 1e-12 && (p.y - q[1]).abs() < 1e-12 && (p.z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_2d_examples() {
        let mut a = Pose2 { person: 0, view: 0, joints: [None; NUM_JOINTS] };
        a.joints[1] = Some([10.0, 10.0]);
        assert_eq!(loss_2d(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let mut b = a.clone();
        b.joints[1] = Some([13.0, 14.0]);
        assert_eq!(loss_2d(&[b], &[a.clone()]).unwrap(), 5.0);

        // 2 views x 2 joints: distances 1, 2 (view 0) and 3, 6 (view 1) -> 3
        let mut r0 = Pose2 { person: 0, view: 0, joints: [None; NUM_JOINTS] };
        r0.joints[0] = Some([0.0, 0.0]);
        r0.joints[1] = Some([0.0, 0.0]);
        let r1 = Pose2 { view: 1, ..r0.clone() };
        let mut p0 = r0.clone();
        p0.joints[0] = Some([1.0, 0.0]);
        p0.joints[1] = Some([0.0, 2.0]);
        let mut p1 = r1.clone();
        p1.joints[0] = Some([3.0, 0.0]);
        p1.joints[1] = Some([0.0, 6.0]);
        assert_eq!(loss_2d(&[p0, p1], &[r0, r1]).unwrap(), 3.0);
        assert_eq!(loss_2d(&[], &[a]), Err(FusionError::UndefinedMetric));
    }

    #[test]
    fn lift_and_fuse_2d_examples() {
        let (w, h) = (8, 6);
        let cam0 = Camera::new(0, (4.0, 4.0), (4.0, 3.0), (w, h), RigidTransform::IDENTITY).unwrap();
        let cam1 = Camera::new(1, (4.0, 4.0), (4.0, 3.0), (w, h), RigidTransform::translation(Point3::new(1.0, 0.0, 0.0))).unwrap();
        let d = DepthImage::new(0, w, h, vec![2.0; w * h]).unwrap();
        let hms: Vec<Heatmap> = (0..NUM_JOINTS).map(|j| Heatmap::filled(0, j, w, h, 0.5)).collect();
        let mut pose = Pose2 { person: 0, view: 0, joints: [None; NUM_JOINTS] };
        pose.joints[2] = Some([5.8, 3.1]);
        let single = lift_and_fuse_2d(0, &[ViewEvidence { pose: &pose, depth: &d, camera: &cam0, heatmaps: &hms }]);
        let expect = cam0.backproject(6.0, 3.0, 2.0);
        assert_eq!(single.joints[2], Some(expect));
        assert!(single.joints[0].is_none());

        let pose1 = Pose2 { view: 1, ..pose.clone() };
        let fused = lift_and_fuse_2d(
            0,
            &[
                ViewEvidence { pose: &pose, depth: &d, camera: &cam0, heatmaps: &hms },
                ViewEvidence { pose: &pose1, depth: &d, camera: &cam1, heatmaps: &hms },
            ],
        );
        let mid = expect + Point3::new(0.5, 0.0, 0.0);
        assert!((fused.joints[2].unwrap() - mid).norm() < 1e-12);

        let holes = DepthImage::new(0, w, h, vec![0.0; w * h]).unwrap();
        let dropped = lift_and_fuse_2d(0, &[ViewEvidence { pose: &pose, depth: &holes, camera: &cam0, heatmaps: &hms }]);
        assert!(dropped.joints[2].is_none());
    }
}
