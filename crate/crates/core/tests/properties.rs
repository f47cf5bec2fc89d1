use posefuse::augment::{apply_to_raster, invert_on_heatmap, CropWindow, ColorJitter, ViewAugmentation};
use posefuse::fusion::{aggregate, softmax_weights, WeightedCloud};
use posefuse::geometry::{invert_transform, project_point, transform_point, Camera, Point3, RigidTransform};
use posefuse::heatmap::{Heatmap, MaskConfig, DEFAULT_EPSILON};
use posefuse::tensorgrad::SparseMap;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point3> {
    (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn rigid() -> impl Strategy<Value = RigidTransform> {
    (point(), -3.2f64..3.2, point()).prop_filter_map("degenerate axis", |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| RigidTransform::translation(t).compose(&RigidTransform::rotation(axis, angle)))
    })
}

fn cloud(n: usize) -> impl Strategy<Value = WeightedCloud> {
    (proptest::collection::vec(point(), n), proptest::collection::vec(-20.0f64..20.0, n))
        .prop_map(|(points, activations)| WeightedCloud { person: 0, joint: 0, points, activations })
}

proptest! {
    #[test]
    fn projection_inverts_backprojection(
        fx in 50.0f64..800.0, fy in 50.0f64..800.0,
        cx in 0.0f64..100.0, cy in 0.0f64..100.0,
        x in 0.0f64..200.0, y in 0.0f64..200.0, d in 0.1f64..20.0,
    ) {
        let cam = Camera::new(0, (fx, fy), (cx, cy), (200, 200), RigidTransform::IDENTITY).unwrap();
        let p = cam.backproject(x, y, d);
        prop_assert!((p.z - d).abs() < 1e-12);
        let (u, v) = project_point(p, &cam).unwrap();
        prop_assert!((u - x).abs() < 1e-9 && (v - y).abs() < 1e-9);
    }

    #[test]
    fn inverse_transform_round_trips(t in rigid(), p in point()) {
        let q = transform_point(transform_point(p, &t), &invert_transform(&t));
        prop_assert!(q.distance(p) < 1e-12);
        prop_assert!(t.compose(&invert_transform(&t)).max_abs_diff(&RigidTransform::IDENTITY) < 1e-12);
    }

    #[test]
    fn rigid_maps_preserve_distances(t in rigid(), a in point(), b in point()) {
        let d = transform_point(a, &t).distance(transform_point(b, &t));
        prop_assert!((d - a.distance(b)).abs() < 1e-12);
    }

    #[test]
    fn softmax_weights_form_a_distribution(c in cloud(12)) {
        let w = softmax_weights(&c);
        prop_assert!(w.iter().all(|w| *w >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_lies_in_bounding_box(c in cloud(9)) {
        let p = aggregate(&c, &MaskConfig::default()).unwrap();
        let lo = c.points.iter().fold(Point3::new(f64::MAX, f64::MAX, f64::MAX), |m, q| Point3::new(m.x.min(q.x), m.y.min(q.y), m.z.min(q.z)));
        let hi = c.points.iter().fold(Point3::new(f64::MIN, f64::MIN, f64::MIN), |m, q| Point3::new(m.x.max(q.x), m.y.max(q.y), m.z.max(q.z)));
        prop_assert!(p.x >= lo.x - 1e-9 && p.y >= lo.y - 1e-9 && p.z >= lo.z - 1e-9);
        prop_assert!(p.x <= hi.x + 1e-9 && p.y <= hi.y + 1e-9 && p.z <= hi.z + 1e-9);
    }

    #[test]
    fn adding_a_constant_to_activations_changes_nothing(c in cloud(10), k in -50.0f64..50.0) {
        let mut shifted = c.clone();
        shifted.activations.iter_mut().for_each(|a| *a += k);
        let (p, q) = (aggregate(&c, &MaskConfig::default()).unwrap(), aggregate(&shifted, &MaskConfig::default()).unwrap());
        prop_assert!(p.distance(q) < 1e-10);
    }

    #[test]
    fn masked_points_do_not_move_the_result(c in cloud(8), junk in proptest::collection::vec(point(), 5)) {
        let mut with_masked = c.clone();
        for q in junk {
            with_masked.points.push(q * 1000.0);
            with_masked.activations.push(DEFAULT_EPSILON);
        }
        let (p, q) = (aggregate(&c, &MaskConfig::default()).unwrap(), aggregate(&with_masked, &MaskConfig::default()).unwrap());
        prop_assert!(p.distance(q) < 1e-9);
    }

    #[test]
    fn sparse_map_transpose_is_the_adjoint(
        rows in proptest::collection::vec(proptest::collection::vec((0usize..6, -2.0f64..2.0), 0..4), 1..8),
        x in proptest::collection::vec(-3.0f64..3.0, 6),
        seed in proptest::collection::vec(-3.0f64..3.0, 8),
    ) {
        let n_out = rows.len();
        let map = SparseMap::from_rows(6, rows);
        let y: Vec<f64> = seed[..n_out].to_vec();
        let mut ax = vec![0.0; n_out];
        map.apply(&x, &mut ax);
        let mut aty = vec![0.0; 6];
        map.apply_transpose(&y, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn coordinate_maps_are_mutually_inverse(
        flip in any::<bool>(), row in 0usize..8, col in 0usize..8, rot in -15.0f64..15.0,
        x in 0.0f64..24.0, y in 0.0f64..20.0,
    ) {
        let aug = ViewAugmentation {
            height: 20, width: 24, flip,
            crop: CropWindow { row, col, height: 12, width: 16 },
            rotation_deg: rot, jitter: ColorJitter::NONE,
        };
        let (ax, ay) = aug.original_to_augmented(x, y);
        let (ox, oy) = aug.augmented_to_original(ax, ay);
        prop_assert!((ox - x).abs() < 1e-9 && (oy - y).abs() < 1e-9);
    }

    #[test]
    fn flip_and_crop_invert_exactly_where_covered(
        flip in any::<bool>(), row in 0usize..8, col in 0usize..8,
        values in proptest::collection::vec(-5.0f64..5.0, 20 * 24),
    ) {
        let aug = ViewAugmentation {
            height: 20, width: 24, flip,
            crop: CropWindow { row, col, height: 12, width: 16 },
            rotation_deg: 0.0, jitter: ColorJitter::NONE,
        };
        let warped = apply_to_raster(&values, &aug, 0.0).unwrap();
        let back = invert_on_heatmap(&Heatmap::new(0, 0, 16, 12, warped).unwrap(), &aug, DEFAULT_EPSILON).unwrap();
        for y in 0..20 {
            for x in 0..24 {
                let sx = if flip { 23 - x } else { x };
                let inside = (col..col + 16).contains(&sx) && (row..row + 12).contains(&y);
                let got = back.at(x, y);
                if inside {
                    prop_assert_eq!(got, values[y * 24 + x]);
                } else {
                    prop_assert_eq!(got, DEFAULT_EPSILON);
                }
            }
        }
    }
}
