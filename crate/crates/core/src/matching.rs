//! Cross-view association of person boxes through their lifted 3D centres,
//! and the IoU protocol that scores an association against annotations.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Point3};
use crate::heatmap::{BoundingBox, DepthImage};

/// Distance threshold for combining boxes, in meters.
pub const DEFAULT_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { threshold: DEFAULT_THRESHOLD }
    }
}

/// Position of a box in the per-view input lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BoxRef {
    pub view: usize,
    pub index: usize,
}

/// Boxes hypothesised to show the same person, at most one per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxCombination {
    pub members: Vec<BoxRef>,
    /// Lifted centres in the shared frame; `None` for an unliftable singleton.
    pub centres: Vec<Option<Point3>>,
    /// Mean pairwise centre distance in meters; 0 for singletons.
    pub mean_distance: f64,
}

impl BoxCombination {
    pub fn member_in_view(&self, view: usize) -> Option<BoxRef> {
        self.members.iter().copied().find(|m| m.view == view)
    }
}

/// Lifts the box centre pixel through its depth, falling back to the median
/// of the known depths inside the box when the centre depth is unknown.
/// Returns `None` when the box holds no known depth at all.
pub fn lift_box_center(bbox: &BoundingBox, depth: &DepthImage, camera: &Camera) -> Option<Point3> {
    let cx = ((bbox.x_min + bbox.x_max) as f64 / 2.0).round() as usize;
    let cy = ((bbox.y_min + bbox.y_max) as f64 / 2.0).round() as usize;
    let (cx, cy) = (cx.min(bbox.x_max - 1).min(depth.width - 1), cy.min(bbox.y_max - 1).min(depth.height - 1));
    let mut d = depth.at(cx, cy);
    if d <= 0.0 {
        let mut known: Vec<f64> = (bbox.y_min..bbox.y_max.min(depth.height))
            .flat_map(|y| (bbox.x_min..bbox.x_max.min(depth.width)).map(move |x| (x, y)))
            .map(|(x, y)| depth.at(x, y))
            .filter(|v| *v > 0.0)
            .collect();
        if known.is_empty() {
            return None;
        }
        known.sort_by(f64::total_cmp);
        d = known[(known.len() - 1) / 2];
    }
    Some(camera.to_reference_frame(camera.backproject(cx as f64, cy as f64, d)))
}

fn mean_pairwise(points: &[Point3]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut n = 0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i].distance(points[j]);
            sum += d;
            max = max.max(d);
            n += 1;
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, max)
}

/// Candidate ordering: ascending mean distance, ties by member indices.
pub fn candidate_order(a: &BoxCombination, b: &BoxCombination) -> Ordering {
    a.mean_distance.total_cmp(&b.mean_distance).then_with(|| a.members.cmp(&b.members))
}

fn enumerate(centres: &[Vec<Option<Point3>>], size: usize, threshold: f64) -> Vec<BoxCombination> {
    let views = centres.len();
    let mut out = Vec::new();
    let mut view_sets: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    fn rec(views: usize, size: usize, start: usize, stack: &mut Vec<usize>, sets: &mut Vec<Vec<usize>>) {
        if stack.len() == size {
            sets.push(stack.clone());
            return;
        }
        for v in start..views {
            stack.push(v);
            rec(views, size, v + 1, stack, sets);
            stack.pop();
        }
    }
    rec(views, size, 0, &mut stack, &mut view_sets);
    for vs in view_sets {
        let mut idx = vec![0usize; size];
        'outer: loop {
            if vs.iter().zip(&idx).all(|(v, i)| *i < centres[*v].len()) {
                let members: Vec<BoxRef> = vs.iter().zip(&idx).map(|(v, i)| BoxRef { view: *v, index: *i }).collect();
                let pts: Option<Vec<Point3>> = members.iter().map(|m| centres[m.view][m.index]).collect();
                if let Some(pts) = pts {
                    let (mean, max) = mean_pairwise(&pts);
                    if max <= threshold {
                        out.push(BoxCombination {
                            members,
                            centres: pts.into_iter().map(Some).collect(),
                            mean_distance: mean,
                        });
                    }
                }
            }
            // odometer increment
            for k in (0..size).rev() {
                idx[k] += 1;
                if idx[k] < centres[vs[k]].len() {
                    continue 'outer;
                }
                idx[k] = 0;
            }
            break;
        }
    }
    out
}

/// Greedy selection over lifted centres (`None` = unliftable). Valid triples
/// are taken first by ascending mean distance, then valid pairs, skipping any
/// combination that reuses a box; every remaining box becomes a singleton.
pub fn select_combinations(centres: &[Vec<Option<Point3>>], threshold: f64) -> Vec<BoxCombination> {
    let mut used: Vec<Vec<bool>> = centres.iter().map(|v| vec![false; v.len()]).collect();
    let mut out = Vec::new();
    for size in [3, 2] {
        let mut candidates = enumerate(centres, size, threshold);
        candidates.sort_by(candidate_order);
        for c in candidates {
            if c.members.iter().all(|m| !used[m.view][m.index]) {
                c.members.iter().for_each(|m| used[m.view][m.index] = true);
                out.push(c);
            }
        }
    }
    for (view, boxes) in centres.iter().enumerate() {
        for (index, centre) in boxes.iter().enumerate() {
            if !used[view][index] {
                out.push(BoxCombination { members: vec![BoxRef { view, index }], centres: vec![*centre], mean_distance: 0.0 });
            }
        }
    }
    out
}

/// Lifts every box centre and associates boxes across views.
/// `boxes[v]`, `depths[v]` and `cameras[v]` all describe view `v`.
pub fn match_boxes(
    boxes: &[Vec<BoundingBox>],
    depths: &[DepthImage],
    cameras: &[Camera],
    cfg: &MatchConfig,
) -> Vec<BoxCombination> {
    let centres: Vec<Vec<Option<Point3>>> = boxes
        .iter()
        .enumerate()
        .map(|(v, bs)| bs.iter().map(|b| lift_box_center(b, &depths[v], &cameras[v])).collect())
        .collect();
    select_combinations(&centres, cfg.threshold)
}

/// For every annotated person (`annotated[p][v]` = box in view `v`, if any),
/// the best mean IoU over `views` views achieved by any combination. A view
/// where either side has no box scores 0.
pub fn evaluate_matching(
    combinations: &[BoxCombination],
    boxes: &[Vec<BoundingBox>],
    annotated: &[Vec<Option<BoundingBox>>],
    views: usize,
) -> Vec<f64> {
    annotated
        .iter()
        .map(|person| {
            combinations
                .iter()
                .map(|c| {
                    (0..views)
                        .map(|v| match (person.get(v).copied().flatten(), c.member_in_view(v)) {
                            (Some(a), Some(m)) => a.iou(&boxes[m.view][m.index]),
                            _ => 0.0,
                        })
                        .sum::<f64>()
                        / views as f64
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;

    fn p(x: f64, y: f64, z: f64) -> Option<Point3> {
        Some(Point3::new(x, y, z))
    }

    #[test]
    fn default_threshold_is_75cm() {
        assert_eq!(MatchConfig::default().threshold, 0.75);
    }

    #[test]
    fn coincident_centres_form_one_triple() {
        let c = vec![vec![p(1.0, 0.0, 3.0)], vec![p(1.0, 0.0, 3.0)], vec![p(1.0, 0.0, 3.0)]];
        let out = select_combinations(&c, 0.75);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].members.len(), 3);
        assert_eq!(out[0].mean_distance, 0.0);
    }

    #[test]
    fn distant_boxes_stay_single() {
        let c = vec![vec![p(0.0, 0.0, 3.0)], vec![p(0.8, 0.0, 3.0)]];
        let out = select_combinations(&c, 0.75);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn triple_preferred_over_tighter_pair() {
        // pair (v0,v1) at 0.1 m; triple with (v2) has mean 0.3 m
        let c = vec![vec![p(0.0, 0.0, 0.0)], vec![p(0.1, 0.0, 0.0)], vec![p(0.05, 0.39686, 0.0)]];
        let out = select_combinations(&c, 0.75);
        assert_eq!(out.len(), 1);
        assert!((out[0].mean_distance - 0.3).abs() < 1e-4, "{}", out[0].mean_distance);
        let pair = select_combinations(&c[..2], 0.75);
        assert!((pair[0].mean_distance - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unliftable_is_forced_singleton() {
        let c = vec![vec![None], vec![p(0.0, 0.0, 0.0)]];
        let out = select_combinations(&c, 0.75);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn lift_centre_and_median_fallback() {
        let cam = Camera::new(0, (10.0, 10.0), (4.0, 3.0), (9, 7), RigidTransform::IDENTITY).unwrap();
        let b = BoundingBox::new(0, 0, (3, 2), (5, 4), (9, 7)).unwrap();
        let d = DepthImage::new(0, 9, 7, vec![2.0; 63]).unwrap();
        assert_eq!(lift_box_center(&b, &d, &cam), p(0.0, 0.0, 2.0));
        let mut holes = d.clone();
        holes.values[3 * 9 + 4] = 0.0;
        assert_eq!(lift_box_center(&b, &holes, &cam), p(0.0, 0.0, 2.0));
        let empty = DepthImage::new(0, 9, 7, vec![0.0; 63]).unwrap();
        assert_eq!(lift_box_center(&b, &empty, &cam), None);
    }

    #[test]
    fn iou_protocol() {
        let bb = |view, x0, x1| BoundingBox { view, person: 0, x_min: x0, y_min: 0, x_max: x1, y_max: 4 };
        let boxes = vec![vec![bb(0, 0, 4)], vec![bb(1, 0, 4)], vec![bb(2, 2, 6)]];
        let ann = vec![vec![Some(bb(0, 0, 4)), Some(bb(1, 0, 4)), Some(bb(2, 0, 4))]];
        let triple = BoxCombination {
            members: vec![BoxRef { view: 0, index: 0 }, BoxRef { view: 1, index: 0 }, BoxRef { view: 2, index: 0 }],
            centres: vec![None; 3],
            mean_distance: 0.0,
        };
        // half-overlap: intersection 8, union 24
        let score = evaluate_matching(&[triple.clone()], &boxes, &ann, 3)[0];
        assert!((score - (1.0 + 1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);

        let single = BoxCombination { members: vec![BoxRef { view: 0, index: 0 }], centres: vec![None], mean_distance: 0.0 };
        assert!((evaluate_matching(&[single], &boxes, &ann, 3)[0] - 1.0 / 3.0).abs() < 1e-15);

        let perfect = vec![vec![bb(0, 0, 4)], vec![bb(1, 0, 4)], vec![bb(2, 0, 4)]];
        assert_eq!(evaluate_matching(&[triple], &perfect, &ann, 3)[0], 1.0);
    }
}
