#![allow(dead_code)]

use posefuse::geometry::Point3;
use posefuse::matching::{BoxCombination, BoxRef};
use rand::Rng;

/// Reference implementation of the selection rule, written independently of
/// the library: enumerate subsets of the flat box list by bitmask.
pub fn brute_force_select(centres: &[Vec<Option<Point3>>], threshold: f64) -> Vec<(Vec<BoxRef>, f64)> {
    let flat: Vec<(BoxRef, Option<Point3>)> = centres
        .iter()
        .enumerate()
        .flat_map(|(v, bs)| bs.iter().enumerate().map(move |(i, c)| (BoxRef { view: v, index: i }, *c)))
        .collect();
    let n = flat.len();
    let mut chosen: Vec<(Vec<BoxRef>, f64)> = Vec::new();
    let mut taken = vec![false; n];
    for size in [3usize, 2] {
        let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let mut views: Vec<usize> = idx.iter().map(|i| flat[*i].0.view).collect();
            views.sort();
            views.dedup();
            if views.len() != size || idx.iter().any(|i| flat[*i].1.is_none()) {
                continue;
            }
            let pts: Vec<Point3> = idx.iter().map(|i| flat[*i].1.unwrap()).collect();
            let mut dists = Vec::new();
            for a in 0..pts.len() {
                for b in a + 1..pts.len() {
                    dists.push(pts[a].distance(pts[b]));
                }
            }
            if dists.iter().any(|d| *d > threshold) {
                continue;
            }
            candidates.push((idx, dists.iter().sum::<f64>() / dists.len() as f64));
        }
        candidates.sort_by(|a, b| {
            let ka: Vec<BoxRef> = a.0.iter().map(|i| flat[*i].0).collect();
            let kb: Vec<BoxRef> = b.0.iter().map(|i| flat[*i].0).collect();
            a.1.total_cmp(&b.1).then(ka.cmp(&kb))
        });
        for (idx, mean) in candidates {
            if idx.iter().all(|i| !taken[*i]) {
                idx.iter().for_each(|i| taken[*i] = true);
                chosen.push((idx.iter().map(|i| flat[*i].0).collect(), mean));
            }
        }
    }
    for (i, (r, _)) in flat.iter().enumerate() {
        if !taken[i] {
            chosen.push((vec![*r], 0.0));
        }
    }
    chosen
}

/// Random lifted centres for up to 3 views × 4 boxes. Centres are drawn on
/// a coarse grid part of the time so that ties in mean distance occur, and
/// occasionally a box is unliftable.
pub fn random_centres(rng: &mut impl Rng) -> Vec<Vec<Option<Point3>>> {
    let views = rng.gen_range(1..=3);
    let grid = rng.gen_bool(0.3);
    (0..views)
        .map(|_| {
            let boxes = rng.gen_range(0..=4);
            (0..boxes)
                .map(|_| {
                    if rng.gen_bool(0.05) {
                        return None;
                    }
                    let mut c = || {
                        if grid {
                            rng.gen_range(0..4) as f64 * 0.25
                        } else {
                            rng.gen_range(0.0..1.6)
                        }
                    };
                    Some(Point3::new(c(), c(), c()))
                })
                .collect()
        })
        .collect()
}

pub fn summary(c: &[BoxCombination]) -> Vec<(Vec<BoxRef>, f64)> {
    c.iter().map(|c| (c.members.clone(), c.mean_distance)).collect()
}

/// Partition property: every box appears in exactly one combination.
pub fn is_partition(centres: &[Vec<Option<Point3>>], combos: &[BoxCombination]) -> bool {
    let mut seen: Vec<Vec<usize>> = centres.iter().map(|v| vec![0; v.len()]).collect();
    for c in combos {
        for m in &c.members {
            seen[m.view][m.index] += 1;
        }
        let mut views: Vec<usize> = c.members.iter().map(|m| m.view).collect();
        views.dedup();
        if views.len() != c.members.len() {
            return false;
        }
    }
    seen.iter().flatten().all(|n| *n == 1)
}

pub fn respects_threshold(combos: &[BoxCombination], threshold: f64) -> bool {
    combos.iter().filter(|c| c.members.len() > 1).all(|c| {
        let pts: Vec<Point3> = c.centres.iter().map(|p| p.unwrap()).collect();
        pts.iter().enumerate().all(|(i, a)| pts[i + 1..].iter().all(|b| a.distance(*b) <= threshold))
    })
}
