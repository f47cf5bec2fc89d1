use posefuse_web::{fuse_json, match_json, scene_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn scene_images_have_rgba_pixels() {
    let v = parse(scene_json(7).unwrap());
    let (w, h) = (v["width"].as_u64().unwrap(), v["height"].as_u64().unwrap());
    let views = v["views"].as_array().unwrap();
    assert_eq!(views.len(), 3);
    for view in views {
        assert_eq!(view["rgba"].as_array().unwrap().len() as u64, 4 * w * h);
    }
    assert_eq!(scene_json(7).unwrap(), scene_json(7).unwrap());
}

#[test]
fn flatter_heatmaps_fuse_worse() {
    let err = |peak: f64| parse(fuse_json(7, 1.0, peak).unwrap())["mean_error_cm"].as_f64().unwrap();
    let sharp = err(1000.0);
    let flat = err(1.0);
    assert!(sharp < flat, "sharp {sharp} flat {flat}");
    assert!(fuse_json(7, 0.0, 10.0).is_err());
}

#[test]
fn matching_groups_cover_every_box_once() {
    let scene = parse(scene_json(11).unwrap());
    let total: usize = scene["views"].as_array().unwrap().iter().map(|v| v["boxes"].as_array().unwrap().len()).sum();
    for t in [0.1, 0.75, 2.0] {
        let m = parse(match_json(11, t).unwrap());
        let covered: usize = m["groups"].as_array().unwrap().iter().map(|g| g["boxes"].as_array().unwrap().len()).sum();
        assert_eq!(covered, total);
        assert_eq!(m["person_iou"].as_array().unwrap().len() as u64, scene["persons"].as_u64().unwrap());
    }
    assert!(match_json(11, -1.0).is_err());
}
