//! Pinhole cameras, back-projection and rigid transforms into the shared
//! reference frame (the frame of camera 0).
//!
//! Pixel coordinates use `x` = column, `y` = row with the origin at the centre
//! of the top-left pixel. Depth is the camera-frame `z` coordinate in meters.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating the rotation block of a rigid transform.
pub const RIGIDITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("pixel ({x}, {y}) outside a {width}x{height} image")]
    OutOfBounds { x: i64, y: i64, width: usize, height: usize },
    #[error("invariant `{0}` violated")]
    Invariant(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn normalized(self) -> Point3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Homogeneous 4x4 rigid transform, row-major, translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    m: [[f64; 4]; 4],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        m: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    };

    /// Validates the matrix: finite entries, bottom row `(0,0,0,1)`, an
    /// orthonormal rotation block with determinant +1.
    pub fn new(m: [[f64; 4]; 4]) -> Result<Self, GeometryError> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::Invariant("rigid transform entries finite"));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::Invariant("rigid transform bottom row is (0,0,0,1)"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() >= RIGIDITY_TOLERANCE {
                    return Err(GeometryError::Invariant("rotation block orthonormal"));
                }
            }
        }
        let t = RigidTransform { m };
        if t.rotation_determinant() <= 0.0 {
            return Err(GeometryError::Invariant("rotation determinant +1"));
        }
        Ok(t)
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self, GeometryError> {
        if values.len() != 16 {
            return Err(GeometryError::InvalidInput(format!(
                "expected 16 matrix entries, got {}",
                values.len()
            )));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, v) in values.iter().enumerate() {
            m[i / 4][i % 4] = *v;
        }
        Self::new(m)
    }

    /// Builds a transform from a rotation matrix and translation. The rotation
    /// is re-validated.
    pub fn from_rotation_translation(r: [[f64; 3]; 3], t: Point3) -> Result<Self, GeometryError> {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
        }
        m[0][3] = t.x;
        m[1][3] = t.y;
        m[2][3] = t.z;
        m[3][3] = 1.0;
        Self::new(m)
    }

    pub fn translation(t: Point3) -> Self {
        let mut out = Self::IDENTITY;
        out.m[0][3] = t.x;
        out.m[1][3] = t.y;
        out.m[2][3] = t.z;
        out
    }

    /// Rotation of `angle` radians about a unit `axis` (Rodrigues).
    pub fn rotation(axis: Point3, angle: f64) -> Self {
        let k = axis.normalized();
        let (s, c) = angle.sin_cos();
        let v = 1.0 - c;
        let r = [
            [c + k.x * k.x * v, k.x * k.y * v - k.z * s, k.x * k.z * v + k.y * s],
            [k.y * k.x * v + k.z * s, c + k.y * k.y * v, k.y * k.z * v - k.x * s],
            [k.z * k.x * v - k.y * s, k.z * k.y * v + k.x * s, c + k.z * k.z * v],
        ];
        let mut out = Self::IDENTITY;
        for i in 0..3 {
            out.m[i][..3].copy_from_slice(&r[i]);
        }
        out
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`, with the
    /// camera `y` axis pointing along `-up` (image rows grow downwards).
    pub fn look_at(eye: Point3, target: Point3, up: Point3) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalized();
        let right = forward.cross(up).normalized();
        let down = forward.cross(right);
        let r = [
            [right.x, down.x, forward.x],
            [right.y, down.y, forward.y],
            [right.z, down.z, forward.z],
        ];
        Self::from_rotation_translation(r, eye)
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.m.iter().flatten().copied().collect()
    }

    pub fn translation_part(&self) -> Point3 {
        Point3::new(self.m[0][3], self.m[1][3], self.m[2][3])
    }

    fn rotation_determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        RigidTransform { m }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Largest absolute entry-wise deviation from another transform.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Homogeneous multiply `[x y z 1]ᵀ ↦ T·[x y z 1]ᵀ`.
pub fn transform_point(point: Point3, t: &RigidTransform) -> Point3 {
    let m = &t.m;
    Point3::new(
        m[0][0] * point.x + m[0][1] * point.y + m[0][2] * point.z + m[0][3],
        m[1][0] * point.x + m[1][1] * point.y + m[1][2] * point.z + m[1][3],
        m[2][0] * point.x + m[2][1] * point.y + m[2][2] * point.z + m[2][3],
    )
}

/// Closed-form inverse `[Rᵀ | −Rᵀt]`.
pub fn invert_transform(t: &RigidTransform) -> RigidTransform {
    let m = &t.m;
    let mut out = RigidTransform::IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            out.m[i][j] = m[j][i];
        }
    }
    for i in 0..3 {
        out.m[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    out
}

/// Calibrated pinhole camera. `to_reference` maps this camera's frame into
/// the shared frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub to_reference: RigidTransform,
}

impl Camera {
    pub fn new(
        id: usize,
        (fx, fy): (f64, f64),
        (cx, cy): (f64, f64),
        (width, height): (usize, usize),
        to_reference: RigidTransform,
    ) -> Result<Self, GeometryError> {
        let cam = Camera { id, fx, fy, cx, cy, width, height, to_reference };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::Invariant("focal lengths positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::Invariant("principal point finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::Invariant("image size positive"));
        }
        RigidTransform::new(self.to_reference.m)?;
        if self.id == 0 && !self.to_reference.is_identity() {
            return Err(GeometryError::Invariant("camera 0 to_reference is identity"));
        }
        Ok(())
    }

    /// Back-projection `(d·(x−cx)/fx, d·(y−cy)/fy, d)` in the camera frame,
    /// evaluated for continuous pixel coordinates.
    pub fn backproject(&self, x: f64, y: f64, depth: f64) -> Point3 {
        Point3::new(depth * (x - self.cx) / self.fx, depth * (y - self.cy) / self.fy, depth)
    }

    pub fn to_reference_frame(&self, point: Point3) -> Point3 {
        transform_point(point, &self.to_reference)
    }

    /// Camera centre in the shared frame.
    pub fn centre(&self) -> Point3 {
        self.to_reference.translation_part()
    }
}

/// Lifts an integer pixel with its depth into the camera's own frame.
pub fn backproject_pixel(
    (x, y): (i64, i64),
    depth: f64,
    camera: &Camera,
) -> Result<Point3, GeometryError> {
    if !depth.is_finite() || depth < 0.0 {
        return Err(GeometryError::InvalidInput(format!("depth must be finite and >= 0, got {depth}")));
    }
    if x < 0 || y < 0 || x as usize >= camera.width || y as usize >= camera.height {
        return Err(GeometryError::OutOfBounds { x, y, width: camera.width, height: camera.height });
    }
    Ok(camera.backproject(x as f64, y as f64, depth))
}

/// Forward pinhole projection of a camera-frame point to continuous pixels.
pub fn project_point(point: Point3, camera: &Camera) -> Result<(f64, f64), GeometryError> {
    if !(point.z > 0.0) {
        return Err(GeometryError::BehindCamera(point.z));
    }
    Ok((camera.fx * point.x / point.z + camera.cx, camera.fy * point.y / point.z + camera.cy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::new(0, (500.0, 500.0), (160.0, 120.0), (320, 240), RigidTransform::IDENTITY).unwrap()
    }

    fn random_rigid(rng: &mut impl Rng) -> RigidTransform {
        let axis = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let angle = rng.gen_range(-3.0..3.0);
        let t = Point3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        RigidTransform::translation(t).compose(&RigidTransform::rotation(axis, angle))
    }

    #[test]
    fn backproject_examples() {
        let c = cam();
        assert_eq!(backproject_pixel((160, 120), 2.0, &c).unwrap(), Point3::new(0.0, 0.0, 2.0));
        assert_eq!(backproject_pixel((17, 93), 0.0, &c).unwrap(), Point3::ORIGIN);
        let p = backproject_pixel((260, 120), 2.0, &c).unwrap();
        assert!((p.x - 0.4).abs() < 1e-15 && p.y == 0.0 && p.z == 2.0);
        assert!(matches!(backproject_pixel((1, 1), f64::NAN, &c), Err(GeometryError::InvalidInput(_))));
        assert!(matches!(backproject_pixel((320, 1), 1.0, &c), Err(GeometryError::OutOfBounds { .. })));
    }

    #[test]
    fn project_examples() {
        let c = cam();
        assert_eq!(project_point(Point3::new(0.0, 0.0, 3.0), &c).unwrap(), (160.0, 120.0));
        let (x, _) = project_point(Point3::new(0.4, 0.0, 2.0), &c).unwrap();
        assert!((x - 260.0).abs() < 1e-12);
        assert!(matches!(project_point(Point3::new(0.0, 0.0, 0.0), &c), Err(GeometryError::BehindCamera(_))));
        assert!(matches!(project_point(Point3::new(0.0, 0.0, -1.0), &c), Err(GeometryError::BehindCamera(_))));
    }

    #[test]
    fn project_backproject_round_trip() {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.5..5.0));
            let (x, y) = project_point(p, &c).unwrap();
            let q = c.backproject(x, y, p.z);
            assert!((p - q).to_array().iter().all(|e| e.abs() < 1e-9));
        }
    }

    #[test]
    fn transform_examples() {
        let p = Point3::new(0.3, -1.0, 2.0);
        assert_eq!(transform_point(p, &RigidTransform::IDENTITY), p);
        let t = RigidTransform::translation(Point3::new(1.0, 2.0, 3.0));
        assert_eq!(transform_point(Point3::ORIGIN, &t), Point3::new(1.0, 2.0, 3.0));
        let r = RigidTransform::rotation(Point3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let q = transform_point(Point3::new(1.0, 0.0, 0.0), &r);
        assert!((q - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(invert_transform(&RigidTransform::IDENTITY), RigidTransform::IDENTITY);
        let t = RigidTransform::translation(Point3::new(1.0, 2.0, 3.0));
        assert_eq!(invert_transform(&t), RigidTransform::translation(Point3::new(-1.0, -2.0, -3.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let t = random_rigid(&mut rng);
            RigidTransform::new(t.m).unwrap();
            assert!(t.compose(&invert_transform(&t)).max_abs_diff(&RigidTransform::IDENTITY) < 1e-12);
        }
    }

    #[test]
    fn composition_associative_and_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (a, b, c) = (random_rigid(&mut rng), random_rigid(&mut rng), random_rigid(&mut rng));
            assert!(a.compose(&b).compose(&c).max_abs_diff(&a.compose(&b.compose(&c))) < 1e-12);
            let pts: Vec<Point3> = (0..6)
                .map(|_| Point3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                .collect();
            let moved: Vec<Point3> = pts.iter().map(|p| transform_point(*p, &a)).collect();
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    assert!((pts[i].distance(pts[j]) - moved[i].distance(moved[j])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rejects_non_rigid() {
        let mut m = *RigidTransform::IDENTITY.matrix();
        m[0][0] = 1.1;
        assert_eq!(RigidTransform::new(m), Err(GeometryError::Invariant("rotation block orthonormal")));
        let mut m = *RigidTransform::IDENTITY.matrix();
        m[0][0] = -1.0;
        assert_eq!(RigidTransform::new(m), Err(GeometryError::Invariant("rotation determinant +1")));
        let mut m = *RigidTransform::IDENTITY.matrix();
        m[3][0] = 0.5;
        assert!(RigidTransform::new(m).is_err());
    }

    #[test]
    fn camera_zero_must_be_reference() {
        let t = RigidTransform::translation(Point3::new(1.0, 0.0, 0.0));
        assert!(Camera::new(0, (1.0, 1.0), (0.0, 0.0), (4, 4), t).is_err());
        assert!(Camera::new(1, (1.0, 1.0), (0.0, 0.0), (4, 4), t).is_ok());
        assert!(Camera::new(1, (0.0, 1.0), (0.0, 0.0), (4, 4), t).is_err());
    }

    #[test]
    fn look_at_is_rigid_and_points_forward() {
        let t = RigidTransform::look_at(Point3::new(3.0, 2.0, 0.0), Point3::new(0.0, 1.0, 0.0), Point3::new(0.0, 1.0, 0.0))
            .unwrap();
        let fwd = transform_point(Point3::new(0.0, 0.0, 1.0), &t) - t.translation_part();
        assert!((fwd - (Point3::new(-3.0, -1.0, 0.0)).normalized()).norm() < 1e-12);
        // image "down" has a negative world-up component
        let down = transform_point(Point3::new(0.0, 1.0, 0.0), &t) - t.translation_part();
        assert!(down.y < 0.0);
    }
}
