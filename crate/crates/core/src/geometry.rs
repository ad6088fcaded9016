//! Core types and exact projective operations.
//!
//! Poses are camera-to-world: a camera-frame point `x_cam` maps to the world
//! as `R * x_cam + t`, so `t` is the camera center. Cameras look down +z with
//! x to the right and y down in the image.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `R * R^T - I` for a matrix to count as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::invalid("principal point must lie inside the image"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Maps a pixel to normalized image coordinates `K^-1 [u, v, 1]^T`.
    pub fn normalize(&self, px: &Pixel) -> Vec3 {
        Vec3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }

    pub fn denormalize(&self, x: f64, y: f64) -> Pixel {
        Pixel::new(self.fx * x + self.cx, self.fy * y + self.cy)
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds a pose without validation. Callers guarantee orthonormality.
    pub fn from_parts(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_rotation(&self.rotation) {
            return Err(Error::invalid("pose rotation is not a proper rotation"));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("pose translation is not finite"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// World point to camera frame: `R^T (p - t)`.
    pub fn world_to_camera(&self, point: &Vec3) -> Vec3 {
        self.rotation.transpose() * (point - self.translation)
    }

    pub fn transform_point(&self, point: &Vec3) -> Vec3 {
        self.rotation * point + self.translation
    }

    pub fn inverse(&self) -> Pose {
        pose_inverse(self)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        pose_compose(self, other)
    }
}

/// Similarity transform `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("similarity scale must be positive"));
        }
        if !is_rotation(&rotation) {
            return Err(Error::invalid(
                "similarity rotation is not a proper rotation",
            ));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Sim3 {
        let rt = self.rotation.transpose();
        Sim3 {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "SFM")]
    Sfm,
    #[serde(rename = "PNP")]
    Pnp,
    #[serde(rename = "HYBRID-SFM")]
    HybridSfm,
    #[serde(rename = "HYBRID-PNP")]
    HybridPnp,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Sfm => "SFM",
            Provenance::Pnp => "PNP",
            Provenance::HybridSfm => "HYBRID-SFM",
            Provenance::HybridPnp => "HYBRID-PNP",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SFM" => Ok(Provenance::Sfm),
            "PNP" => Ok(Provenance::Pnp),
            "HYBRID-SFM" => Ok(Provenance::HybridSfm),
            "HYBRID-PNP" => Ok(Provenance::HybridPnp),
            other => Err(Error::invalid(format!("unknown provenance '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEntry {
    pub pose: Pose,
    pub provenance: Provenance,
}

/// Partial map from frame index to pose. Frames whose pose estimation failed
/// are simply absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseTable {
    entries: BTreeMap<usize, PoseEntry>,
}

impl PoseTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame: usize, pose: Pose, provenance: Provenance) {
        self.entries.insert(frame, PoseEntry { pose, provenance });
    }

    pub fn remove(&mut self, frame: usize) -> Option<PoseEntry> {
        self.entries.remove(&frame)
    }

    pub fn get(&self, frame: usize) -> Option<&PoseEntry> {
        self.entries.get(&frame)
    }

    pub fn pose(&self, frame: usize) -> Option<&Pose> {
        self.entries.get(&frame).map(|e| &e.pose)
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.entries.contains_key(&frame)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Frame indices in increasing order.
    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &PoseEntry)> + '_ {
        self.entries.iter().map(|(f, e)| (*f, e))
    }

    pub fn count_provenance(&self, provenance: Provenance) -> usize {
        self.entries
            .values()
            .filter(|e| e.provenance == provenance)
            .count()
    }

    /// Checks that every frame index lies in `[0, frame_count)` and every pose is valid.
    pub fn validate(&self, frame_count: usize) -> Result<()> {
        for (frame, entry) in &self.entries {
            if *frame >= frame_count {
                return Err(Error::invalid(format!(
                    "frame {frame} outside [0, {frame_count})"
                )));
            }
            entry.pose.validate()?;
        }
        Ok(())
    }
}

impl FromIterator<(usize, Pose, Provenance)> for PoseTable {
    fn from_iter<I: IntoIterator<Item = (usize, Pose, Provenance)>>(iter: I) -> Self {
        let mut t = PoseTable::new();
        for (f, p, prov) in iter {
            t.insert(f, p, prov);
        }
        t
    }
}

/// Projects a world point. Returns `None` when the point is not strictly in front
/// of the camera.
pub fn project(point: &Vec3, pose: &Pose, k: &Intrinsics) -> Option<(Pixel, f64)> {
    let xc = pose.world_to_camera(point);
    if xc.z <= 0.0 {
        return None;
    }
    Some((k.denormalize(xc.x / xc.z, xc.y / xc.z), xc.z))
}

/// Lifts a pixel with known depth to a world point: `R (d K^-1 [u, v, 1]^T) + t`.
pub fn backproject(px: &Pixel, depth: f64, k: &Intrinsics, pose: &Pose) -> Result<Vec3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::invalid(format!(
            "depth must be positive, got {depth}"
        )));
    }
    let ray = k.normalize(px) * depth;
    Ok(pose.rotation * ray + pose.translation)
}

pub fn pose_inverse(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose::from_parts(rt, -(rt * p.translation))
}

/// `a * b` as 4x4 rigid transforms.
pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose::from_parts(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

pub fn apply_sim3(s: &Sim3, p: &Pose) -> Pose {
    Pose::from_parts(
        s.rotation * p.rotation,
        s.scale * (s.rotation * p.translation) + s.translation,
    )
}

/// Geodesic angle between two rotations, in `[0, pi]`.
///
/// Equals `acos((trace(a^T b) - 1) / 2)`; evaluated through `atan2` of the
/// sine and cosine parts so small angles keep full precision.
pub fn rotation_angle(a: &Mat3, b: &Mat3) -> f64 {
    let m = a.transpose() * b;
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = 0.5
        * Vec3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        )
        .norm();
    sin.atan2(cos)
}

pub fn is_rotation(r: &Mat3) -> bool {
    r.iter().all(|x| x.is_finite())
        && (r * r.transpose() - Mat3::identity()).amax() <= ROTATION_TOLERANCE
        && r.determinant() > 0.0
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of the axis-angle vector `w`.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    Rotation3::from_scaled_axis(*w).into_inner()
}

/// Closest proper rotation in Frobenius norm.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Right singular vector for the smallest singular value of `a`, together with
/// the singular values sorted in decreasing order. Short matrices are padded
/// with zero rows so the full null space is available.
pub(crate) fn smallest_right_singular(a: &DMatrix<f64>) -> (DVector<f64>, Vec<f64>) {
    let cols = a.ncols();
    let padded;
    let a = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
        padded = p;
        &padded
    } else {
        a
    };
    let svd = SVD::new(a.clone(), false, true);
    let vt = svd.v_t.expect("svd v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sorted: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let last = *order.last().expect("non-empty");
    (vt.row(last).transpose(), sorted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_k() -> Intrinsics {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 1,
            height: 1,
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let w = Vec3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        let t = Vec3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        Pose::from_parts(exp_so3(&w), t)
    }

    #[test]
    fn project_identity() {
        let (px, d) = project(&Vec3::new(0.0, 0.0, 1.0), &Pose::identity(), &unit_k()).unwrap();
        assert_eq!((px.u, px.v, d), (0.0, 0.0, 1.0));
        assert!(project(&Vec3::new(0.0, 0.0, -1.0), &Pose::identity(), &unit_k()).is_none());
        assert!(project(&Vec3::new(1.0, 0.0, 0.0), &Pose::identity(), &unit_k()).is_none());
    }

    #[test]
    fn backproject_hand_examples() {
        let p = backproject(&Pixel::new(0.0, 0.0), 1.0, &unit_k(), &Pose::identity()).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 1.0));
        let pose = Pose::from_parts(Mat3::identity(), Vec3::new(1.0, 0.0, 0.0));
        let p = backproject(&Pixel::new(1.0, 1.0), 2.0, &unit_k(), &pose).unwrap();
        assert_eq!(p, Vec3::new(3.0, 2.0, 2.0));
    }

    #[test]
    fn backproject_rejects_non_positive_depth() {
        for d in [0.0, -1.0, f64::NAN] {
            let r = backproject(&Pixel::new(0.0, 0.0), d, &unit_k(), &Pose::identity());
            assert!(matches!(r, Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn backproject_is_linear_in_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Intrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap();
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let px = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let d = rng.random_range(0.1..10.0);
            let a = backproject(&px, d, &k, &pose).unwrap() - pose.translation;
            let b = backproject(&px, 2.0 * d, &k, &pose).unwrap() - pose.translation;
            assert_relative_eq!(b, 2.0 * a, epsilon = 1e-12, max_relative = 1e-14);
        }
    }

    #[test]
    fn group_laws() {
        let id = pose_inverse(&Pose::identity());
        assert_eq!(id, Pose::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (a, b, c) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let e = pose_compose(&a, &pose_inverse(&a));
            assert!((e.rotation - Mat3::identity()).amax() < 1e-12);
            assert!(e.translation.amax() < 1e-12);
            let l = pose_compose(&pose_compose(&a, &b), &c);
            let r = pose_compose(&a, &pose_compose(&b, &c));
            assert!((l.rotation - r.rotation).amax() < 1e-12);
            assert!((l.translation - r.translation).amax() < 1e-12);
            assert!(l.validate().is_ok());
            assert!(pose_inverse(&l).validate().is_ok());
        }
    }

    #[test]
    fn sim3_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng);
        assert_eq!(apply_sim3(&Sim3::identity(), &p), p);

        let q = random_pose(&mut rng);
        let s = Sim3::new(2.0, Mat3::identity(), Vec3::new(1.0, -2.0, 0.5)).unwrap();
        let d0 = (p.center() - q.center()).norm();
        let d1 = (apply_sim3(&s, &p).center() - apply_sim3(&s, &q).center()).norm();
        assert_relative_eq!(d1, 2.0 * d0, max_relative = 1e-14);

        for _ in 0..100 {
            let r = random_pose(&mut rng);
            let s = Sim3::new(rng.random_range(0.1..10.0), r.rotation, r.translation).unwrap();
            let p = random_pose(&mut rng);
            let moved = apply_sim3(&s, &p);
            assert!(moved.validate().is_ok());
            let back = apply_sim3(&s.inverse(), &moved);
            assert!((back.rotation - p.rotation).amax() < 1e-9);
            assert!((back.translation - p.translation).amax() < 1e-9);
            // camera centers move as points
            assert!((moved.center() - s.transform_point(&p.center())).amax() < 1e-12);
        }
    }

    #[test]
    fn rotation_angle_cases() {
        let rz = exp_so3(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert_eq!(rotation_angle(&Mat3::identity(), &Mat3::identity()), 0.0);
        assert_relative_eq!(
            rotation_angle(&rz, &Mat3::identity()),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let a = random_pose(&mut rng).rotation;
            let b = random_pose(&mut rng).rotation;
            let c = random_pose(&mut rng).rotation;
            let ab = rotation_angle(&a, &b);
            assert!((ab - rotation_angle(&b, &a)).abs() < 1e-9);
            assert!(ab <= rotation_angle(&a, &c) + rotation_angle(&c, &b) + 1e-9);
            assert!((0.0..=std::f64::consts::PI).contains(&ab));
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn pose_table_validation() {
        let mut t = PoseTable::new();
        t.insert(3, Pose::identity(), Provenance::Sfm);
        assert!(t.validate(4).is_ok());
        assert!(t.validate(3).is_err());
        t.insert(
            0,
            Pose::from_parts(Mat3::identity() * 2.0, Vec3::zeros()),
            Provenance::Pnp,
        );
        assert!(t.validate(4).is_err());
        assert_eq!(t.frames().collect::<Vec<_>>(), vec![0, 3]);
    }

    #[test]
    fn nearest_rotation_projects() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_pose(&mut rng).rotation;
        let noisy = r * 3.0 + Mat3::from_fn(|_, _| rng.random_range(-1e-3..1e-3));
        let n = nearest_rotation(&noisy);
        assert!(is_rotation(&n));
        assert!(rotation_angle(&n, &r) < 1e-3);
    }
}
