use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use super::triangulate::triangulate_rays;
use crate::error::{Error, Result};
use crate::geometry::{smallest_right_singular, Mat3, Pose, Vec3};

/// A correspondence in normalized camera coordinates (`K^-1` applied, z = 1).
///
/// The epipolar constraint is `b^T E a = 0` where camera b sees
/// `X_b = R X_a + t` and `E = [t]x R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub a: Vec3,
    pub b: Vec3,
}

impl PointPair {
    pub fn new(ax: f64, ay: f64, bx: f64, by: f64) -> Self {
        Self {
            a: Vec3::new(ax, ay, 1.0),
            b: Vec3::new(bx, by, 1.0),
        }
    }
}

fn normalizer(points: impl Iterator<Item = Vec3> + Clone) -> Mat3 {
    let n = points.clone().count() as f64;
    let c = points.clone().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mean = points.map(|p| (p.xy() - c.xy()).norm()).sum::<f64>() / n;
    let s = if mean > 0.0 { 2f64.sqrt() / mean } else { 1.0 };
    Mat3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Normalized 8-point estimate with the (1, 1, 0) singular value structure
/// enforced. The result has unit Frobenius norm; its sign is arbitrary.
pub fn estimate_essential(pairs: &[PointPair]) -> Result<Mat3> {
    if pairs.len() < 8 {
        return Err(Error::invalid(format!(
            "essential matrix needs at least 8 pairs, got {}",
            pairs.len()
        )));
    }
    let ta = normalizer(pairs.iter().map(|p| p.a));
    let tb = normalizer(pairs.iter().map(|p| p.b));
    let mut a = DMatrix::<f64>::zeros(pairs.len(), 9);
    for (i, p) in pairs.iter().enumerate() {
        let xa = ta * p.a;
        let xb = tb * p.b;
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = xb[r] * xa[c];
            }
        }
    }
    let (e, sv) = smallest_right_singular(&a);
    if sv[7] <= 1e-9 * sv[0] {
        return Err(Error::degenerate(
            "epipolar constraints leave a multi-dimensional null space (zero baseline?)",
        ));
    }
    let en = Matrix3::from_row_slice(e.as_slice());
    let e = tb.transpose() * en * ta;
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let e = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)) * vt;
    let norm = e.norm();
    if !(norm > 0.0) {
        return Err(Error::degenerate("essential matrix vanished"));
    }
    Ok(e / norm)
}

/// The four `(R, t)` factorizations of `E`, with `|t| = 1`.
pub(crate) fn essential_candidates(e: &Mat3) -> [(Mat3, Vec3); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.expect("u");
    let mut vt = svd.v_t.expect("v_t");
    // The zero singular value must sit in the last column.
    let sv = svd.singular_values;
    let min_idx = sv.imin();
    if min_idx != 2 {
        u.swap_columns(min_idx, 2);
        vt.swap_rows(min_idx, 2);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vec3 = u.column(2).into_owned().normalize();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Picks the factorization of `E` that places the majority of triangulated
/// pairs in front of both cameras.
///
/// Returns camera b's camera-to-world pose expressed in camera a's frame; its
/// center has unit norm.
pub fn decompose_essential(e: &Mat3, pairs: &[PointPair]) -> Result<Pose> {
    if pairs.is_empty() {
        return Err(Error::invalid("chirality test needs at least one pair"));
    }
    let a_pose = Pose::identity();
    let mut best: Option<(usize, Pose)> = None;
    for (r, t) in essential_candidates(e) {
        let r_wc = r.transpose();
        let b_pose = Pose::from_parts(r_wc, -(r_wc * t));
        let in_front = pairs
            .iter()
            .filter(|p| {
                triangulate_rays(&a_pose, &p.a, &b_pose, &p.b)
                    .is_ok_and(|x| x.z > 0.0 && b_pose.world_to_camera(&x).z > 0.0)
            })
            .count();
        if best.as_ref().is_none_or(|(n, _)| in_front > *n) {
            best = Some((in_front, b_pose));
        }
    }
    let (count, pose) = best.expect("four candidates");
    if 2 * count <= pairs.len() {
        return Err(Error::degenerate(format!(
            "no factorization puts a majority in front ({count}/{})",
            pairs.len()
        )));
    }
    Ok(pose)
}
