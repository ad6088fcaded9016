use nalgebra::{DMatrix, Matrix3x4};

use crate::error::{Error, Result};
use crate::geometry::{smallest_right_singular, Intrinsics, Pixel, Pose, Vec3};

/// World-to-camera projection matrix `[R^T | -R^T t]` of a camera-to-world pose.
pub(crate) fn extrinsic(pose: &Pose) -> Matrix3x4<f64> {
    let r_cw = pose.rotation.transpose();
    let t_cw = -(r_cw * pose.translation);
    let mut p = Matrix3x4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_cw);
    p.set_column(3, &t_cw);
    p
}

/// Linear triangulation from normalized image rays (z = 1).
pub(crate) fn triangulate_rays(
    pose_a: &Pose,
    ray_a: &Vec3,
    pose_b: &Pose,
    ray_b: &Vec3,
) -> Result<Vec3> {
    let baseline = (pose_a.center() - pose_b.center()).norm();
    if !(baseline > 1e-12) {
        return Err(Error::degenerate("cameras share the same center"));
    }
    let mut a = DMatrix::<f64>::zeros(4, 4);
    for (row, (p, r)) in [(extrinsic(pose_a), ray_a), (extrinsic(pose_b), ray_b)]
        .iter()
        .enumerate()
    {
        let x = p.row(0) - p.row(2) * r.x;
        let y = p.row(1) - p.row(2) * r.y;
        let xn = x.norm().max(f64::MIN_POSITIVE);
        let yn = y.norm().max(f64::MIN_POSITIVE);
        a.row_mut(2 * row).copy_from(&(x / xn));
        a.row_mut(2 * row + 1).copy_from(&(y / yn));
    }
    let (h, _) = smallest_right_singular(&a);
    let w = h[3];
    let xyz = Vec3::new(h[0], h[1], h[2]);
    if w.abs() <= 1e-12 * xyz.norm() || w == 0.0 {
        return Err(Error::degenerate("rays are parallel; point at infinity"));
    }
    Ok(xyz / w)
}

/// Linear (DLT) two-view triangulation minimizing the algebraic residual.
pub fn triangulate(
    pose_a: &Pose,
    pose_b: &Pose,
    k: &Intrinsics,
    px_a: &Pixel,
    px_b: &Pixel,
) -> Result<Vec3> {
    triangulate_rays(pose_a, &k.normalize(px_a), pose_b, &k.normalize(px_b))
}

/// Angle between the two viewing rays of `point`, in radians.
pub(crate) fn triangulation_angle(pose_a: &Pose, pose_b: &Pose, point: &Vec3) -> f64 {
    let da = point - pose_a.center();
    let db = point - pose_b.center();
    let c = da.dot(&db) / (da.norm() * db.norm());
    c.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, project, Mat3};

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn exact_two_view_point() {
        let a = Pose::identity();
        let b = Pose::from_parts(
            exp_so3(&Vec3::new(0.0, -0.1, 0.02)),
            Vec3::new(1.0, 0.1, 0.0),
        );
        let x = Vec3::new(1.0, 2.0, 5.0);
        let pa = project(&x, &a, &k()).unwrap().0;
        let pb = project(&x, &b, &k()).unwrap().0;
        let est = triangulate(&a, &b, &k(), &pa, &pb).unwrap();
        assert!((est - x).amax() < 1e-9);
        let ra = project(&est, &a, &k()).unwrap().0;
        let rb = project(&est, &b, &k()).unwrap().0;
        assert!(ra.distance(&pa) < 1e-7 && rb.distance(&pb) < 1e-7);
    }

    #[test]
    fn same_center_is_degenerate() {
        let a = Pose::identity();
        let b = Pose::from_parts(exp_so3(&Vec3::new(0.0, 0.1, 0.0)), Vec3::zeros());
        let px = Pixel::new(320.0, 240.0);
        assert!(matches!(
            triangulate(&a, &b, &k(), &px, &px),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let a = Pose::identity();
        let b = Pose::from_parts(Mat3::identity(), Vec3::new(1.0, 0.0, 0.0));
        let px = Pixel::new(320.0, 240.0);
        assert!(matches!(
            triangulate(&a, &b, &k(), &px, &px),
            Err(Error::DegenerateGeometry(_))
        ));
    }
}
