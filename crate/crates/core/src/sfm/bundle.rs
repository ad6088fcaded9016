//! Levenberg-Marquardt bundle adjustment with a Huber loss.
//!
//! Poses are parameterized camera-to-world as `R <- R exp(w)`, `c <- c + dc`.
//! The gauge is fixed by holding one frame constant and constraining a second
//! frame's center to a sphere around the first, which leaves two tangent
//! parameters for that center. Landmarks are eliminated with the Schur
//! complement so only the reduced camera system is factored.

use std::collections::BTreeMap;

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix3x2, Matrix6x3, Vector2, Vector3,
    Vector6,
};
use serde::{Deserialize, Serialize};

use super::{MapObservation, ReconstructionMap};
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, skew, Intrinsics, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaParams {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub convergence_threshold: f64,
    /// Huber transition in pixels.
    pub huber_delta: f64,
}

impl Default for BaParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.3,
            convergence_threshold: 1e-12,
            huber_delta: 2.0,
        }
    }
}

impl BaParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::invalid("BA max_iterations must be at least 1"));
        }
        let positive = [
            self.initial_lambda,
            self.lambda_up,
            self.lambda_down,
            self.convergence_threshold,
            self.huber_delta,
        ];
        if positive.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::invalid("BA parameters must be positive"));
        }
        if !(self.lambda_up > 1.0 && self.lambda_down < 1.0) {
            return Err(Error::invalid(
                "lambda_up must exceed 1 and lambda_down be below 1",
            ));
        }
        Ok(())
    }
}

/// `fixed` is held constant; `scale`'s distance to `fixed` is held constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gauge {
    pub fixed: usize,
    pub scale: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaResult {
    pub map: ReconstructionMap,
    /// Robust cost at the start followed by the cost after each accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BaResult {
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("non-empty trace")
    }
}

/// Applies `delta = [w; dc]` as `R exp(w)`, `c + dc`.
pub fn perturb_camera(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let w = Vec3::new(delta[0], delta[1], delta[2]);
    Pose::from_parts(
        pose.rotation * exp_so3(&w),
        pose.translation + Vec3::new(delta[3], delta[4], delta[5]),
    )
}

/// Projected pixel of `point` with Jacobians with respect to
/// [`perturb_camera`]'s delta and to the point. `None` behind the camera.
pub fn observation_jacobian(
    pose: &Pose,
    point: &Vec3,
    k: &Intrinsics,
) -> Option<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>)> {
    let rt = pose.rotation.transpose();
    let xc = rt * (point - pose.translation);
    if xc.z <= 0.0 {
        return None;
    }
    let iz = 1.0 / xc.z;
    let proj = Vector2::new(k.fx * xc.x * iz + k.cx, k.fy * xc.y * iz + k.cy);
    let dproj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    let mut jp = Matrix2x6::zeros();
    // xc' = exp(-w) xc  =>  d xc / dw = [xc]x
    jp.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dproj * skew(&xc)));
    jp.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dproj * (-rt)));
    let jx = dproj * rt;
    Some((proj, jp, jx))
}

fn huber(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        norm * norm
    } else {
        2.0 * delta * norm - delta * delta
    }
}

/// Huber-robustified reprojection cost. Infinite if any observed point sits
/// behind its camera.
pub fn robust_cost(map: &ReconstructionMap, k: &Intrinsics, huber_delta: f64) -> f64 {
    map.observations
        .iter()
        .map(|o| {
            let (Some(pose), Some(x)) = (map.poses.pose(o.frame), map.landmarks.get(&o.point_id))
            else {
                return 0.0;
            };
            match residual(pose, x, o, k) {
                Some(r) => huber(r.norm(), huber_delta),
                None => f64::INFINITY,
            }
        })
        .sum()
}

fn residual(pose: &Pose, x: &Vec3, o: &MapObservation, k: &Intrinsics) -> Option<Vector2<f64>> {
    let xc = pose.world_to_camera(x);
    if xc.z <= 0.0 {
        return None;
    }
    Some(Vector2::new(
        k.fx * xc.x / xc.z + k.cx - o.pixel.u,
        k.fy * xc.y / xc.z + k.cy - o.pixel.v,
    ))
}

/// Orthonormal basis of the plane perpendicular to unit `d`.
pub(crate) fn tangent_basis(d: &Vec3) -> Matrix3x2<f64> {
    let helper = if d.x.abs() < 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    let b1 = d.cross(&helper).normalize();
    let b2 = d.cross(&b1);
    Matrix3x2::from_columns(&[b1, b2])
}

/// Moves the scale-gauge center along the sphere of radius `|c - anchor|`.
pub(crate) fn perturb_on_sphere(center: &Vec3, anchor: &Vec3, tau: &Vector2<f64>) -> Vec3 {
    let offset = center - anchor;
    let r = offset.norm();
    let d = offset / r;
    let moved = d + tangent_basis(&d) * tau;
    anchor + moved.normalize() * r
}

struct Layout {
    /// Column offset and dimension of each variable pose.
    pose_slot: BTreeMap<usize, (usize, usize)>,
    camera_dim: usize,
    points: Vec<usize>,
    point_slot: BTreeMap<usize, usize>,
}

impl Layout {
    fn new(map: &ReconstructionMap, gauge: &Gauge) -> Self {
        let mut pose_slot = BTreeMap::new();
        let mut offset = 0;
        for f in map.poses.frames() {
            if f == gauge.fixed {
                continue;
            }
            let dim = if f == gauge.scale { 5 } else { 6 };
            pose_slot.insert(f, (offset, dim));
            offset += dim;
        }
        let points: Vec<usize> = map.landmarks.keys().copied().collect();
        let point_slot = points.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Self {
            pose_slot,
            camera_dim: offset,
            points,
            point_slot,
        }
    }
}

/// Camera Jacobian in the reduced local parameters. The scale-gauge frame has
/// five parameters; its sixth column is left zero.
fn camera_block(
    jp: &Matrix2x6<f64>,
    dim: usize,
    pose: &Pose,
    anchor: Option<&Vec3>,
) -> Matrix2x6<f64> {
    if dim == 6 {
        return *jp;
    }
    let anchor = anchor.expect("scale gauge anchor");
    let offset = pose.translation - anchor;
    let r = offset.norm();
    let b = tangent_basis(&(offset / r)) * r;
    let mut out = Matrix2x6::zeros();
    out.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&jp.fixed_view::<2, 3>(0, 0));
    out.fixed_view_mut::<2, 2>(0, 3)
        .copy_from(&(jp.fixed_view::<2, 3>(0, 3) * b));
    out
}

fn apply_step(
    map: &ReconstructionMap,
    layout: &Layout,
    gauge: &Gauge,
    dc: &DVector<f64>,
    dx: &[Vector3<f64>],
) -> ReconstructionMap {
    let mut out = map.clone();
    let anchor = map.poses.pose(gauge.fixed).map(|p| p.translation);
    for (&f, &(off, dim)) in &layout.pose_slot {
        let entry = *map.poses.get(f).expect("pose present");
        let p = entry.pose;
        let w = Vec3::new(dc[off], dc[off + 1], dc[off + 2]);
        let new_pose = if dim == 6 {
            perturb_camera(
                &p,
                &Vector6::new(w.x, w.y, w.z, dc[off + 3], dc[off + 4], dc[off + 5]),
            )
        } else {
            let anchor = anchor.expect("scale gauge anchor");
            let c = perturb_on_sphere(
                &p.translation,
                &anchor,
                &Vector2::new(dc[off + 3], dc[off + 4]),
            );
            Pose::from_parts(p.rotation * exp_so3(&w), c)
        };
        out.poses.insert(f, new_pose, entry.provenance);
    }
    for (i, &pid) in layout.points.iter().enumerate() {
        if let Some(x) = out.landmarks.get_mut(&pid) {
            *x += dx[i];
        }
    }
    out
}

/// Levenberg-Marquardt over all poses except the gauge-fixed one and all
/// landmarks. Only steps that strictly lower the robust cost are accepted.
pub fn bundle_adjust(
    map: &ReconstructionMap,
    k: &Intrinsics,
    params: &BaParams,
    gauge: &Gauge,
) -> Result<BaResult> {
    params.validate()?;
    if gauge.fixed == gauge.scale {
        return Err(Error::invalid("gauge frames must differ"));
    }
    let mut map = map.clone();
    map.retain_consistent();
    let layout = Layout::new(&map, gauge);
    let anchor = map.poses.pose(gauge.fixed).map(|p| p.translation);
    if layout.pose_slot.contains_key(&gauge.scale) && anchor.is_none() {
        return Err(Error::invalid(
            "scale gauge frame present without the fixed frame",
        ));
    }

    let mut cost = robust_cost(&map, k, params.huber_delta);
    let mut trace = vec![cost];
    let mut lambda = params.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;
    let nc = layout.camera_dim;
    let np = layout.points.len();

    while iterations < params.max_iterations {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        // Linearize.
        let mut c_blocks = DMatrix::<f64>::zeros(nc, nc);
        let mut g_c = DVector::<f64>::zeros(nc);
        let mut v_blocks = vec![Matrix3::<f64>::zeros(); np];
        let mut g_x = vec![Vector3::<f64>::zeros(); np];
        // Cross terms W_ij per landmark: (camera frame, 6x3 block).
        let mut w_blocks: Vec<Vec<(usize, Matrix6x3<f64>)>> = vec![Vec::new(); np];

        for o in &map.observations {
            let pose = map.poses.pose(o.frame).expect("consistent map");
            let pi = layout.point_slot[&o.point_id];
            let x = map.landmarks[&o.point_id];
            let Some((proj, jp, jx)) = observation_jacobian(pose, &x, k) else {
                continue;
            };
            let r = proj - Vector2::new(o.pixel.u, o.pixel.v);
            let norm = r.norm();
            let weight = if norm <= params.huber_delta {
                1.0
            } else {
                params.huber_delta / norm
            };
            v_blocks[pi] += weight * jx.transpose() * jx;
            g_x[pi] += weight * jx.transpose() * r;
            if let Some(&(off, dim)) = layout.pose_slot.get(&o.frame) {
                let jc = camera_block(&jp, dim, pose, anchor.as_ref());
                let jct = jc.transpose();
                let cc = weight * jct * jc;
                let gc = weight * jct * r;
                let mut cc_dst = c_blocks.view_mut((off, off), (dim, dim));
                cc_dst += cc.view((0, 0), (dim, dim));
                let mut gc_dst = g_c.rows_mut(off, dim);
                gc_dst += gc.rows(0, dim);
                w_blocks[pi].push((o.frame, weight * jct * jx));
            }
        }

        let grad_max = g_c
            .amax()
            .max(g_x.iter().map(|g| g.amax()).fold(0.0, f64::max));
        if grad_max <= 1e-15 * (1.0 + cost) {
            converged = true;
            break;
        }

        let mut accepted = false;
        let mut attempts = 0;
        while attempts < 12 && lambda < 1e16 {
            attempts += 1;
            let Some((dc, dx)) =
                solve_damped(&layout, &c_blocks, &g_c, &v_blocks, &g_x, &w_blocks, lambda)
            else {
                lambda *= params.lambda_up;
                continue;
            };
            let candidate = apply_step(&map, &layout, gauge, &dc, &dx);
            let new_cost = robust_cost(&candidate, k, params.huber_delta);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost;
                map = candidate;
                cost = new_cost;
                trace.push(cost);
                lambda = (lambda * params.lambda_down).max(1e-15);
                accepted = true;
                if rel < params.convergence_threshold {
                    converged = true;
                }
                break;
            }
            lambda *= params.lambda_up;
        }
        if !accepted {
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        log::warn!("bundle adjustment hit the iteration cap at cost {cost:.3e}");
    }
    Ok(BaResult {
        map,
        cost_trace: trace,
        iterations,
        converged,
    })
}

#[allow(clippy::too_many_arguments)]
fn solve_damped(
    layout: &Layout,
    c_blocks: &DMatrix<f64>,
    g_c: &DVector<f64>,
    v_blocks: &[Matrix3<f64>],
    g_x: &[Vector3<f64>],
    w_blocks: &[Vec<(usize, Matrix6x3<f64>)>],
    lambda: f64,
) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let nc = layout.camera_dim;
    let damp = |d: f64| lambda * d.max(1e-9);

    let mut v_inv = Vec::with_capacity(v_blocks.len());
    for v in v_blocks {
        let mut vd = *v;
        for i in 0..3 {
            vd[(i, i)] += damp(v[(i, i)]);
        }
        v_inv.push(vd.try_inverse()?);
    }

    // Reduced camera system S = C - W V^-1 W^T, rhs = -g_c + W V^-1 g_x.
    let mut s = c_blocks.clone();
    for i in 0..nc {
        s[(i, i)] += damp(c_blocks[(i, i)]);
    }
    let mut rhs = -g_c.clone();
    for (pi, ws) in w_blocks.iter().enumerate() {
        let vi_gx = v_inv[pi] * g_x[pi];
        for (fa, wa) in ws {
            let (oa, da) = layout.pose_slot[fa];
            let r = wa * vi_gx;
            let mut r_dst = rhs.rows_mut(oa, da);
            r_dst += r.rows(0, da);
            let wv = wa * v_inv[pi];
            for (fb, wb) in ws {
                let (ob, db) = layout.pose_slot[fb];
                let blk = wv * wb.transpose();
                let mut dst = s.view_mut((oa, ob), (da, db));
                dst -= blk.view((0, 0), (da, db));
            }
        }
    }

    let dc = if nc > 0 {
        s.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };

    let mut dx = Vec::with_capacity(layout.points.len());
    for (pi, ws) in w_blocks.iter().enumerate() {
        let mut b = -g_x[pi];
        for (f, w) in ws {
            let (o, d) = layout.pose_slot[f];
            let mut dcf = Vector6::zeros();
            dcf.rows_mut(0, d).copy_from(&dc.rows(o, d));
            b -= w.transpose() * dcf;
        }
        dx.push(v_inv[pi] * b);
    }
    if dc
        .iter()
        .chain(dx.iter().flat_map(|v| v.iter()))
        .any(|x| !x.is_finite())
    {
        return None;
    }
    Some((dc, dx))
}

/// Drops landmarks with an observation residual above `3 * huber_delta` or a
/// non-positive depth in any observing camera. Returns the number removed.
pub fn prune_landmarks(map: &mut ReconstructionMap, k: &Intrinsics, huber_delta: f64) -> usize {
    let mut bad = std::collections::BTreeSet::new();
    for o in &map.observations {
        let (Some(pose), Some(x)) = (map.poses.pose(o.frame), map.landmarks.get(&o.point_id))
        else {
            continue;
        };
        match residual(pose, x, o, k) {
            Some(r) if r.norm() <= 3.0 * huber_delta => {}
            _ => {
                bad.insert(o.point_id);
            }
        }
    }
    for id in &bad {
        map.landmarks.remove(id);
    }
    map.retain_consistent();
    bad.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Pixel, PoseTable, Provenance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn ring_map(rng: &mut ChaCha8Rng, frames: usize, points: usize) -> ReconstructionMap {
        let mut map = ReconstructionMap::default();
        for f in 0..frames {
            let a = 0.15 * f as f64;
            let c = Vec3::new(
                6.0 * a.sin(),
                0.2 * rng.random_range(-1.0..1.0),
                -6.0 * a.cos(),
            );
            let z = (-c).normalize();
            let x = Vec3::y().cross(&z).normalize();
            let y = z.cross(&x);
            map.poses.insert(
                f,
                Pose::from_parts(Matrix3::from_columns(&[x, y, z]), c),
                Provenance::Sfm,
            );
        }
        for p in 0..points {
            let x = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            map.landmarks.insert(p, x);
        }
        for (f, e) in map.poses.iter() {
            for (&p, x) in &map.landmarks {
                if let Some((px, _)) = project(x, &e.pose, &k()) {
                    map.observations.push(MapObservation {
                        frame: f,
                        point_id: p,
                        pixel: px,
                    });
                }
            }
        }
        map
    }

    fn max_rel_dev(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
            / scale
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = ring_map(&mut rng, 4, 20);
        let h = 1e-6;
        for o in map.observations.iter().take(60) {
            let pose = map.poses.pose(o.frame).unwrap();
            let x = map.landmarks[&o.point_id];
            let (_, jp, jx) = observation_jacobian(pose, &x, &k()).unwrap();
            let mut fd_p = Matrix2x6::<f64>::zeros();
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = h;
                let plus = observation_jacobian(&perturb_camera(pose, &d), &x, &k())
                    .unwrap()
                    .0;
                let minus = observation_jacobian(&perturb_camera(pose, &(-d)), &x, &k())
                    .unwrap()
                    .0;
                fd_p.set_column(i, &((plus - minus) / (2.0 * h)));
            }
            assert!(max_rel_dev(jp.as_slice(), fd_p.as_slice()) < 1e-5);
            let mut fd_x = Matrix2x3::<f64>::zeros();
            for i in 0..3 {
                let mut d = Vec3::zeros();
                d[i] = h;
                let plus = observation_jacobian(pose, &(x + d), &k()).unwrap().0;
                let minus = observation_jacobian(pose, &(x - d), &k()).unwrap().0;
                fd_x.set_column(i, &((plus - minus) / (2.0 * h)));
            }
            assert!(max_rel_dev(jx.as_slice(), fd_x.as_slice()) < 1e-5);

            // Sphere-constrained center parameters of the scale gauge frame.
            let anchor = Vec3::new(0.3, -0.2, 0.1);
            let jc = camera_block(&jp, 5, pose, Some(&anchor));
            for i in 0..2 {
                let mut t = Vector2::zeros();
                t[i] = h;
                let mv = |tau: &Vector2<f64>| {
                    let c = perturb_on_sphere(&pose.translation, &anchor, tau);
                    observation_jacobian(&Pose::from_parts(pose.rotation, c), &x, &k())
                        .unwrap()
                        .0
                };
                let fd = (mv(&t) - mv(&(-t))) / (2.0 * h);
                let an = jc.column(3 + i);
                assert!(max_rel_dev(an.as_slice(), fd.as_slice()) < 1e-5);
            }
        }
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let map = ring_map(&mut rng, 5, 40);
        let out = bundle_adjust(
            &map,
            &k(),
            &BaParams::default(),
            &Gauge { fixed: 0, scale: 1 },
        )
        .unwrap();
        assert!(out.final_cost() < 1e-20);
        for (f, e) in map.poses.iter() {
            let p = out.map.poses.pose(f).unwrap();
            assert!((p.rotation - e.pose.rotation).amax() < 1e-9);
            assert!((p.translation - e.pose.translation).amax() < 1e-9);
        }
    }

    #[test]
    fn converges_from_one_percent_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = ring_map(&mut rng, 8, 80);
        let mut start = truth.clone();
        let mut poses = PoseTable::new();
        for (f, e) in truth.poses.iter() {
            let p = if f == 0 {
                e.pose
            } else {
                let d = Vector6::from_fn(|_, _| rng.random_range(-0.01..0.01));
                let mut p = perturb_camera(&e.pose, &d);
                if f == 1 {
                    // stay on the gauge sphere
                    let c0 = truth.poses.pose(0).unwrap().translation;
                    let r = (e.pose.translation - c0).norm();
                    p.translation = c0 + (p.translation - c0).normalize() * r;
                }
                p
            };
            poses.insert(f, p, e.provenance);
        }
        start.poses = poses;
        for x in start.landmarks.values_mut() {
            *x *= 1.0 + rng.random_range(-0.01..0.01);
        }
        let out = bundle_adjust(
            &start,
            &k(),
            &BaParams::default(),
            &Gauge { fixed: 0, scale: 1 },
        )
        .unwrap();
        let n = out.map.observations.len() as f64;
        let rms = (out.final_cost() / n).sqrt();
        assert!(rms < 1e-6, "rms {rms}");
        assert!(out.cost_trace.windows(2).all(|w| w[1] < w[0]));
        let c0 = out.map.poses.pose(0).unwrap().translation;
        let c1 = out.map.poses.pose(1).unwrap().translation;
        let r_truth = (truth.poses.pose(1).unwrap().translation
            - truth.poses.pose(0).unwrap().translation)
            .norm();
        assert!(((c1 - c0).norm() - r_truth).abs() < 1e-12);
    }

    #[test]
    fn pruning_removes_bad_landmarks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut map = ring_map(&mut rng, 3, 10);
        map.observations[0].pixel = Pixel::new(0.0, 0.0);
        let bad = map.observations[0].point_id;
        let removed = prune_landmarks(&mut map, &k(), 2.0);
        assert_eq!(removed, 1);
        assert!(!map.landmarks.contains_key(&bad));
        assert!(map.observations.iter().all(|o| o.point_id != bad));
    }
}
