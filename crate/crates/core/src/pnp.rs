//! Camera relocalization from 2D-3D matches against scan keypoints.
//!
//! The minimal solver is a normalized 6-point DLT. RANSAC hypotheses are
//! scored by inlier count and the winner is polished with a damped
//! Gauss-Newton refinement over a local 6-parameter pose perturbation.

use nalgebra::{DMatrix, Matrix2x6, Matrix3x4, Matrix4, Matrix6, Vector2, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    exp_so3, nearest_rotation, skew, smallest_right_singular, Intrinsics, Mat3, Pixel, Pose,
    PoseTable, Provenance, Vec3,
};

pub const MIN_PNP_POINTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub pixel: Pixel,
    pub point: Vec3,
    pub point_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Reprojection threshold in pixels.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 2.0,
            min_inliers: 12,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::invalid("inlier_threshold must be positive"));
        }
        if self.min_inliers < MIN_PNP_POINTS {
            return Err(Error::invalid("min_inliers must be at least 6"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::invalid("confidence must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Similarity normalization `x -> s (x - c)` with mean distance `target`.
fn normalization(points: impl Iterator<Item = Vec3> + Clone, dims: usize) -> (Vec3, f64) {
    let n = points.clone().count() as f64;
    let c = points.clone().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mean = points.map(|p| (p - c).norm()).sum::<f64>() / n;
    let target = (dims as f64).sqrt();
    (c, if mean > 0.0 { target / mean } else { 1.0 })
}

/// Direct linear transform from at least six correspondences.
pub fn solve_pnp_dlt(corrs: &[Correspondence2D3D], k: &Intrinsics) -> Result<Pose> {
    if corrs.len() < MIN_PNP_POINTS {
        return Err(Error::invalid(format!(
            "PnP needs at least {MIN_PNP_POINTS} correspondences, got {}",
            corrs.len()
        )));
    }
    let rays: Vec<Vec3> = corrs.iter().map(|c| k.normalize(&c.pixel)).collect();
    let (c2, s2) = normalization(rays.iter().map(|r| Vec3::new(r.x, r.y, 0.0)), 2);
    let (c3, s3) = normalization(corrs.iter().map(|c| c.point), 3);

    let mut a = DMatrix::<f64>::zeros(2 * corrs.len(), 12);
    for (i, (c, r)) in corrs.iter().zip(&rays).enumerate() {
        let x = (c.point - c3) * s3;
        let xh = [x.x, x.y, x.z, 1.0];
        let u = (r.x - c2.x) * s2;
        let v = (r.y - c2.y) * s2;
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -v * xh[j];
        }
    }
    let (p, sv) = smallest_right_singular(&a);
    if sv[10] <= 1e-9 * sv[0] {
        return Err(Error::degenerate("DLT design matrix is rank deficient"));
    }
    let pn = Matrix3x4::from_row_slice(p.as_slice());
    let t2_inv = Mat3::new(1.0 / s2, 0.0, c2.x, 0.0, 1.0 / s2, c2.y, 0.0, 0.0, 1.0);
    let mut t3 = Matrix4::<f64>::identity() * s3;
    t3[(3, 3)] = 1.0;
    t3[(0, 3)] = -s3 * c3.x;
    t3[(1, 3)] = -s3 * c3.y;
    t3[(2, 3)] = -s3 * c3.z;
    let mut proj = t2_inv * pn * t3;

    let m: Mat3 = proj.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        proj = -proj;
    }
    let m: Mat3 = proj.fixed_view::<3, 3>(0, 0).into_owned();
    let sv = m.singular_values();
    let scale = sv.mean();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::degenerate(
            "DLT projection has a singular rotation block",
        ));
    }
    let r_cw = nearest_rotation(&m);
    let t_cw: Vec3 = proj.column(3) / scale;
    let r_wc = r_cw.transpose();
    Ok(Pose::from_parts(r_wc, -(r_wc * t_cw)))
}

/// Left perturbation of the world-to-camera transform:
/// `R_cw <- exp(w) R_cw`, `t_cw <- exp(w) t_cw + dt`, with `delta = [w; dt]`.
pub fn perturb_pose(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let r_cw = pose.rotation.transpose();
    let t_cw = -(r_cw * pose.translation);
    let dr = exp_so3(&Vec3::new(delta[0], delta[1], delta[2]));
    let r_new = dr * r_cw;
    let t_new = dr * t_cw + Vec3::new(delta[3], delta[4], delta[5]);
    let r_wc = r_new.transpose();
    Pose::from_parts(r_wc, -(r_wc * t_new))
}

/// Reprojection residual (predicted minus observed) and its Jacobian with
/// respect to [`perturb_pose`]'s `delta` at zero. `None` when the point is
/// not in front of the camera.
pub fn reprojection_jacobian(
    pose: &Pose,
    corr: &Correspondence2D3D,
    k: &Intrinsics,
) -> Option<(Vector2<f64>, Matrix2x6<f64>)> {
    let xc = pose.world_to_camera(&corr.point);
    if xc.z <= 0.0 {
        return None;
    }
    let iz = 1.0 / xc.z;
    let r = Vector2::new(
        k.fx * xc.x * iz + k.cx - corr.pixel.u,
        k.fy * xc.y * iz + k.cy - corr.pixel.v,
    );
    let dproj = nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    // xc' = exp(w) xc + dt, so d(xc)/dw = -[xc]x and d(xc)/d(dt) = I
    let mut dxc = nalgebra::Matrix3x6::<f64>::zeros();
    dxc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&xc)));
    dxc.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Mat3::identity());
    Some((r, dproj * dxc))
}

/// Summed squared reprojection error. Infinite if any point is behind the camera.
pub fn reprojection_cost(pose: &Pose, corrs: &[Correspondence2D3D], k: &Intrinsics) -> f64 {
    corrs
        .iter()
        .map(|c| match reprojection_error(pose, c, k) {
            Some(e) => e * e,
            None => f64::INFINITY,
        })
        .sum()
}

pub fn reprojection_error(pose: &Pose, corr: &Correspondence2D3D, k: &Intrinsics) -> Option<f64> {
    let xc = pose.world_to_camera(&corr.point);
    if xc.z <= 0.0 {
        return None;
    }
    let px = k.denormalize(xc.x / xc.z, xc.y / xc.z);
    Some(px.distance(&corr.pixel))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineResult {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before a stopping criterion.
    pub converged: bool,
}

const REFINE_MAX_ITERATIONS: usize = 100;

/// Damped Gauss-Newton on the summed squared reprojection error. Steps that
/// do not strictly decrease the cost are rejected, so `final_cost <= initial_cost`.
pub fn refine_pose(
    initial: &Pose,
    corrs: &[Correspondence2D3D],
    k: &Intrinsics,
) -> Result<RefineResult> {
    if corrs.len() < MIN_PNP_POINTS {
        return Err(Error::invalid(
            "refinement needs at least 6 correspondences",
        ));
    }
    let initial_cost = reprojection_cost(initial, corrs, k);
    let mut pose = *initial;
    let mut cost = initial_cost;
    let mut lambda = -1.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < REFINE_MAX_ITERATIONS {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in corrs {
            if let Some((r, j)) = reprojection_jacobian(&pose, c, k) {
                h += j.transpose() * j;
                g += j.transpose() * r;
            }
        }
        if g.amax() <= 1e-14 * (1.0 + cost) || cost == 0.0 {
            converged = true;
            break;
        }
        if lambda < 0.0 {
            lambda = 1e-4 * h.diagonal().max();
        }
        let mut accepted = false;
        while lambda < 1e20 {
            let damped = h + Matrix6::identity() * lambda;
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = perturb_pose(&pose, &step);
            let new_cost = reprojection_cost(&candidate, corrs, k);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost;
                pose = candidate;
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < 1e-14 || step.amax() < 1e-15 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No descent direction left at working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        log::warn!("pose refinement hit the iteration cap at cost {cost:.3e}");
    }
    Ok(RefineResult {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub pose: Pose,
    /// Indices into the input correspondence list.
    pub inliers: Vec<usize>,
    pub hypotheses_evaluated: usize,
}

impl RansacOutcome {
    pub fn inlier_point_ids(&self, corrs: &[Correspondence2D3D]) -> Vec<usize> {
        self.inliers.iter().map(|&i| corrs[i].point_id).collect()
    }
}

fn score(pose: &Pose, corrs: &[Correspondence2D3D], k: &Intrinsics, thr: f64) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        if let Some(e) = reprojection_error(pose, c, k) {
            if e < thr {
                inliers.push(i);
                total += e;
            }
        }
    }
    (inliers, total)
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let p_good = inlier_ratio.powi(MIN_PNP_POINTS as i32);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Up to three rounds of refinement on the current inliers followed by
/// rescoring; stops as soon as a round fails to improve the consensus.
fn local_optimize(
    start: &(Vec<usize>, f64, Pose),
    corrs: &[Correspondence2D3D],
    k: &Intrinsics,
    thr: f64,
) -> Result<(Vec<usize>, f64, Pose)> {
    let mut cur = start.clone();
    for _ in 0..3 {
        if cur.0.len() < MIN_PNP_POINTS {
            break;
        }
        let subset: Vec<Correspondence2D3D> = cur.0.iter().map(|&i| corrs[i]).collect();
        let pose = refine_pose(&cur.2, &subset, k)?.pose;
        let (inliers, err) = score(&pose, corrs, k, thr);
        if inliers.len() < cur.0.len() || (inliers.len() == cur.0.len() && err >= cur.1) {
            break;
        }
        cur = (inliers, err, pose);
    }
    Ok(cur)
}

/// Seeded RANSAC over 6-point DLT hypotheses. Returns `None` when no
/// hypothesis reaches `min_inliers`.
pub fn ransac_pnp(
    corrs: &[Correspondence2D3D],
    k: &Intrinsics,
    params: &RansacParams,
) -> Result<Option<RansacOutcome>> {
    params.validate()?;
    if corrs.len() < MIN_PNP_POINTS || corrs.len() < params.min_inliers {
        return Ok(None);
    }
    // All samples are drawn up front from the seeded stream.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let samples: Vec<Vec<usize>> = (0..params.max_iterations)
        .map(|_| rand::seq::index::sample(&mut rng, corrs.len(), MIN_PNP_POINTS).into_vec())
        .collect();

    let mut best: Option<(Vec<usize>, f64, Pose)> = None;
    let mut required = params.max_iterations;
    let mut evaluated = 0;
    for sample in &samples {
        if evaluated >= required {
            break;
        }
        evaluated += 1;
        let subset: Vec<Correspondence2D3D> = sample.iter().map(|&i| corrs[i]).collect();
        let Ok(pose) = solve_pnp_dlt(&subset, k) else {
            continue;
        };
        let (inliers, err) = score(&pose, corrs, k, params.inlier_threshold);
        let beats = |inl: &[usize], e: f64, best: &Option<(Vec<usize>, f64, Pose)>| match best {
            None => true,
            Some((bi, be, _)) => inl.len() > bi.len() || (inl.len() == bi.len() && e < *be),
        };
        if beats(&inliers, err, &best) {
            // Minimal-sample poses are noisy; polish each new best on its
            // consensus set before it sets the bar for later hypotheses.
            let mut cand = (inliers, err, pose);
            let polished = local_optimize(&cand, corrs, k, params.inlier_threshold)?;
            if beats(&polished.0, polished.1, &Some(cand.clone())) {
                cand = polished;
            }
            let ratio = cand.0.len() as f64 / corrs.len() as f64;
            required = required_iterations(ratio, params.confidence, params.max_iterations);
            best = Some(cand);
        }
    }

    let Some((mut inliers, _, mut pose)) = best else {
        return Ok(None);
    };
    if inliers.len() < params.min_inliers {
        return Ok(None);
    }
    for _ in 0..3 {
        let subset: Vec<Correspondence2D3D> = inliers.iter().map(|&i| corrs[i]).collect();
        pose = refine_pose(&pose, &subset, k)?.pose;
        let (next, _) = score(&pose, corrs, k, params.inlier_threshold);
        if next == inliers || next.len() < MIN_PNP_POINTS {
            break;
        }
        inliers = next;
    }
    if inliers.len() < params.min_inliers {
        return Ok(None);
    }
    Ok(Some(RansacOutcome {
        pose,
        inliers,
        hypotheses_evaluated: evaluated,
    }))
}

/// splitmix64 finalizer, used to derive independent per-item seeds.
pub(crate) fn mix_seed(seed: u64, item: u64) -> u64 {
    let mut z = seed ^ item.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Relocalizes every frame independently. `matches[f]` holds frame `f`'s
/// correspondences; frames that fail are absent from the table.
pub fn relocalize_frames(
    matches: &[Vec<Correspondence2D3D>],
    k: &Intrinsics,
    params: &RansacParams,
) -> Result<PoseTable> {
    params.validate()?;
    let results: Vec<Result<Option<Pose>>> = matches
        .par_iter()
        .enumerate()
        .map(|(frame, corrs)| {
            let p = RansacParams {
                seed: mix_seed(params.seed, frame as u64),
                ..*params
            };
            Ok(ransac_pnp(corrs, k, &p)?.map(|o| o.pose))
        })
        .collect();
    let mut table = PoseTable::new();
    for (frame, r) in results.into_iter().enumerate() {
        if let Some(pose) = r? {
            table.insert(frame, pose, Provenance::Pnp);
        } else {
            log::debug!("frame {frame}: relocalization failed");
        }
    }
    Ok(table)
}
