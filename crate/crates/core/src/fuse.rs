//! Bringing SfM poses into the scan frame and merging them with relocalized
//! poses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_sim3, Mat3, PoseTable, Provenance, Sim3, Vec3};

/// Residuals below this are treated as numerical noise by the robust re-fit.
const REFIT_FLOOR: f64 = 1e-9;

/// Closed-form least-squares similarity with `dst ~ scale * R * src + t`.
pub fn umeyama_sim3(src: &[Vec3], dst: &[Vec3]) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::invalid("point sets must be paired"));
    }
    if src.len() < 3 {
        return Err(Error::degenerate(format!(
            "similarity alignment needs at least 3 pairs, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let var_s = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / n;

    let mut cov = Mat3::zeros();
    let mut scatter = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
        scatter += (s - mu_s) * (s - mu_s).transpose();
    }
    cov /= n;
    // Collinear (or coincident) sources leave rotation about the line free.
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if !(ev[1] > 1e-12 * ev[2].max(f64::MIN_POSITIVE)) || !(var_s > 0.0) {
        return Err(Error::degenerate("source points are collinear"));
    }

    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * vt.determinant() < 0.0 {
        // reflection guard: flip the smallest singular direction
        let imin = svd.singular_values.imin();
        d[imin] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&d) * vt;
    let scale = svd.singular_values.component_mul(&d).sum() / var_s;
    let translation = mu_d - scale * rotation * mu_s;
    Sim3::new(scale, rotation, translation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResidual {
    pub frame: usize,
    /// Center distance after alignment, meters.
    pub residual: f64,
    /// False when the robust re-fit excluded this frame.
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub scale: f64,
    /// Row-major rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub correspondences_used: usize,
    /// RMS center residual over the frames used by the final fit.
    pub rms_center_residual: f64,
    pub per_frame: Vec<FrameResidual>,
}

impl AlignmentReport {
    pub fn sim3(&self) -> Sim3 {
        Sim3 {
            scale: self.scale,
            rotation: Mat3::from_row_slice(&self.rotation),
            translation: Vec3::from(self.translation),
        }
    }
}

/// Aligns SfM camera centers to relocalized centers over shared frames, with a
/// single re-fit after dropping frames whose residual exceeds three times the
/// median. The returned table is the whole SfM table mapped into the scan frame.
pub fn align_sfm_to_scan(sfm: &PoseTable, pnp: &PoseTable) -> Result<(PoseTable, AlignmentReport)> {
    let shared: Vec<usize> = sfm.frames().filter(|f| pnp.contains(*f)).collect();
    if shared.len() < 3 {
        return Err(Error::AlignmentInfeasible(format!(
            "only {} frames carry both SfM and PnP poses (need 3)",
            shared.len()
        )));
    }
    let src: Vec<Vec3> = shared
        .iter()
        .map(|&f| sfm.pose(f).unwrap().center())
        .collect();
    let dst: Vec<Vec3> = shared
        .iter()
        .map(|&f| pnp.pose(f).unwrap().center())
        .collect();
    let fit = |keep: &[bool]| -> Result<Sim3> {
        let s: Vec<Vec3> = src
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect();
        let d: Vec<Vec3> = dst
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect();
        umeyama_sim3(&s, &d).map_err(|e| Error::AlignmentInfeasible(e.to_string()))
    };
    let residuals = |s: &Sim3| -> Vec<f64> {
        src.iter()
            .zip(&dst)
            .map(|(a, b)| (s.transform_point(a) - b).norm())
            .collect()
    };

    let mut keep = vec![true; shared.len()];
    let mut sim = fit(&keep)?;
    let first = residuals(&sim);
    let mut sorted = first.clone();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2];
    let cutoff = (3.0 * med).max(REFIT_FLOOR);
    let refit: Vec<bool> = first.iter().map(|&r| r <= cutoff).collect();
    if refit.iter().filter(|&&k| k).count() >= 3 && refit.contains(&false) {
        if let Ok(s) = fit(&refit) {
            sim = s;
            keep = refit;
        }
    }

    let res = residuals(&sim);
    let used = keep.iter().filter(|&&k| k).count();
    let rms = (res
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r * r)
        .sum::<f64>()
        / used as f64)
        .sqrt();
    let aligned: PoseTable = sfm
        .iter()
        .map(|(f, e)| (f, apply_sim3(&sim, &e.pose), e.provenance))
        .collect();
    let r = sim.rotation;
    let report = AlignmentReport {
        scale: sim.scale,
        rotation: [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ],
        translation: [sim.translation.x, sim.translation.y, sim.translation.z],
        correspondences_used: used,
        rms_center_residual: rms,
        per_frame: shared
            .iter()
            .zip(res.iter().zip(&keep))
            .map(|(&frame, (&residual, &used))| FrameResidual {
                frame,
                residual,
                used,
            })
            .collect(),
    };
    Ok((aligned, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preference {
    PreferSfm,
    PreferPnp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnionPolicy {
    pub preference: Preference,
    /// Max distance (meters) between the preferred pose's center and the
    /// center interpolated from neighboring frames before the other source
    /// takes over.
    pub consistency_gate: Option<f64>,
}

impl Default for UnionPolicy {
    fn default() -> Self {
        Self {
            preference: Preference::PreferSfm,
            consistency_gate: None,
        }
    }
}

impl UnionPolicy {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.consistency_gate {
            if !(g > 0.0) {
                return Err(Error::invalid("consistency gate must be positive"));
            }
        }
        Ok(())
    }
}

/// Union of both tables. Frames in both follow the policy; provenance
/// records which source each output pose came from.
pub fn union_poses(
    aligned_sfm: &PoseTable,
    pnp: &PoseTable,
    policy: &UnionPolicy,
) -> Result<PoseTable> {
    policy.validate()?;
    let (preferred, other, pref_tag, other_tag) = match policy.preference {
        Preference::PreferSfm => (
            aligned_sfm,
            pnp,
            Provenance::HybridSfm,
            Provenance::HybridPnp,
        ),
        Preference::PreferPnp => (
            pnp,
            aligned_sfm,
            Provenance::HybridPnp,
            Provenance::HybridSfm,
        ),
    };

    // Neighbor centers for the gate come from the other source where it has
    // a pose, so a bad preferred pose cannot vouch for its neighbors.
    let mut reference: BTreeMap<usize, Vec3> = BTreeMap::new();
    for (f, e) in preferred.iter() {
        reference.insert(f, e.pose.center());
    }
    for (f, e) in other.iter() {
        reference.insert(f, e.pose.center());
    }

    let mut out = PoseTable::new();
    for (f, e) in other.iter() {
        out.insert(f, e.pose, other_tag);
    }
    for (f, e) in preferred.iter() {
        let mut pose = e.pose;
        let mut tag = pref_tag;
        if let (Some(gate), Some(alt)) = (policy.consistency_gate, other.pose(f)) {
            let prev = reference.range(..f).next_back();
            let next = reference.range(f + 1..).next();
            if let (Some((&fa, ca)), Some((&fb, cb))) = (prev, next) {
                let s = (f - fa) as f64 / (fb - fa) as f64;
                let expected = ca.lerp(cb, s);
                if (pose.center() - expected).norm() > gate {
                    pose = *alt;
                    tag = other_tag;
                }
            }
        }
        out.insert(f, pose, tag);
    }
    Ok(out)
}
