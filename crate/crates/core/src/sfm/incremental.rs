use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::bundle::{bundle_adjust, prune_landmarks, BaParams, Gauge};
use super::essential::{decompose_essential, estimate_essential, PointPair};
use super::triangulate::{triangulate_rays, triangulation_angle};
use super::{MapObservation, ReconstructionMap};
use crate::error::{Error, Result};
use crate::geometry::{project, Intrinsics, Pixel, Pose, Provenance};
use crate::pnp::{mix_seed, ransac_pnp, Correspondence2D3D, RansacParams};
use crate::synthworld::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmParams {
    pub ransac: RansacParams,
    pub ba: BaParams,
    /// Minimum number of shared tracks for the bootstrap pair.
    pub min_bootstrap_tracks: usize,
    /// New landmarks need at least this ray angle (degrees).
    pub min_triangulation_angle_deg: f64,
    /// New landmarks must reproject within this many pixels.
    pub max_reprojection_error: f64,
}

impl Default for SfmParams {
    fn default() -> Self {
        Self {
            ransac: RansacParams::default(),
            ba: BaParams::default(),
            min_bootstrap_tracks: 8,
            min_triangulation_angle_deg: 1.0,
            max_reprojection_error: 4.0,
        }
    }
}

struct TrackIndex {
    /// frame -> point id -> pixel
    by_frame: BTreeMap<usize, BTreeMap<usize, Pixel>>,
    /// point id -> frames observing it
    by_point: BTreeMap<usize, Vec<usize>>,
}

impl TrackIndex {
    fn new(observations: &[Observation]) -> Self {
        let mut by_frame: BTreeMap<usize, BTreeMap<usize, Pixel>> = BTreeMap::new();
        let mut by_point: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for o in observations {
            by_frame
                .entry(o.frame)
                .or_default()
                .insert(o.point_id, o.pixel);
        }
        for (&f, pts) in &by_frame {
            for &p in pts.keys() {
                by_point.entry(p).or_default().push(f);
            }
        }
        Self { by_frame, by_point }
    }

    fn pixel(&self, frame: usize, point: usize) -> Option<&Pixel> {
        self.by_frame.get(&frame).and_then(|m| m.get(&point))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Pair with the largest (shared tracks x median normalized flow).
fn select_bootstrap_pair(
    index: &TrackIndex,
    k: &Intrinsics,
    min_shared: usize,
) -> Option<(usize, usize)> {
    let frames: Vec<usize> = index.by_frame.keys().copied().collect();
    let mut best: Option<(f64, usize, usize)> = None;
    for (i, &a) in frames.iter().enumerate() {
        for &b in &frames[i + 1..] {
            let fa = &index.by_frame[&a];
            let fb = &index.by_frame[&b];
            let flows: Vec<f64> = fa
                .iter()
                .filter_map(|(p, pa)| {
                    fb.get(p)
                        .map(|pb| (k.normalize(pa) - k.normalize(pb)).norm())
                })
                .collect();
            if flows.len() < min_shared {
                continue;
            }
            let score = flows.len() as f64 * median(flows);
            if best.is_none_or(|(s, _, _)| score > s) {
                best = Some((score, a, b));
            }
        }
    }
    best.map(|(_, a, b)| (a, b))
}

struct Builder<'a> {
    index: TrackIndex,
    k: &'a Intrinsics,
    params: &'a SfmParams,
    map: ReconstructionMap,
}

impl Builder<'_> {
    fn accept_point(
        &self,
        x: &nalgebra::Vector3<f64>,
        views: &[(usize, &Pose)],
        point: usize,
    ) -> bool {
        views.iter().all(|(f, pose)| {
            let Some(obs) = self.index.pixel(*f, point) else {
                return false;
            };
            project(x, pose, self.k)
                .is_some_and(|(px, _)| px.distance(obs) <= self.params.max_reprojection_error)
        })
    }

    /// Triangulates tracks seen in `frame` that are not landmarks yet, pairing
    /// `frame` with the registered view giving the widest ray angle.
    fn triangulate_new(&mut self, frame: usize) -> usize {
        let pose = *self.map.poses.pose(frame).expect("registered");
        let min_angle = self.params.min_triangulation_angle_deg.to_radians();
        let mut added = 0;
        let candidates: Vec<(usize, Pixel)> = self.index.by_frame[&frame]
            .iter()
            .filter(|(p, _)| !self.map.landmarks.contains_key(p))
            .map(|(p, px)| (*p, *px))
            .collect();
        for (point, px) in candidates {
            let mut best: Option<(f64, nalgebra::Vector3<f64>)> = None;
            for &other in &self.index.by_point[&point] {
                if other == frame {
                    continue;
                }
                let Some(other_pose) = self.map.poses.pose(other) else {
                    continue;
                };
                let other_px = self.index.by_frame[&other][&point];
                let Ok(x) = triangulate_rays(
                    &pose,
                    &self.k.normalize(&px),
                    other_pose,
                    &self.k.normalize(&other_px),
                ) else {
                    continue;
                };
                let angle = triangulation_angle(&pose, other_pose, &x);
                if angle < min_angle
                    || !self.accept_point(&x, &[(frame, &pose), (other, other_pose)], point)
                {
                    continue;
                }
                if best.is_none_or(|(a, _)| angle > a) {
                    best = Some((angle, x));
                }
            }
            if let Some((_, x)) = best {
                self.map.landmarks.insert(point, x);
                added += 1;
            }
        }
        added
    }

    fn rebuild_observations(&mut self) {
        let mut obs = Vec::new();
        for f in self.map.poses.frames() {
            for (&p, &px) in &self.index.by_frame[&f] {
                if self.map.landmarks.contains_key(&p) {
                    obs.push(MapObservation {
                        frame: f,
                        point_id: p,
                        pixel: px,
                    });
                }
            }
        }
        self.map.observations = obs;
    }

    fn adjust(&mut self, gauge: &Gauge) -> Result<()> {
        self.rebuild_observations();
        let result = bundle_adjust(&self.map, self.k, &self.params.ba, gauge)?;
        log::debug!(
            "BA: {} poses, {} landmarks, cost {:.3e} -> {:.3e}",
            result.map.poses.len(),
            result.map.landmarks.len(),
            result.cost_trace[0],
            result.final_cost()
        );
        self.map = result.map;
        let pruned = prune_landmarks(&mut self.map, self.k, self.params.ba.huber_delta);
        if pruned > 0 {
            log::debug!("pruned {pruned} landmarks");
        }
        Ok(())
    }

    fn landmark_matches(&self, frame: usize) -> Vec<Correspondence2D3D> {
        self.index.by_frame[&frame]
            .iter()
            .filter_map(|(p, px)| {
                self.map.landmarks.get(p).map(|x| Correspondence2D3D {
                    pixel: *px,
                    point: *x,
                    point_id: *p,
                })
            })
            .collect()
    }
}

/// Incremental SfM over feature tracks. Frames that cannot be registered are
/// absent from the returned poses; all entries carry SFM provenance.
pub fn run_incremental_sfm(
    observations: &[Observation],
    k: &Intrinsics,
    num_frames: usize,
    params: &SfmParams,
) -> Result<ReconstructionMap> {
    params.ransac.validate()?;
    params.ba.validate()?;
    let index = TrackIndex::new(observations);
    let min_shared = params.min_bootstrap_tracks.max(8);
    let (a, b) = select_bootstrap_pair(&index, k, min_shared)
        .ok_or_else(|| Error::EmptyReconstruction("no frame pair shares enough tracks".into()))?;

    let shared: Vec<(usize, PointPair)> = index.by_frame[&a]
        .iter()
        .filter_map(|(p, pa)| {
            index.by_frame[&b].get(p).map(|pb| {
                let (na, nb) = (k.normalize(pa), k.normalize(pb));
                (*p, PointPair { a: na, b: nb })
            })
        })
        .collect();
    let pairs: Vec<PointPair> = shared.iter().map(|(_, p)| *p).collect();
    let bootstrap = estimate_essential(&pairs).and_then(|e| decompose_essential(&e, &pairs));
    let pose_b =
        bootstrap.map_err(|e| Error::EmptyReconstruction(format!("bootstrap failed: {e}")))?;
    log::info!(
        "bootstrap pair ({a}, {b}) with {} shared tracks",
        shared.len()
    );

    let mut builder = Builder {
        index,
        k,
        params,
        map: ReconstructionMap::default(),
    };
    builder
        .map
        .poses
        .insert(a, Pose::identity(), Provenance::Sfm);
    builder.map.poses.insert(b, pose_b, Provenance::Sfm);
    let gauge = Gauge { fixed: a, scale: b };
    builder.triangulate_new(b);
    if builder.map.landmarks.len() < 8 {
        return Err(Error::EmptyReconstruction(format!(
            "bootstrap triangulated only {} landmarks",
            builder.map.landmarks.len()
        )));
    }
    builder.adjust(&gauge)?;

    let ba_every = num_frames.div_ceil(5).max(1);
    let mut since_ba = 0;
    let mut failed: BTreeSet<usize> = BTreeSet::new();
    loop {
        let next = builder
            .index
            .by_frame
            .keys()
            .filter(|f| !builder.map.poses.contains(**f) && !failed.contains(f))
            .map(|&f| {
                let visible = builder.index.by_frame[&f]
                    .keys()
                    .filter(|p| builder.map.landmarks.contains_key(p))
                    .count();
                (visible, f)
            })
            .filter(|(visible, _)| *visible >= params.ransac.min_inliers)
            .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)));
        let Some((_, frame)) = next else {
            break;
        };
        let corrs = builder.landmark_matches(frame);
        let ransac = RansacParams {
            seed: mix_seed(params.ransac.seed, frame as u64),
            ..params.ransac
        };
        match ransac_pnp(&corrs, k, &ransac)? {
            Some(out) => {
                builder.map.poses.insert(frame, out.pose, Provenance::Sfm);
                let added = builder.triangulate_new(frame);
                log::debug!(
                    "registered frame {frame} ({} inliers, {added} new landmarks)",
                    out.inliers.len()
                );
                failed.clear();
                since_ba += 1;
                if since_ba >= ba_every {
                    builder.adjust(&gauge)?;
                    since_ba = 0;
                }
            }
            None => {
                log::debug!("frame {frame}: registration failed");
                failed.insert(frame);
            }
        }
    }
    builder.adjust(&gauge)?;
    let mut map = builder.map;
    map.retain_consistent();
    Ok(map)
}
