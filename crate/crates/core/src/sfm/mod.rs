//! Minimal incremental structure-from-motion.
//!
//! Two-view bootstrap from an essential matrix, PnP registration of the
//! remaining frames against the growing landmark map, DLT triangulation of
//! new tracks, and periodic robust bundle adjustment. Poses come out in an
//! arbitrary similarity frame anchored on the bootstrap pair.

mod bundle;
mod essential;
mod incremental;
mod triangulate;

use std::collections::BTreeMap;

use crate::geometry::{Pixel, PoseTable, Vec3};

pub use bundle::{
    bundle_adjust, observation_jacobian, perturb_camera, prune_landmarks, robust_cost, BaParams,
    BaResult, Gauge,
};
pub use essential::{decompose_essential, estimate_essential, PointPair};
pub use incremental::{run_incremental_sfm, SfmParams};
pub use triangulate::triangulate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapObservation {
    pub frame: usize,
    pub point_id: usize,
    pub pixel: Pixel,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructionMap {
    pub poses: PoseTable,
    pub landmarks: BTreeMap<usize, Vec3>,
    pub observations: Vec<MapObservation>,
}

impl ReconstructionMap {
    /// Drops observations whose frame or landmark is missing.
    pub fn retain_consistent(&mut self) {
        let poses = &self.poses;
        let landmarks = &self.landmarks;
        self.observations
            .retain(|o| poses.contains(o.frame) && landmarks.contains_key(&o.point_id));
    }
}
