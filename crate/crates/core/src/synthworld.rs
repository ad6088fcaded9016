//! Synthetic ground-truth worlds.
//!
//! A scene is a box of landmarks viewed by a camera moving along an arc, a
//! subset of landmarks playing the role of pre-computed scan keypoints, and a
//! handful of query objects. Everything is a pure function of the config and
//! seed, so downstream estimators can be checked against exact truth.

use nalgebra::{Rotation3, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, Intrinsics, Mat3, Pixel, Pose, Vec3};
use crate::vq3d::{Detection, QueryDetections};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_points: usize,
    pub num_frames: usize,
    pub num_queries: usize,
    /// Fraction of world points that are also scan keypoints.
    pub scan_keypoint_fraction: f64,
    /// Half extents of the landmark box (meters), centered on `box_center`.
    pub box_half_extent: [f64; 3],
    pub box_center: [f64; 3],
    /// Distance of the camera path from the vertical axis through the box center.
    pub orbit_radius: f64,
    /// Angular span of the camera path (radians).
    pub orbit_arc: f64,
    pub camera_height: f64,
    /// Number of waypoints the path is interpolated through (at least 2).
    pub waypoints: usize,
    pub min_scan_keypoints_per_frame: usize,
    /// Inclusive frame range whose feature tracks are dropped entirely, so
    /// SfM cannot register those frames while scan matches stay intact.
    pub sfm_failure_segment: Option<[usize; 2]>,
    pub intrinsics: Intrinsics,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_points: 200,
            num_frames: 20,
            num_queries: 5,
            scan_keypoint_fraction: 0.3,
            box_half_extent: [2.5, 2.5, 1.0],
            box_center: [0.0, 0.0, 1.0],
            orbit_radius: 6.0,
            orbit_arc: 1.6,
            camera_height: 1.6,
            waypoints: 5,
            min_scan_keypoints_per_frame: 6,
            sfm_failure_segment: None,
            intrinsics: Intrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub id: usize,
    pub position: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryObject {
    pub query_id: u32,
    pub center: Vec3,
    pub query_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub world_points: Vec<WorldPoint>,
    /// Ids of world points that are scan keypoints, ascending.
    pub scan_keypoints: Vec<usize>,
    pub trajectory: Vec<Pose>,
    pub intrinsics: Intrinsics,
    pub objects: Vec<QueryObject>,
    pub sfm_failure_segment: Option<[usize; 2]>,
}

impl SceneTruth {
    pub fn num_frames(&self) -> usize {
        self.trajectory.len()
    }

    pub fn point(&self, id: usize) -> Option<&Vec3> {
        self.world_points
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.world_points[i].position)
    }

    pub fn in_failure_segment(&self, frame: usize) -> bool {
        self.sfm_failure_segment
            .is_some_and(|[a, b]| frame >= a && frame <= b)
    }

    /// Pixel and depth of `point` in `frame` when it projects inside the image.
    pub fn observe(&self, frame: usize, point: &Vec3) -> Option<(Pixel, f64)> {
        project(point, &self.trajectory[frame], &self.intrinsics)
            .filter(|(px, _)| self.intrinsics.contains(px))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub pixel_sigma: f64,
    pub outlier_rate: f64,
    pub depth_sigma: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.0,
            outlier_rate: 0.0,
            depth_sigma: 0.0,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::invalid("outlier_rate must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1]"));
        }
        if !(self.pixel_sigma >= 0.0 && self.depth_sigma >= 0.0) {
            return Err(Error::invalid("noise sigmas must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub point_id: usize,
    pub pixel: Pixel,
    pub depth: f64,
}

/// A 2D-3D match between a frame pixel and a scan keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanMatch {
    pub frame: usize,
    pub point_id: usize,
    pub pixel: Pixel,
    pub point: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    /// Sorted by frame, then point id.
    pub observations: Vec<Observation>,
    /// Scan-keypoint matches, sorted by frame then point id.
    pub matches: Vec<ScanMatch>,
    outliers: Vec<bool>,
}

impl TrackSet {
    pub fn new(observations: Vec<Observation>, matches: Vec<ScanMatch>) -> Self {
        let outliers = vec![false; matches.len()];
        Self {
            observations,
            matches,
            outliers,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty() && self.matches.is_empty()
    }

    /// Number of scan matches whose id was corrupted during rendering.
    pub fn injected_outlier_count(&self) -> usize {
        self.outliers.iter().filter(|&&o| o).count()
    }

    /// Matches grouped per frame, indexed by frame. Frames without matches
    /// yield empty lists.
    pub fn matches_by_frame(&self, num_frames: usize) -> Vec<Vec<ScanMatch>> {
        group_matches(&self.matches, num_frames)
    }
}

pub fn group_matches(matches: &[ScanMatch], num_frames: usize) -> Vec<Vec<ScanMatch>> {
    let mut out = vec![Vec::new(); num_frames];
    for m in matches {
        if m.frame < num_frames {
            out[m.frame].push(*m);
        }
    }
    out
}

fn look_at(center: &Vec3, target: &Vec3) -> Mat3 {
    let up = Vec3::new(0.0, 0.0, 1.0);
    let z = (target - center).normalize();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    Mat3::from_columns(&[x, y, z])
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneTruth> {
    if config.num_points < 8 {
        return Err(Error::invalid("scene needs at least 8 world points"));
    }
    if config.num_frames < 2 {
        return Err(Error::invalid("scene needs at least 2 frames"));
    }
    if config.waypoints < 2 {
        return Err(Error::invalid("camera path needs at least 2 waypoints"));
    }
    if !(config.scan_keypoint_fraction > 0.0 && config.scan_keypoint_fraction <= 1.0) {
        return Err(Error::invalid("scan_keypoint_fraction must lie in (0, 1]"));
    }
    if config.box_half_extent.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::invalid("box half extents must be positive"));
    }
    let max_extent = config.box_half_extent[0].max(config.box_half_extent[1]);
    if !(config.orbit_radius > max_extent) {
        return Err(Error::invalid("orbit radius must clear the landmark box"));
    }
    if let Some([a, b]) = config.sfm_failure_segment {
        if a > b || b >= config.num_frames {
            return Err(Error::invalid(
                "failure segment must be an ordered frame range",
            ));
        }
    }
    config.intrinsics.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Vec3::from(config.box_center);
    let half = Vec3::from(config.box_half_extent);
    let sample_box = |rng: &mut ChaCha8Rng, shrink: f64| {
        center
            + Vec3::new(
                rng.random_range(-1.0..1.0) * half.x * shrink,
                rng.random_range(-1.0..1.0) * half.y * shrink,
                rng.random_range(-1.0..1.0) * half.z * shrink,
            )
    };

    let world_points: Vec<WorldPoint> = (0..config.num_points)
        .map(|id| WorldPoint {
            id,
            position: sample_box(&mut rng, 1.0),
        })
        .collect();

    let n_keys = ((config.scan_keypoint_fraction * config.num_points as f64).round() as usize)
        .clamp(1, config.num_points);
    let mut ids: Vec<usize> = (0..config.num_points).collect();
    ids.shuffle(&mut rng);
    let mut scan_keypoints = ids[..n_keys].to_vec();
    scan_keypoints.sort_unstable();

    // Waypoints along the arc, each with a jittered position and look-at target.
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let waypoints: Vec<(Vec3, UnitQuaternion<f64>)> = (0..config.waypoints)
        .map(|i| {
            let s = i as f64 / (config.waypoints - 1) as f64;
            let angle = start + s * config.orbit_arc;
            let radius = config.orbit_radius * rng.random_range(0.95..1.05);
            let c = Vec3::new(
                center.x + radius * angle.cos(),
                center.y + radius * angle.sin(),
                config.camera_height + rng.random_range(-0.1..0.1),
            );
            let target = center
                + Vec3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.2..0.2),
                );
            let r = Rotation3::from_matrix_unchecked(look_at(&c, &target));
            (c, UnitQuaternion::from_rotation_matrix(&r))
        })
        .collect();

    let trajectory: Vec<Pose> = (0..config.num_frames)
        .map(|f| {
            let s = f as f64 / (config.num_frames - 1) as f64 * (config.waypoints - 1) as f64;
            let seg = (s.floor() as usize).min(config.waypoints - 2);
            let local = s - seg as f64;
            let (c0, q0) = &waypoints[seg];
            let (c1, q1) = &waypoints[seg + 1];
            let c = c0.lerp(c1, local);
            let q = q0.slerp(q1, local);
            Pose::from_parts(*q.to_rotation_matrix().matrix(), c)
        })
        .collect();

    let mut scene = SceneTruth {
        world_points,
        scan_keypoints,
        trajectory,
        intrinsics: config.intrinsics,
        objects: Vec::new(),
        sfm_failure_segment: config.sfm_failure_segment,
    };

    for frame in 0..scene.num_frames() {
        let seen = scene
            .scan_keypoints
            .iter()
            .filter(|&&id| {
                scene
                    .observe(frame, &scene.world_points[id].position)
                    .is_some()
            })
            .count();
        if seen < config.min_scan_keypoints_per_frame {
            return Err(Error::invalid(format!(
                "frame {frame} observes only {seen} scan keypoints (need {})",
                config.min_scan_keypoints_per_frame
            )));
        }
    }

    let n = scene.num_frames();
    for q in 0..config.num_queries {
        let query_frame =
            (((q as f64 + 0.5) * n as f64 / config.num_queries as f64) as usize).min(n - 1);
        let mut placed = None;
        for _ in 0..1000 {
            let c = sample_box(&mut rng, 0.8);
            if (0..n).any(|f| scene.observe(f, &c).is_some()) {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::invalid(format!("could not place a visible object for query {q}"))
        })?;
        scene.objects.push(QueryObject {
            query_id: q as u32,
            center,
            query_frame,
        });
    }

    Ok(scene)
}

fn gaussian(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

fn jitter(px: Pixel, noise: &Option<Normal<f64>>, rng: &mut ChaCha8Rng) -> Pixel {
    match noise {
        Some(n) => Pixel::new(px.u + n.sample(rng), px.v + n.sample(rng)),
        None => px,
    }
}

/// Renders noisy feature tracks and scan-keypoint matches.
///
/// Outliers are injected per frame: exactly `round(outlier_rate * n)` of the
/// frame's `n` matches have their id and 3D point replaced by a different
/// scan keypoint.
pub fn render_tracks(scene: &SceneTruth, noise: &NoiseSpec) -> Result<TrackSet> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let px_noise = gaussian(noise.pixel_sigma);
    let depth_noise = gaussian(noise.depth_sigma);
    let k = &scene.intrinsics;

    let mut observations = Vec::new();
    let mut matches = Vec::new();
    let mut outliers = Vec::new();

    for frame in 0..scene.num_frames() {
        let mut frame_matches = Vec::new();
        for wp in &scene.world_points {
            let Some((exact, depth)) = scene.observe(frame, &wp.position) else {
                continue;
            };
            let is_key = scene.scan_keypoints.binary_search(&wp.id).is_ok();

            // Draw every random variate unconditionally so the stream layout
            // does not depend on which branch is taken.
            let px = jitter(exact, &px_noise, &mut rng);
            let d = depth + depth_noise.map_or(0.0, |n| n.sample(&mut rng));
            let keep_track = rng.random::<f64>() >= noise.dropout_rate;
            let keep_match = rng.random::<f64>() >= noise.dropout_rate;

            if !k.contains(&px) {
                continue;
            }
            if keep_track && !scene.in_failure_segment(frame) {
                observations.push(Observation {
                    frame,
                    point_id: wp.id,
                    pixel: px,
                    depth: d.max(1e-6),
                });
            }
            if is_key && keep_match {
                frame_matches.push(ScanMatch {
                    frame,
                    point_id: wp.id,
                    pixel: px,
                    point: wp.position,
                });
            }
        }

        // Corrupt a random subset by rotating their ids (and 3D points) one
        // step along a shuffled cycle, so every corrupted match carries a
        // wrong id while ids stay unique within the frame. A lone corrupted
        // match borrows a keypoint the frame does not see.
        let n_out = (noise.outlier_rate * frame_matches.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..frame_matches.len()).collect();
        order.shuffle(&mut rng);
        let chosen = &order[..n_out];
        let mut flags = vec![false; frame_matches.len()];
        if n_out >= 2 {
            let originals: Vec<(usize, Vec3)> = chosen
                .iter()
                .map(|&i| (frame_matches[i].point_id, frame_matches[i].point))
                .collect();
            for (slot, &i) in chosen.iter().enumerate() {
                let (id, point) = originals[(slot + 1) % n_out];
                frame_matches[i].point_id = id;
                frame_matches[i].point = point;
                flags[i] = true;
            }
        } else if n_out == 1 {
            let used: Vec<usize> = frame_matches.iter().map(|m| m.point_id).collect();
            let free: Vec<usize> = scene
                .scan_keypoints
                .iter()
                .copied()
                .filter(|id| !used.contains(id))
                .collect();
            if !free.is_empty() {
                let id = free[rng.random_range(0..free.len())];
                let m = &mut frame_matches[chosen[0]];
                m.point_id = id;
                m.point = scene.world_points[id].position;
                flags[chosen[0]] = true;
            }
        }
        let mut tagged: Vec<(ScanMatch, bool)> = frame_matches.into_iter().zip(flags).collect();
        tagged.sort_by_key(|(m, _)| m.point_id);
        for (m, o) in tagged {
            matches.push(m);
            outliers.push(o);
        }
    }

    Ok(TrackSet {
        observations,
        matches,
        outliers,
    })
}

/// Synthetic object detections with a peaked confidence profile per query.
pub fn make_detections(scene: &SceneTruth, noise: &NoiseSpec) -> Result<Vec<QueryDetections>> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(1);
    let px_noise = gaussian(noise.pixel_sigma);
    let depth_noise = gaussian(noise.depth_sigma);

    let mut out = Vec::with_capacity(scene.objects.len());
    for obj in &scene.objects {
        let visible: Vec<(usize, Pixel, f64)> = (0..scene.num_frames())
            .filter_map(|f| scene.observe(f, &obj.center).map(|(px, d)| (f, px, d)))
            .collect();
        let peak = visible[rng.random_range(0..visible.len())].0 as f64;
        let width = 2.0 + rng.random::<f64>() * 2.0;
        let detections = visible
            .into_iter()
            .map(|(frame, exact, depth)| {
                let center = jitter(exact, &px_noise, &mut rng);
                let d = depth + depth_noise.map_or(0.0, |n| n.sample(&mut rng));
                let t = (frame as f64 - peak) / width;
                Detection {
                    query_id: obj.query_id,
                    frame_index: frame,
                    center,
                    depth: d.max(1e-3),
                    confidence: 0.15 + 0.8 * (-t * t).exp(),
                }
            })
            .collect();
        out.push(QueryDetections {
            query_id: obj.query_id,
            query_frame: obj.query_frame,
            detections,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject;

    #[test]
    fn scene_is_deterministic() {
        let c = SceneConfig::default();
        let a = generate_scene(&c, 7).unwrap();
        let b = generate_scene(&c, 7).unwrap();
        assert_eq!(a, b);
        let other = generate_scene(&c, 8).unwrap();
        assert_ne!(a.world_points, other.world_points);
    }

    #[test]
    fn default_scene_sees_scan_keypoints_everywhere() {
        let s = generate_scene(&SceneConfig::default(), 1).unwrap();
        assert_eq!(s.num_frames(), 20);
        for f in 0..20 {
            let n = s
                .scan_keypoints
                .iter()
                .filter(|&&id| s.observe(f, &s.world_points[id].position).is_some())
                .count();
            assert!(n >= 6, "frame {f} sees {n}");
        }
        for obj in &s.objects {
            assert!((0..20).any(|f| s.observe(f, &obj.center).is_some()));
        }
    }

    #[test]
    fn minimal_two_frame_scene() {
        let c = SceneConfig {
            num_frames: 2,
            num_points: 8,
            scan_keypoint_fraction: 1.0,
            ..SceneConfig::default()
        };
        let s = generate_scene(&c, 3).unwrap();
        assert_eq!(s.trajectory.len(), 2);
        for p in &s.trajectory {
            p.validate().unwrap();
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        for c in [
            SceneConfig {
                num_points: 0,
                ..SceneConfig::default()
            },
            SceneConfig {
                num_frames: 1,
                ..SceneConfig::default()
            },
            SceneConfig {
                sfm_failure_segment: Some([5, 30]),
                ..SceneConfig::default()
            },
        ] {
            assert!(matches!(
                generate_scene(&c, 0),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn zero_noise_tracks_are_exact() {
        let s = generate_scene(&SceneConfig::default(), 2).unwrap();
        let t = render_tracks(&s, &NoiseSpec::default()).unwrap();
        assert!(!t.observations.is_empty());
        for o in &t.observations {
            let (px, d) = s.observe(o.frame, s.point(o.point_id).unwrap()).unwrap();
            assert_eq!(px, o.pixel);
            assert_eq!(d, o.depth);
        }
        assert_eq!(t.injected_outlier_count(), 0);
        let mut keys: Vec<(usize, usize)> = t
            .observations
            .iter()
            .map(|o| (o.frame, o.point_id))
            .collect();
        let n = keys.len();
        keys.dedup();
        assert_eq!(keys.len(), n);
    }

    #[test]
    fn full_dropout_empties_tracks() {
        let s = generate_scene(&SceneConfig::default(), 2).unwrap();
        let noise = NoiseSpec {
            dropout_rate: 1.0,
            ..NoiseSpec::default()
        };
        assert!(render_tracks(&s, &noise).unwrap().is_empty());
    }

    #[test]
    fn outlier_fraction_matches_rate() {
        let c = SceneConfig {
            scan_keypoint_fraction: 1.0,
            ..SceneConfig::default()
        };
        let s = generate_scene(&c, 4).unwrap();
        let noise = NoiseSpec {
            outlier_rate: 0.3,
            seed: 99,
            ..NoiseSpec::default()
        };
        let t = render_tracks(&s, &noise).unwrap();
        assert!(t.matches.len() >= 1000);
        // Counting oracle: a match is wrong iff its 3D point does not project
        // onto its pixel under the true pose.
        let wrong = t
            .matches
            .iter()
            .filter(|m| {
                s.observe(m.frame, &m.point)
                    .is_none_or(|(px, _)| px.distance(&m.pixel) > 1e-9)
            })
            .count();
        assert_eq!(wrong, t.injected_outlier_count());
        let frac = wrong as f64 / t.matches.len() as f64;
        assert!((frac - 0.3).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn failure_segment_drops_tracks_only() {
        let c = SceneConfig {
            sfm_failure_segment: Some([8, 12]),
            ..SceneConfig::default()
        };
        let s = generate_scene(&c, 5).unwrap();
        let t = render_tracks(&s, &NoiseSpec::default()).unwrap();
        assert!(t.observations.iter().all(|o| !(8..=12).contains(&o.frame)));
        let by_frame = t.matches_by_frame(s.num_frames());
        assert!(by_frame[8..=12].iter().all(|m| m.len() >= 6));
    }

    #[test]
    fn zero_noise_detections_lift_to_truth() {
        let s = generate_scene(&SceneConfig::default(), 6).unwrap();
        let dets = make_detections(&s, &NoiseSpec::default()).unwrap();
        assert_eq!(dets.len(), s.objects.len());
        for (q, obj) in dets.iter().zip(&s.objects) {
            assert!(!q.detections.is_empty());
            for d in &q.detections {
                let (px, _) = s.observe(d.frame_index, &obj.center).unwrap();
                assert_eq!(px, d.center);
                assert!(d.confidence > 0.0 && d.confidence <= 1.0);
                let p = backproject(
                    &d.center,
                    d.depth,
                    &s.intrinsics,
                    &s.trajectory[d.frame_index],
                )
                .unwrap();
                assert!((p - obj.center).amax() < 1e-9);
            }
            let c: Vec<f64> = q.detections.iter().map(|d| d.confidence).collect();
            let strict_peak = (0..c.len())
                .any(|i| (i == 0 || c[i] > c[i - 1]) && (i + 1 == c.len() || c[i] > c[i + 1]));
            assert!(strict_peak);
        }
    }
}
