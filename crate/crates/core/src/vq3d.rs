//! Per-query 3D object predictions from 2D detections and camera poses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, Intrinsics, Pixel, Pose, PoseTable, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub query_id: u32,
    pub frame_index: usize,
    pub center: Pixel,
    pub depth: f64,
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth > 0.0) {
            return Err(Error::invalid("detection depth must be positive"));
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err(Error::invalid("detection confidence must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// All detections of one query, ordered by frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDetections {
    pub query_id: u32,
    pub query_frame: usize,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PredictionStatus {
    Ok,
    NoPose,
    NoDetection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: u32,
    pub query_frame: usize,
    pub status: PredictionStatus,
    pub object_world: Option<Vec3>,
    /// Object center minus the query-frame camera center, in world axes.
    pub displacement: Option<Vec3>,
    pub views_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictParams {
    pub min_prominence: f64,
}

impl Default for PredictParams {
    fn default() -> Self {
        Self {
            min_prominence: 0.1,
        }
    }
}

/// Frames at prominent strict local maxima of the confidence sequence.
///
/// Interior prominence is the height above the higher of the two flanking
/// minima, each taken over the stretch up to the next higher sample (or the
/// sequence end). End samples qualify when they exceed their only neighbor by
/// at least `min_prominence`. Without any qualifying peak the first global
/// maximum is returned. An empty input yields an empty list.
pub fn select_peak_frames(confidences: &[(usize, f64)], min_prominence: f64) -> Vec<usize> {
    let c: Vec<f64> = confidences.iter().map(|x| x.1).collect();
    let n = c.len();
    if n == 0 {
        return Vec::new();
    }
    let mut peaks = Vec::new();
    if n >= 2 {
        if c[0] - c[1] >= min_prominence && c[0] > c[1] {
            peaks.push(0);
        }
        for i in 1..n - 1 {
            if !(c[i] > c[i - 1] && c[i] > c[i + 1]) {
                continue;
            }
            let mut left_min = c[i];
            for j in (0..i).rev() {
                if c[j] > c[i] {
                    break;
                }
                left_min = left_min.min(c[j]);
            }
            let mut right_min = c[i];
            for &v in &c[i + 1..] {
                if v > c[i] {
                    break;
                }
                right_min = right_min.min(v);
            }
            if c[i] - left_min.max(right_min) >= min_prominence {
                peaks.push(i);
            }
        }
        if c[n - 1] - c[n - 2] >= min_prominence && c[n - 1] > c[n - 2] {
            peaks.push(n - 1);
        }
    }
    if peaks.is_empty() {
        let mut best = 0;
        for i in 1..n {
            if c[i] > c[best] {
                best = i;
            }
        }
        peaks.push(best);
    }
    peaks.into_iter().map(|i| confidences[i].0).collect()
}

pub fn lift_detection(det: &Detection, pose: Option<&Pose>, k: &Intrinsics) -> Result<Vec3> {
    let pose = pose.ok_or(Error::NoPose(det.frame_index))?;
    backproject(&det.center, det.depth, k, pose)
}

/// Confidence-weighted mean of lifted points.
pub fn aggregate_prediction(lifted: &[(Vec3, f64)]) -> Result<Vec3> {
    if lifted.is_empty() {
        return Err(Error::NoDetection("nothing to aggregate".into()));
    }
    let total: f64 = lifted.iter().map(|(_, c)| c).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("confidences must sum to a positive value"));
    }
    Ok(lifted
        .iter()
        .fold(Vec3::zeros(), |acc, (p, c)| acc + p * *c)
        / total)
}

pub fn predict_query(
    query: &QueryDetections,
    poses: &PoseTable,
    k: &Intrinsics,
    params: &PredictParams,
) -> Result<Prediction> {
    let mut pred = Prediction {
        query_id: query.query_id,
        query_frame: query.query_frame,
        status: PredictionStatus::NoPose,
        object_world: None,
        displacement: None,
        views_used: 0,
    };
    let Some(query_pose) = poses.pose(query.query_frame) else {
        return Ok(pred);
    };
    let mut dets = query.detections.clone();
    dets.sort_by_key(|d| d.frame_index);
    for d in &dets {
        d.validate()?;
    }
    let series: Vec<(usize, f64)> = dets.iter().map(|d| (d.frame_index, d.confidence)).collect();
    let peaks = select_peak_frames(&series, params.min_prominence);
    let mut chosen: Vec<&Detection> = dets
        .iter()
        .filter(|d| peaks.contains(&d.frame_index) && poses.contains(d.frame_index))
        .collect();
    if chosen.is_empty() {
        // No peak has a pose: fall back to the most confident posed detection.
        let mut best: Option<&Detection> = None;
        for d in dets.iter().filter(|d| poses.contains(d.frame_index)) {
            if best.is_none_or(|b| d.confidence > b.confidence) {
                best = Some(d);
            }
        }
        chosen.extend(best);
    }
    if chosen.is_empty() {
        pred.status = PredictionStatus::NoDetection;
        return Ok(pred);
    }
    let lifted = chosen
        .iter()
        .map(|d| {
            Ok((
                lift_detection(d, poses.pose(d.frame_index), k)?,
                d.confidence,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let object = aggregate_prediction(&lifted)?;
    pred.status = PredictionStatus::Ok;
    pred.object_world = Some(object);
    pred.displacement = Some(object - query_pose.center());
    pred.views_used = lifted.len();
    Ok(pred)
}

pub fn predict_all(
    queries: &[QueryDetections],
    poses: &PoseTable,
    k: &Intrinsics,
    params: &PredictParams,
) -> Result<Vec<Prediction>> {
    queries
        .iter()
        .map(|q| predict_query(q, poses, k, params))
        .collect()
}
