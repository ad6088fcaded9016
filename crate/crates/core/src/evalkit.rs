//! Query-level metrics: Succ, Succ*, L2, Angle and QwP.
//!
//! A query succeeds when it has a prediction whose object center lies within
//! `tau_l2` of the truth and whose displacement direction lies within
//! `tau_angle` of the true displacement (both inclusive). Succ is taken over
//! all queries, Succ* over queries whose query frame has a pose, and QwP is
//! the share of queries with a pose, so `Succ = Succ* * QwP / 100`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::vq3d::{Prediction, PredictionStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub tau_l2: f64,
    pub tau_angle: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_l2: 6.0,
            tau_angle: std::f64::consts::FRAC_PI_6,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_l2 > 0.0 && self.tau_angle > 0.0) {
            return Err(Error::invalid("success thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub query_id: u32,
    pub query_frame: usize,
    pub object_center: Vec3,
    pub query_camera_center: Vec3,
}

impl QueryTruth {
    pub fn displacement(&self) -> Vec3 {
        self.object_center - self.query_camera_center
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u32,
    pub has_pose: bool,
    pub has_prediction: bool,
    pub l2_error: Option<f64>,
    pub angle_error: Option<f64>,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub total: usize,
    pub with_pose: usize,
    pub with_prediction: usize,
    pub successes: usize,
    /// Predicted queries whose angle was undefined (zero-length displacement).
    pub undefined_angle: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub succ_pct: f64,
    pub succ_star_pct: f64,
    pub mean_l2: f64,
    pub mean_angle: f64,
    pub qwp_pct: f64,
    pub counts: MetricCounts,
}

impl MetricsReport {
    /// `Succ = Succ* x QwP / 100`, checked in exact integer arithmetic on the
    /// counts the percentages are derived from.
    pub fn satisfies_success_identity(&self) -> bool {
        let c = &self.counts;
        // s/t = (s/p)(p/t) holds exactly whenever p > 0; with p = 0 Succ* is
        // defined as 0, so s must be 0 as well.
        c.successes <= c.with_pose
            && c.with_pose <= c.total
            && (c.with_pose > 0 || c.successes == 0)
    }

    /// The identity on the stored floating-point percentages.
    pub fn identity_gap(&self) -> f64 {
        (self.succ_pct - self.succ_star_pct * self.qwp_pct / 100.0).abs()
    }
}

pub fn l2_error(pred: &Vec3, gt: &Vec3) -> f64 {
    (pred - gt).norm()
}

pub fn angle_error(pred_disp: &Vec3, gt_disp: &Vec3) -> Result<f64> {
    let (a, b) = (pred_disp.norm(), gt_disp.norm());
    if a == 0.0 || b == 0.0 {
        return Err(Error::UndefinedAngle);
    }
    // atan2 keeps precision near 0 and pi, where acos of the cosine does not.
    Ok(pred_disp
        .cross(gt_disp)
        .norm()
        .atan2(pred_disp.dot(gt_disp)))
}

pub fn evaluate_query(
    pred: &Prediction,
    truth: &QueryTruth,
    thr: &Thresholds,
) -> Result<QueryRecord> {
    if pred.query_id != truth.query_id {
        return Err(Error::invalid(format!(
            "prediction for query {} paired with truth for query {}",
            pred.query_id, truth.query_id
        )));
    }
    let has_pose = pred.status != PredictionStatus::NoPose;
    let mut rec = QueryRecord {
        query_id: pred.query_id,
        has_pose,
        has_prediction: false,
        l2_error: None,
        angle_error: None,
        success: false,
    };
    if let (PredictionStatus::Ok, Some(obj), Some(disp)) =
        (pred.status, pred.object_world, pred.displacement)
    {
        rec.has_prediction = true;
        let l2 = l2_error(&obj, &truth.object_center);
        rec.l2_error = Some(l2);
        rec.angle_error = angle_error(&disp, &truth.displacement()).ok();
        rec.success = l2 <= thr.tau_l2 && rec.angle_error.is_some_and(|a| a <= thr.tau_angle);
    }
    Ok(rec)
}

pub fn aggregate_metrics(records: &[QueryRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::invalid("no query records to aggregate"));
    }
    let mut counts = MetricCounts {
        total: records.len(),
        with_pose: 0,
        with_prediction: 0,
        successes: 0,
        undefined_angle: 0,
    };
    let (mut l2_sum, mut l2_n, mut ang_sum, mut ang_n) = (0.0, 0usize, 0.0, 0usize);
    for r in records {
        counts.with_pose += r.has_pose as usize;
        counts.with_prediction += r.has_prediction as usize;
        counts.successes += r.success as usize;
        if let Some(e) = r.l2_error {
            l2_sum += e;
            l2_n += 1;
        }
        match r.angle_error {
            Some(a) => {
                ang_sum += a;
                ang_n += 1;
            }
            None if r.has_prediction => counts.undefined_angle += 1,
            None => {}
        }
    }
    let pct = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(MetricsReport {
        succ_pct: pct(counts.successes, counts.total),
        succ_star_pct: pct(counts.successes, counts.with_pose),
        mean_l2: mean(l2_sum, l2_n),
        mean_angle: mean(ang_sum, ang_n),
        qwp_pct: pct(counts.with_pose, counts.total),
        counts,
    })
}

/// Pairs predictions with truth by query id and evaluates each.
pub fn evaluate_all(
    predictions: &[Prediction],
    truth: &[QueryTruth],
    thr: &Thresholds,
) -> Result<Vec<QueryRecord>> {
    thr.validate()?;
    truth
        .iter()
        .map(|t| {
            let pred = predictions
                .iter()
                .find(|p| p.query_id == t.query_id)
                .cloned()
                .unwrap_or(Prediction {
                    query_id: t.query_id,
                    query_frame: t.query_frame,
                    status: PredictionStatus::NoPose,
                    object_world: None,
                    displacement: None,
                    views_used: 0,
                });
            evaluate_query(&pred, t, thr)
        })
        .collect()
}

pub const TABLE_HEADER: [&str; 6] = ["Method", "Succ%", "Succ*%", "L2", "Angle", "QwP%"];

/// Fixed-width text table in the column order Succ, Succ*, L2, Angle, QwP.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(std::iter::once(TABLE_HEADER[0].len()))
        .max()
        .unwrap_or(6);
    let mut out = format!("{:<name_w$}", TABLE_HEADER[0]);
    for h in &TABLE_HEADER[1..] {
        out.push_str(&format!(" {h:>8}"));
    }
    out.push('\n');
    for (name, m) in rows {
        out.push_str(&format!(
            "{name:<name_w$} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            m.succ_pct, m.succ_star_pct, m.mean_l2, m.mean_angle, m.qwp_pct
        ));
    }
    out
}
