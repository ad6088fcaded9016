//! Top-down (x, y) trajectory plot as a standalone SVG document.
//!
//! Output depends only on the inputs; coordinates are printed with fixed
//! precision so regenerating a plot is byte-for-byte stable.

use std::fmt::Write as _;

use crate::geometry::{Pose, PoseTable, Vec3};
use crate::synthworld::QueryObject;
use crate::vq3d::Prediction;

pub struct PlotInput<'a> {
    pub ground_truth: &'a [Pose],
    pub sfm_aligned: &'a PoseTable,
    pub pnp: &'a PoseTable,
    pub hybrid: &'a PoseTable,
    pub objects: &'a [QueryObject],
    pub predictions: &'a [Prediction],
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 560.0;
const MARGIN: f64 = 40.0;
const LEGEND_W: f64 = 200.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    dash: &'a str,
    width: f64,
    points: Vec<[f64; 2]>,
}

struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit(points: &[[f64; 2]]) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for i in 0..2 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        if points.is_empty() {
            min = [-1.0, -1.0];
            max = [1.0, 1.0];
        }
        let span_x = (max[0] - min[0]).max(1e-6);
        let span_y = (max[1] - min[1]).max(1e-6);
        let avail_w = WIDTH - LEGEND_W - 2.0 * MARGIN;
        let avail_h = HEIGHT - 2.0 * MARGIN;
        let scale = (avail_w / span_x).min(avail_h / span_y);
        // Center the data in the drawing area.
        let min = [
            min[0] - (avail_w / scale - span_x) / 2.0,
            min[1] - (avail_h / scale - span_y) / 2.0,
        ];
        Self { min, scale }
    }

    /// World (x, y) to SVG coordinates; y grows upward in the plot.
    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.min[0]) * self.scale,
            HEIGHT - MARGIN - (p[1] - self.min[1]) * self.scale,
        )
    }
}

fn xy(v: &Vec3) -> [f64; 2] {
    [v.x, v.y]
}

fn table_points(t: &PoseTable) -> Vec<[f64; 2]> {
    t.iter().map(|(_, e)| xy(&e.pose.center())).collect()
}

fn fmt_num(x: f64) -> String {
    // Avoid "-0.00".
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

pub fn render_svg(input: &PlotInput<'_>) -> String {
    let series = [
        Series {
            label: "ground truth",
            color: "#222222",
            dash: "",
            width: 3.0,
            points: input.ground_truth.iter().map(|p| xy(&p.center())).collect(),
        },
        Series {
            label: "SfM (aligned)",
            color: "#1f77b4",
            dash: "6 3",
            width: 2.0,
            points: table_points(input.sfm_aligned),
        },
        Series {
            label: "PnP",
            color: "#ff7f0e",
            dash: "2 3",
            width: 2.0,
            points: table_points(input.pnp),
        },
        Series {
            label: "hybrid",
            color: "#2ca02c",
            dash: "",
            width: 1.5,
            points: table_points(input.hybrid),
        },
    ];
    let objects: Vec<[f64; 2]> = input.objects.iter().map(|o| xy(&o.center)).collect();
    let predicted: Vec<[f64; 2]> = input
        .predictions
        .iter()
        .filter_map(|p| p.object_world.as_ref().map(xy))
        .collect();

    let all: Vec<[f64; 2]> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .chain(objects.iter().copied())
        .chain(predicted.iter().copied())
        .collect();
    let frame = Frame::fit(&all);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, "<title>Top-down camera trajectories</title>");
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );

    for s in &series {
        if s.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|p| {
                let (x, y) = frame.map(*p);
                format!("{},{}", fmt_num(x), fmt_num(y))
            })
            .collect();
        let dash = if s.dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{}""#, s.dash)
        };
        let _ = writeln!(
            svg,
            r#"<polyline class="trajectory" data-label="{}" fill="none" stroke="{}" stroke-width="{}"{} points="{}"/>"#,
            s.label,
            s.color,
            s.width,
            dash,
            pts.join(" ")
        );
    }
    for p in &objects {
        let (x, y) = frame.map(*p);
        let _ = writeln!(
            svg,
            r##"<circle class="object-gt" cx="{}" cy="{}" r="6" fill="none" stroke="#d62728" stroke-width="2"/>"##,
            fmt_num(x),
            fmt_num(y)
        );
    }
    for p in &predicted {
        let (x, y) = frame.map(*p);
        let (x0, x1, y0, y1) = (x - 5.0, x + 5.0, y - 5.0, y + 5.0);
        let _ = writeln!(
            svg,
            r##"<path class="object-pred" d="M{} {} L{} {} M{} {} L{} {}" stroke="#9467bd" stroke-width="2"/>"##,
            fmt_num(x0),
            fmt_num(y0),
            fmt_num(x1),
            fmt_num(y1),
            fmt_num(x0),
            fmt_num(y1),
            fmt_num(x1),
            fmt_num(y0)
        );
    }

    // Legend with pose counts; empty series are called out explicitly.
    let lx = WIDTH - LEGEND_W + 10.0;
    let mut ly = MARGIN;
    let _ = writeln!(
        svg,
        r#"<g class="legend" font-family="sans-serif" font-size="12">"#
    );
    for s in &series {
        let note = if s.points.is_empty() {
            format!("{} (0 poses)", s.label)
        } else {
            format!("{} ({} poses)", s.label, s.points.len())
        };
        let dash = if s.dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{}""#, s.dash)
        };
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="{}"{dash}/>"#,
            lx + 30.0,
            s.color,
            s.width
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{note}</text>"#,
            lx + 36.0,
            ly + 4.0
        );
        ly += 20.0;
    }
    let _ = writeln!(
        svg,
        r##"<circle cx="{}" cy="{ly}" r="6" fill="none" stroke="#d62728" stroke-width="2"/>"##,
        lx + 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">object truth ({})</text>"#,
        lx + 36.0,
        ly + 4.0,
        objects.len()
    );
    ly += 20.0;
    let _ = writeln!(
        svg,
        r##"<path d="M{} {} L{} {} M{} {} L{} {}" stroke="#9467bd" stroke-width="2"/>"##,
        lx + 10.0,
        ly - 5.0,
        lx + 20.0,
        ly + 5.0,
        lx + 10.0,
        ly + 5.0,
        lx + 20.0,
        ly - 5.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">prediction ({})</text>"#,
        lx + 36.0,
        ly + 4.0,
        predicted.len()
    );
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, "</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_inputs_render_and_note_zero_poses() {
        let empty = PoseTable::default();
        let svg = render_svg(&PlotInput {
            ground_truth: &[],
            sfm_aligned: &empty,
            pnp: &empty,
            hybrid: &empty,
            objects: &[],
            predictions: &[],
        });
        assert!(svg.contains("hybrid (0 poses)"));
        assert!(!svg.contains("NaN"));
        assert!(!svg.contains("polyline"));
    }
}
