//! On-disk formats.
//!
//! Tables (poses, tracks, matches, landmarks) are comma-separated text with a
//! versioned `# hybridloc-<kind> v1` header line followed by a column line.
//! Floats are written with 17 significant digits so they parse back to the
//! identical bits. Nested documents (scene, detections, ground truth,
//! predictions, reports) are JSON whose first key is `schema`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::QueryTruth;
use crate::geometry::{Intrinsics, Mat3, Pixel, Pose, PoseTable, Provenance, Vec3};
use crate::sfm::ReconstructionMap;
use crate::synthworld::{Observation, QueryObject, ScanMatch, SceneTruth, WorldPoint};
use crate::vq3d::QueryDetections;

pub const POSES_HEADER: &str = "# hybridloc-poses v1";
pub const TRACKS_HEADER: &str = "# hybridloc-tracks v1";
pub const MATCHES_HEADER: &str = "# hybridloc-matches v1";
pub const LANDMARKS_HEADER: &str = "# hybridloc-landmarks v1";

const POSE_COLUMNS: &str = "frame,provenance,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz";
const TRACK_COLUMNS: &str = "frame,point_id,u,v,depth";
const MATCH_COLUMNS: &str = "frame,point_id,u,v,x,y,z";
const LANDMARK_COLUMNS: &str = "point_id,x,y,z";

/// 17 significant digits.
fn f(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Data rows of a table file after checking its header and column lines.
fn table_rows<'a>(
    path: &Path,
    text: &'a str,
    header: &str,
    columns: &str,
) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => {
            return Err(Error::parse(
                path,
                format!("expected header '{header}', found '{h}'"),
            ))
        }
        None => return Err(Error::parse(path, "empty file")),
    }
    match lines.next() {
        Some((_, c)) if c.trim() == columns => {}
        _ => {
            return Err(Error::parse(
                path,
                format!("expected column line '{columns}'"),
            ))
        }
    }
    let n_cols = columns.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n_cols {
            return Err(Error::parse(
                path,
                format!(
                    "line {}: expected {n_cols} fields, found {}",
                    i + 1,
                    fields.len()
                ),
            ));
        }
        rows.push((i + 1, fields));
    }
    Ok(rows)
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}: bad {what} '{field}'")))
}

fn finite(path: &Path, line: usize, field: &str) -> Result<f64> {
    let x: f64 = num(path, line, field, "number")?;
    if !x.is_finite() {
        return Err(Error::parse(
            path,
            format!("line {line}: non-finite value '{field}'"),
        ));
    }
    Ok(x)
}

pub fn format_poses(table: &PoseTable) -> String {
    let mut s = format!("{POSES_HEADER}\n{POSE_COLUMNS}\n");
    for (frame, e) in table.iter() {
        let r = &e.pose.rotation;
        let t = &e.pose.translation;
        let _ = write!(s, "{frame},{}", e.provenance);
        for i in 0..3 {
            for j in 0..3 {
                let _ = write!(s, ",{}", f(r[(i, j)]));
            }
        }
        let _ = writeln!(s, ",{},{},{}", f(t.x), f(t.y), f(t.z));
    }
    s
}

pub fn parse_poses(path: &Path, text: &str) -> Result<PoseTable> {
    let mut table = PoseTable::new();
    for (line, fields) in table_rows(path, text, POSES_HEADER, POSE_COLUMNS)? {
        let frame: usize = num(path, line, fields[0], "frame index")?;
        let provenance: Provenance = fields[1]
            .parse()
            .map_err(|e: Error| Error::parse(path, format!("line {line}: {e}")))?;
        let vals = fields[2..]
            .iter()
            .map(|x| finite(path, line, x))
            .collect::<Result<Vec<f64>>>()?;
        let pose = Pose::new(
            Mat3::from_row_slice(&vals[..9]),
            Vec3::new(vals[9], vals[10], vals[11]),
        )
        .map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        if table.contains(frame) {
            return Err(Error::parse(
                path,
                format!("line {line}: duplicate frame {frame}"),
            ));
        }
        table.insert(frame, pose, provenance);
    }
    Ok(table)
}

pub fn format_tracks(observations: &[Observation]) -> String {
    let mut s = format!("{TRACKS_HEADER}\n{TRACK_COLUMNS}\n");
    for o in observations {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            o.frame,
            o.point_id,
            f(o.pixel.u),
            f(o.pixel.v),
            f(o.depth)
        );
    }
    s
}

pub fn parse_tracks(path: &Path, text: &str) -> Result<Vec<Observation>> {
    table_rows(path, text, TRACKS_HEADER, TRACK_COLUMNS)?
        .into_iter()
        .map(|(line, r)| {
            Ok(Observation {
                frame: num(path, line, r[0], "frame index")?,
                point_id: num(path, line, r[1], "point id")?,
                pixel: Pixel::new(finite(path, line, r[2])?, finite(path, line, r[3])?),
                depth: finite(path, line, r[4])?,
            })
        })
        .collect()
}

pub fn format_matches(matches: &[ScanMatch]) -> String {
    let mut s = format!("{MATCHES_HEADER}\n{MATCH_COLUMNS}\n");
    for m in matches {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.frame,
            m.point_id,
            f(m.pixel.u),
            f(m.pixel.v),
            f(m.point.x),
            f(m.point.y),
            f(m.point.z)
        );
    }
    s
}

pub fn parse_matches(path: &Path, text: &str) -> Result<Vec<ScanMatch>> {
    table_rows(path, text, MATCHES_HEADER, MATCH_COLUMNS)?
        .into_iter()
        .map(|(line, r)| {
            Ok(ScanMatch {
                frame: num(path, line, r[0], "frame index")?,
                point_id: num(path, line, r[1], "point id")?,
                pixel: Pixel::new(finite(path, line, r[2])?, finite(path, line, r[3])?),
                point: Vec3::new(
                    finite(path, line, r[4])?,
                    finite(path, line, r[5])?,
                    finite(path, line, r[6])?,
                ),
            })
        })
        .collect()
}

pub fn format_landmarks(map: &ReconstructionMap) -> String {
    let mut s = format!("{LANDMARKS_HEADER}\n{LANDMARK_COLUMNS}\n");
    for (id, x) in &map.landmarks {
        let _ = writeln!(s, "{id},{},{},{}", f(x.x), f(x.y), f(x.z));
    }
    s
}

pub fn parse_landmarks(path: &Path, text: &str) -> Result<Vec<(usize, Vec3)>> {
    table_rows(path, text, LANDMARKS_HEADER, LANDMARK_COLUMNS)?
        .into_iter()
        .map(|(line, r)| {
            Ok((
                num(path, line, r[0], "point id")?,
                Vec3::new(
                    finite(path, line, r[1])?,
                    finite(path, line, r[2])?,
                    finite(path, line, r[3])?,
                ),
            ))
        })
        .collect()
}

/// JSON document with a leading schema tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub schema: String,
    #[serde(flatten)]
    pub body: T,
}

pub fn to_json<T: Serialize>(schema: &str, body: &T) -> String {
    let doc = Document {
        schema: schema.to_string(),
        body,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("serializable document");
    s.push('\n');
    s
}

pub fn from_json<T: DeserializeOwned>(path: &Path, schema: &str, text: &str) -> Result<T> {
    let doc: Document<T> =
        serde_json::from_str(text).map_err(|e| Error::parse(path, e.to_string()))?;
    if doc.schema != schema {
        return Err(Error::parse(
            path,
            format!("schema '{}' where '{schema}' was expected", doc.schema),
        ));
    }
    Ok(doc.body)
}

pub const SCENE_SCHEMA: &str = "hybridloc-scene/1";
pub const DETECTIONS_SCHEMA: &str = "hybridloc-detections/1";
pub const GROUND_TRUTH_SCHEMA: &str = "hybridloc-ground-truth/1";
pub const PREDICTIONS_SCHEMA: &str = "hybridloc-predictions/1";
pub const METRICS_SCHEMA: &str = "hybridloc-metrics/1";
pub const ALIGNMENT_SCHEMA: &str = "hybridloc-alignment/1";
pub const MANIFEST_SCHEMA: &str = "hybridloc-manifest/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn new(frame: usize, pose: &Pose) -> Self {
        let r = &pose.rotation;
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[(i, j)];
            }
        }
        Self {
            frame,
            rotation,
            translation: [pose.translation.x, pose.translation.y, pose.translation.z],
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::new(
            Mat3::from_row_slice(&self.rotation),
            Vec3::from(self.translation),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub intrinsics: Intrinsics,
    pub num_frames: usize,
    pub trajectory: Vec<PoseRecord>,
    pub world_points: Vec<WorldPoint>,
    pub scan_keypoints: Vec<usize>,
    pub objects: Vec<QueryObject>,
    pub sfm_failure_segment: Option<[usize; 2]>,
}

impl SceneFile {
    pub fn from_scene(scene: &SceneTruth) -> Self {
        Self {
            intrinsics: scene.intrinsics,
            num_frames: scene.num_frames(),
            trajectory: scene
                .trajectory
                .iter()
                .enumerate()
                .map(|(i, p)| PoseRecord::new(i, p))
                .collect(),
            world_points: scene.world_points.clone(),
            scan_keypoints: scene.scan_keypoints.clone(),
            objects: scene.objects.clone(),
            sfm_failure_segment: scene.sfm_failure_segment,
        }
    }

    pub fn into_scene(self, path: &Path) -> Result<SceneTruth> {
        if self.trajectory.len() != self.num_frames {
            return Err(Error::parse(
                path,
                "trajectory length differs from num_frames",
            ));
        }
        let trajectory = self
            .trajectory
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if r.frame != i {
                    return Err(Error::parse(
                        path,
                        format!("trajectory entry {i} has frame {}", r.frame),
                    ));
                }
                r.pose().map_err(|e| Error::parse(path, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.intrinsics
            .validate()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(SceneTruth {
            world_points: self.world_points,
            scan_keypoints: self.scan_keypoints,
            trajectory,
            intrinsics: self.intrinsics,
            objects: self.objects,
            sfm_failure_segment: self.sfm_failure_segment,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub queries: Vec<QueryDetections>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub queries: Vec<QueryTruth>,
}

pub fn ground_truth(scene: &SceneTruth) -> GroundTruthFile {
    GroundTruthFile {
        queries: scene
            .objects
            .iter()
            .map(|o| QueryTruth {
                query_id: o.query_id,
                query_frame: o.query_frame,
                object_center: o.center,
                query_camera_center: scene.trajectory[o.query_frame].center(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pose_table_round_trips_bit_exact(
            entries in proptest::collection::btree_map(
                0usize..500,
                (proptest::array::uniform3(-4.0f64..4.0), proptest::array::uniform3(-1e3f64..1e3), 0u8..4),
                0..20,
            )
        ) {
            let table: PoseTable = entries
                .iter()
                .map(|(&f, (w, t, p))| {
                    let prov = [Provenance::Sfm, Provenance::Pnp, Provenance::HybridSfm, Provenance::HybridPnp][*p as usize];
                    (f, Pose::from_parts(exp_so3(&Vec3::from(*w)), Vec3::from(*t)), prov)
                })
                .collect();
            let text = format_poses(&table);
            let back = parse_poses(Path::new("mem"), &text).unwrap();
            prop_assert_eq!(back, table);
        }

        #[test]
        fn tracks_round_trip_bit_exact(vals in proptest::collection::vec((0usize..50, 0usize..1000, -1e4f64..1e4, -1e4f64..1e4, 1e-3f64..1e3), 0..50)) {
            let obs: Vec<Observation> = vals.iter().map(|&(frame, point_id, u, v, depth)| Observation {
                frame, point_id, pixel: Pixel::new(u, v), depth,
            }).collect();
            let back = parse_tracks(Path::new("mem"), &format_tracks(&obs)).unwrap();
            prop_assert_eq!(back, obs);
        }
    }

    #[test]
    fn malformed_tables_name_the_file() {
        let p = Path::new("poses.csv");
        let err = parse_poses(p, "frame,provenance\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("poses.csv"), "{err}");
        let bad_row = format!("{POSES_HEADER}\n{POSE_COLUMNS}\n0,SFM,1,0,0\n");
        assert!(matches!(parse_poses(p, &bad_row), Err(Error::Parse { .. })));
        let not_rotation =
            format!("{POSES_HEADER}\n{POSE_COLUMNS}\n0,SFM,2,0,0,0,1,0,0,0,1,0,0,0\n");
        assert!(matches!(
            parse_poses(p, &not_rotation),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn json_schema_checked() {
        let doc = to_json(GROUND_TRUTH_SCHEMA, &GroundTruthFile { queries: vec![] });
        assert!(doc.starts_with("{\n  \"schema\": \"hybridloc-ground-truth/1\""));
        let back: GroundTruthFile =
            from_json(Path::new("gt.json"), GROUND_TRUTH_SCHEMA, &doc).unwrap();
        assert!(back.queries.is_empty());
        assert!(from_json::<GroundTruthFile>(Path::new("gt.json"), SCENE_SCHEMA, &doc).is_err());
    }
}
