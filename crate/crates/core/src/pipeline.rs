//! Stage orchestration behind the command-line tool.
//!
//! Every stage reads its inputs from files, writes its outputs into the
//! output directory and refreshes `manifest.json`. Stages never share state
//! in memory, so each one can be re-run on its own.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::{
    aggregate_metrics, evaluate_all, format_table, MetricsReport, QueryRecord, Thresholds,
};
use crate::fuse::{align_sfm_to_scan, union_poses, AlignmentReport, Preference, UnionPolicy};
use crate::geometry::{PoseTable, Provenance};
use crate::io::{self, DetectionsFile, GroundTruthFile, SceneFile};
use crate::plot::{render_svg, PlotInput};
use crate::pnp::{relocalize_frames, Correspondence2D3D, RansacParams};
use crate::sfm::{run_incremental_sfm, SfmParams};
use crate::synthworld::{
    generate_scene, group_matches, make_detections, render_tracks, NoiseSpec, SceneConfig,
    SceneTruth,
};
use crate::vq3d::{predict_all, PredictParams, Prediction, PredictionStatus};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default file names inside the output directory.
pub mod files {
    pub const SCENE: &str = "scene.json";
    pub const TRACKS: &str = "tracks.csv";
    pub const MATCHES: &str = "matches.csv";
    pub const DETECTIONS: &str = "detections.json";
    pub const GROUND_TRUTH: &str = "ground_truth.json";
    pub const POSES_SFM: &str = "poses_sfm.csv";
    pub const LANDMARKS: &str = "landmarks.csv";
    pub const POSES_PNP: &str = "poses_pnp.csv";
    pub const ALIGNMENT: &str = "alignment.json";
    pub const POSES_SFM_ALIGNED: &str = "poses_sfm_aligned.csv";
    pub const POSES_HYBRID: &str = "poses_hybrid.csv";
    pub const COMPARISON: &str = "comparison.txt";
    pub const PLOT: &str = "trajectory.svg";
    pub const MANIFEST: &str = "manifest.json";
}

/// Which pose table drives prediction and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Hybrid,
    SfmOnly,
    PnpOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Hybrid, Ablation::SfmOnly, Ablation::PnpOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Hybrid => "hybrid",
            Ablation::SfmOnly => "sfm-only",
            Ablation::PnpOnly => "pnp-only",
        }
    }

    fn poses_file(self) -> &'static str {
        match self {
            Ablation::Hybrid => files::POSES_HYBRID,
            Ablation::SfmOnly => files::POSES_SFM_ALIGNED,
            Ablation::PnpOnly => files::POSES_PNP,
        }
    }

    pub fn predictions_file(self) -> String {
        format!("predictions_{}.json", self.file_tag())
    }

    pub fn metrics_file(self) -> String {
        format!("metrics_{}.json", self.file_tag())
    }

    pub fn metrics_table_file(self) -> String {
        format!("metrics_{}.txt", self.file_tag())
    }

    fn file_tag(self) -> &'static str {
        match self {
            Ablation::Hybrid => "hybrid",
            Ablation::SfmOnly => "sfm_only",
            Ablation::PnpOnly => "pnp_only",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown ablation '{s}' (expected hybrid, sfm-only or pnp-only)"
                ))
            })
    }
}

impl FromStr for Preference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefer-sfm" => Ok(Preference::PreferSfm),
            "prefer-pnp" => Ok(Preference::PreferPnp),
            _ => Err(Error::invalid(format!(
                "unknown policy '{s}' (expected prefer-sfm or prefer-pnp)"
            ))),
        }
    }
}

/// Optional locations for the synthesized inputs. Unset entries live in the
/// output directory under their default names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub scene: Option<PathBuf>,
    pub tracks: Option<PathBuf>,
    pub matches: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every stage derives its own seed from it.
    pub seed: u64,
    /// Not part of the manifest snapshot, so relocating a run does not
    /// change its artifacts.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub paths: InputPaths,
    pub scene: SceneConfig,
    /// `noise.seed` is replaced by the derived synth seed.
    pub noise: NoiseSpec,
    /// Relocalization RANSAC; `ransac.seed` is replaced by the derived seed.
    pub ransac: RansacParams,
    /// Incremental SfM, including its own registration RANSAC and BA settings.
    pub sfm: SfmParams,
    pub union: UnionPolicy,
    pub thresholds: Thresholds,
    pub predict: PredictParams,
    /// Store wall-clock stage timings in the manifest. Off by default because
    /// timings make artifacts differ between otherwise identical runs.
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            paths: InputPaths::default(),
            scene: SceneConfig::default(),
            noise: NoiseSpec::default(),
            ransac: RansacParams::default(),
            sfm: SfmParams::default(),
            union: UnionPolicy::default(),
            thresholds: Thresholds::default(),
            predict: PredictParams::default(),
            record_timings: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&io::read_file(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.ransac.validate()?;
        self.sfm.ransac.validate()?;
        self.sfm.ba.validate()?;
        self.union.validate()?;
        self.thresholds.validate()?;
        if !(self.predict.min_prominence >= 0.0) {
            return Err(Error::invalid(
                "predict.min_prominence must be non-negative",
            ));
        }
        Ok(())
    }

    /// Name relative to the output directory, or the full path for inputs
    /// stored elsewhere.
    pub fn artifact_name(&self, path: &Path) -> String {
        path.strip_prefix(&self.out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn input(&self, chosen: &Option<PathBuf>, default: &str) -> PathBuf {
        chosen.clone().unwrap_or_else(|| self.out(default))
    }

    pub fn scene_path(&self) -> PathBuf {
        self.input(&self.paths.scene, files::SCENE)
    }

    pub fn tracks_path(&self) -> PathBuf {
        self.input(&self.paths.tracks, files::TRACKS)
    }

    pub fn matches_path(&self) -> PathBuf {
        self.input(&self.paths.matches, files::MATCHES)
    }

    pub fn detections_path(&self) -> PathBuf {
        self.input(&self.paths.detections, files::DETECTIONS)
    }

    pub fn ground_truth_path(&self) -> PathBuf {
        self.input(&self.paths.ground_truth, files::GROUND_TRUTH)
    }

    /// Seed for a named stage: the first eight bytes (little endian) of
    /// SHA-256 over the label, a zero byte and the global seed.
    pub fn stage_seed(&self, label: &str) -> u64 {
        stage_seed(self.seed, label)
    }
}

pub fn stage_seed(global: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(global.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub stages: BTreeMap<String, StageRecord>,
    /// Pose counts in the emitted tables: SFM, PNP, HYBRID, and the hybrid
    /// split by source.
    pub pose_coverage: BTreeMap<String, usize>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub ablation: Ablation,
    pub poses: String,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub ablation: Ablation,
    pub thresholds: Thresholds,
    pub report: MetricsReport,
    pub records: Vec<QueryRecord>,
}

fn require(path: &Path, artifact: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::StageDependency {
            artifact: artifact.to_string(),
            path: path.to_path_buf(),
        })
    }
}

fn read_scene(config: &PipelineConfig) -> Result<SceneTruth> {
    let path = config.scene_path();
    require(&path, "scene")?;
    let file: SceneFile = io::from_json(&path, io::SCENE_SCHEMA, &io::read_file(&path)?)?;
    file.into_scene(&path)
}

fn read_poses(path: &Path, artifact: &str) -> Result<PoseTable> {
    require(path, artifact)?;
    io::parse_poses(path, &io::read_file(path)?)
}

fn read_json<T: serde::de::DeserializeOwned>(
    path: &Path,
    artifact: &str,
    schema: &str,
) -> Result<T> {
    require(path, artifact)?;
    io::from_json(path, schema, &io::read_file(path)?)
}

/// Runs `body`, then records its outputs in the manifest.
fn stage<F>(config: &PipelineConfig, name: &str, body: F) -> Result<Vec<String>>
where
    F: FnOnce() -> Result<Vec<String>>,
{
    config.validate()?;
    log::info!("stage {name}");
    let start = Instant::now();
    let outputs = body()?;
    let seconds = config.record_timings.then(|| start.elapsed().as_secs_f64());
    update_manifest(config, name, &outputs, seconds)?;
    Ok(outputs)
}

fn write(config: &PipelineConfig, name: &str, contents: &str) -> Result<String> {
    io::write_file(&config.out(name), contents)?;
    Ok(name.to_string())
}

pub fn cmd_synth(config: &PipelineConfig) -> Result<Vec<String>> {
    stage(config, "synth", || {
        let scene = generate_scene(&config.scene, config.stage_seed("synth/scene"))?;
        let noise = NoiseSpec {
            seed: config.stage_seed("synth/noise"),
            ..config.noise
        };
        let tracks = render_tracks(&scene, &noise)?;
        let detections = make_detections(&scene, &noise)?;
        let outputs = [
            (
                config.scene_path(),
                io::to_json(io::SCENE_SCHEMA, &SceneFile::from_scene(&scene)),
            ),
            (
                config.tracks_path(),
                io::format_tracks(&tracks.observations),
            ),
            (config.matches_path(), io::format_matches(&tracks.matches)),
            (
                config.detections_path(),
                io::to_json(
                    io::DETECTIONS_SCHEMA,
                    &DetectionsFile {
                        queries: detections,
                    },
                ),
            ),
            (
                config.ground_truth_path(),
                io::to_json(io::GROUND_TRUTH_SCHEMA, &io::ground_truth(&scene)),
            ),
        ];
        let mut names = Vec::new();
        for (path, text) in outputs {
            io::write_file(&path, &text)?;
            names.push(config.artifact_name(&path));
        }
        log::info!(
            "scene: {} frames, {} points, {} tracks observations, {} scan matches",
            scene.num_frames(),
            scene.world_points.len(),
            tracks.observations.len(),
            tracks.matches.len()
        );
        Ok(names)
    })
}

pub fn cmd_sfm(config: &PipelineConfig) -> Result<Vec<String>> {
    stage(config, "sfm", || {
        let scene = read_scene(config)?;
        let tracks_path = config.tracks_path();
        require(&tracks_path, "tracks")?;
        let observations = io::parse_tracks(&tracks_path, &io::read_file(&tracks_path)?)?;
        let mut params = config.sfm;
        params.ransac.seed = config.stage_seed("sfm");
        let map = run_incremental_sfm(
            &observations,
            &scene.intrinsics,
            scene.num_frames(),
            &params,
        )?;
        log::info!(
            "sfm registered {}/{} frames with {} landmarks",
            map.poses.len(),
            scene.num_frames(),
            map.landmarks.len()
        );
        Ok(vec![
            write(config, files::POSES_SFM, &io::format_poses(&map.poses))?,
            write(config, files::LANDMARKS, &io::format_landmarks(&map))?,
        ])
    })
}

pub fn cmd_reloc(config: &PipelineConfig) -> Result<Vec<String>> {
    stage(config, "reloc", || {
        let scene = read_scene(config)?;
        let matches_path = config.matches_path();
        require(&matches_path, "matches")?;
        let matches = io::parse_matches(&matches_path, &io::read_file(&matches_path)?)?;
        for m in &matches {
            if m.frame >= scene.num_frames() {
                return Err(Error::parse(
                    &matches_path,
                    format!(
                        "match frame {} outside the {}-frame sequence",
                        m.frame,
                        scene.num_frames()
                    ),
                ));
            }
        }
        let per_frame: Vec<Vec<Correspondence2D3D>> = group_matches(&matches, scene.num_frames())
            .into_iter()
            .map(|ms| {
                ms.into_iter()
                    .map(|m| Correspondence2D3D {
                        pixel: m.pixel,
                        point: m.point,
                        point_id: m.point_id,
                    })
                    .collect()
            })
            .collect();
        let params = RansacParams {
            seed: config.stage_seed("reloc"),
            ..config.ransac
        };
        let table = relocalize_frames(&per_frame, &scene.intrinsics, &params)?;
        log::info!("relocalized {}/{} frames", table.len(), scene.num_frames());
        Ok(vec![write(
            config,
            files::POSES_PNP,
            &io::format_poses(&table),
        )?])
    })
}

pub fn cmd_fuse(config: &PipelineConfig) -> Result<Vec<String>> {
    stage(config, "fuse", || {
        let sfm = read_poses(&config.out(files::POSES_SFM), "SfM poses")?;
        let pnp = read_poses(&config.out(files::POSES_PNP), "PnP poses")?;
        let (aligned, report): (PoseTable, AlignmentReport) = align_sfm_to_scan(&sfm, &pnp)?;
        let hybrid = union_poses(&aligned, &pnp, &config.union)?;
        log::info!(
            "alignment scale {:.6}, rms {:.3e}; hybrid covers {} frames",
            report.scale,
            report.rms_center_residual,
            hybrid.len()
        );
        Ok(vec![
            write(
                config,
                files::ALIGNMENT,
                &io::to_json(io::ALIGNMENT_SCHEMA, &report),
            )?,
            write(
                config,
                files::POSES_SFM_ALIGNED,
                &io::format_poses(&aligned),
            )?,
            write(config, files::POSES_HYBRID, &io::format_poses(&hybrid))?,
        ])
    })
}

pub fn cmd_predict(config: &PipelineConfig, ablation: Ablation) -> Result<Vec<String>> {
    stage(config, &format!("predict:{ablation}"), || {
        let scene = read_scene(config)?;
        let detections: DetectionsFile = read_json(
            &config.detections_path(),
            "detections",
            io::DETECTIONS_SCHEMA,
        )?;
        let poses = read_poses(
            &config.out(ablation.poses_file()),
            &format!("{ablation} poses"),
        )?;
        let predictions = predict_all(
            &detections.queries,
            &poses,
            &scene.intrinsics,
            &config.predict,
        )?;
        let ok = predictions
            .iter()
            .filter(|p| p.status == PredictionStatus::Ok)
            .count();
        log::info!("{ablation}: {ok}/{} queries predicted", predictions.len());
        let file = PredictionsFile {
            ablation,
            poses: ablation.poses_file().to_string(),
            predictions,
        };
        Ok(vec![write(
            config,
            &ablation.predictions_file(),
            &io::to_json(io::PREDICTIONS_SCHEMA, &file),
        )?])
    })
}

pub fn cmd_eval(config: &PipelineConfig, ablation: Ablation) -> Result<Vec<String>> {
    stage(config, &format!("eval:{ablation}"), || {
        let preds: PredictionsFile = read_json(
            &config.out(&ablation.predictions_file()),
            &format!("{ablation} predictions"),
            io::PREDICTIONS_SCHEMA,
        )?;
        let truth: GroundTruthFile = read_json(
            &config.ground_truth_path(),
            "ground truth",
            io::GROUND_TRUTH_SCHEMA,
        )?;
        let records = evaluate_all(&preds.predictions, &truth.queries, &config.thresholds)?;
        let report = aggregate_metrics(&records)?;
        log::info!(
            "{ablation}: Succ {:.2}% Succ* {:.2}% QwP {:.2}%",
            report.succ_pct,
            report.succ_star_pct,
            report.qwp_pct
        );
        let table = format_table(&[(ablation.as_str(), &report)]);
        let file = MetricsFile {
            ablation,
            thresholds: config.thresholds,
            report,
            records,
        };
        Ok(vec![
            write(
                config,
                &ablation.metrics_file(),
                &io::to_json(io::METRICS_SCHEMA, &file),
            )?,
            write(config, &ablation.metrics_table_file(), &table)?,
        ])
    })
}

pub fn read_metrics(config: &PipelineConfig, ablation: Ablation) -> Result<MetricsFile> {
    read_json(
        &config.out(&ablation.metrics_file()),
        &format!("{ablation} metrics"),
        io::METRICS_SCHEMA,
    )
}

pub fn cmd_plot(config: &PipelineConfig) -> Result<Vec<String>> {
    stage(config, "plot", || {
        let scene = read_scene(config)?;
        let sfm = read_poses(&config.out(files::POSES_SFM_ALIGNED), "aligned SfM poses")?;
        let pnp = read_poses(&config.out(files::POSES_PNP), "PnP poses")?;
        let hybrid = read_poses(&config.out(files::POSES_HYBRID), "hybrid poses")?;
        // Predictions are optional decorations.
        let pred_path = config.out(&Ablation::Hybrid.predictions_file());
        let predictions = if pred_path.is_file() {
            read_json::<PredictionsFile>(&pred_path, "hybrid predictions", io::PREDICTIONS_SCHEMA)?
                .predictions
        } else {
            Vec::new()
        };
        let svg = render_svg(&PlotInput {
            ground_truth: &scene.trajectory,
            sfm_aligned: &sfm,
            pnp: &pnp,
            hybrid: &hybrid,
            objects: &scene.objects,
            predictions: &predictions,
        });
        Ok(vec![write(config, files::PLOT, &svg)?])
    })
}

/// synth, sfm, reloc, fuse, then prediction and evaluation for the hybrid
/// table and the SfM-only ablation, the comparison table, and the plot.
pub fn cmd_run_all(config: &PipelineConfig) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    outputs.extend(cmd_synth(config)?);
    outputs.extend(cmd_sfm(config)?);
    outputs.extend(cmd_reloc(config)?);
    outputs.extend(cmd_fuse(config)?);
    for ablation in [Ablation::Hybrid, Ablation::SfmOnly] {
        outputs.extend(cmd_predict(config, ablation)?);
        outputs.extend(cmd_eval(config, ablation)?);
    }
    outputs.extend(stage(config, "compare", || {
        let hybrid = read_metrics(config, Ablation::Hybrid)?;
        let sfm_only = read_metrics(config, Ablation::SfmOnly)?;
        let table = format_table(&[
            (Ablation::Hybrid.as_str(), &hybrid.report),
            (Ablation::SfmOnly.as_str(), &sfm_only.report),
        ]);
        Ok(vec![write(config, files::COMPARISON, &table)?])
    })?);
    outputs.extend(cmd_plot(config)?);
    Ok(outputs)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Regular files under `dir` other than the manifest, as sorted relative paths.
fn list_artifacts(dir: &Path) -> Result<Vec<ArtifactEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<ArtifactEntry>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let name = rel.to_string_lossy().replace('\\', "/");
            if name == files::MANIFEST {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.push(ArtifactEntry {
                name,
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.is_dir() {
        walk(dir, dir, &mut out)?;
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

fn pose_coverage(config: &PipelineConfig) -> Result<BTreeMap<String, usize>> {
    let mut cov = BTreeMap::new();
    for (key, name) in [
        ("SFM", files::POSES_SFM),
        ("PNP", files::POSES_PNP),
        ("HYBRID", files::POSES_HYBRID),
    ] {
        let path = config.out(name);
        if !path.is_file() {
            continue;
        }
        let table = io::parse_poses(&path, &io::read_file(&path)?)?;
        cov.insert(key.to_string(), table.len());
        if key == "HYBRID" {
            for p in [Provenance::HybridSfm, Provenance::HybridPnp] {
                cov.insert(p.to_string(), table.count_provenance(p));
            }
        }
    }
    Ok(cov)
}

pub fn read_manifest(config: &PipelineConfig) -> Result<RunManifest> {
    read_json(
        &config.out(files::MANIFEST),
        "manifest",
        io::MANIFEST_SCHEMA,
    )
}

fn update_manifest(
    config: &PipelineConfig,
    stage: &str,
    outputs: &[String],
    seconds: Option<f64>,
) -> Result<()> {
    let path = config.out(files::MANIFEST);
    // A stale or foreign manifest is replaced rather than trusted.
    let mut stages = match path.is_file().then(|| read_manifest(config)) {
        Some(Ok(m)) => m.stages,
        _ => BTreeMap::new(),
    };
    stages.insert(
        stage.to_string(),
        StageRecord {
            outputs: outputs.to_vec(),
            seconds,
        },
    );
    let manifest = RunManifest {
        tool: TOOL_NAME.to_string(),
        version: TOOL_VERSION.to_string(),
        config: config.clone(),
        stages,
        pose_coverage: pose_coverage(config)?,
        artifacts: list_artifacts(&config.out_dir)?,
    };
    io::write_file(&path, &io::to_json(io::MANIFEST_SCHEMA, &manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_labeled_and_stable() {
        assert_eq!(stage_seed(0, "sfm"), stage_seed(0, "sfm"));
        assert_ne!(stage_seed(0, "sfm"), stage_seed(0, "reloc"));
        assert_ne!(stage_seed(0, "sfm"), stage_seed(1, "sfm"));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("both".parse::<Ablation>().is_err());
        assert_eq!(
            "prefer-pnp".parse::<Preference>().unwrap(),
            Preference::PreferPnp
        );
    }

    #[test]
    fn config_toml_round_trips_except_out_dir() {
        let mut c = PipelineConfig {
            seed: 42,
            record_timings: true,
            ..PipelineConfig::default()
        };
        c.scene.sfm_failure_segment = Some([3, 5]);
        c.union.consistency_gate = Some(0.5);
        let text = c.to_toml();
        let back = PipelineConfig::from_toml_str(&text, Path::new("c.toml")).unwrap();
        assert_eq!(back, c);
        assert!(PipelineConfig::from_toml_str("bogus = 1", Path::new("c.toml")).is_err());
    }
}
