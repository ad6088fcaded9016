use std::path::Path;
use std::process::{Command, Output};

use hybridloc::io::{self, GroundTruthFile};
use hybridloc::pipeline::{cmd_fuse, cmd_plot, cmd_synth, files, read_manifest, PipelineConfig};
use hybridloc::{Error, Pose, PoseTable, Provenance, Vec3};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridloc"))
        .args(args)
        .env("HYBRIDLOC_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config_in(dir: &Path) -> PipelineConfig {
    PipelineConfig {
        out_dir: dir.to_path_buf(),
        ..PipelineConfig::default()
    }
}

#[test]
fn synth_writes_five_files_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let first = cli(&["--out", out, "--seed", "5", "synth"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let names = [
        files::SCENE,
        files::TRACKS,
        files::MATCHES,
        files::DETECTIONS,
        files::GROUND_TRUTH,
    ];
    let before: Vec<Vec<u8>> = names
        .iter()
        .map(|n| std::fs::read(dir.path().join(n)).unwrap())
        .collect();
    let manifest = std::fs::read(dir.path().join(files::MANIFEST)).unwrap();
    let again = cli(&["--out", out, "--seed", "5", "synth"]);
    assert!(again.status.success());
    for (n, b) in names.iter().zip(&before) {
        assert_eq!(
            &std::fs::read(dir.path().join(n)).unwrap(),
            b,
            "{n} changed"
        );
    }
    assert_eq!(
        std::fs::read(dir.path().join(files::MANIFEST)).unwrap(),
        manifest
    );
    for (n, b) in names.iter().zip(&before) {
        let text = String::from_utf8_lossy(b);
        assert!(
            text.starts_with("# hybridloc-") || text.starts_with("{\n  \"schema\": \"hybridloc-"),
            "{n}"
        );
    }
}

#[test]
fn missing_upstream_file_is_a_named_stage_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--out", dir.path().to_str().unwrap(), "sfm"]);
    assert!(!out.status.success());
    let msg = stderr(&out);
    assert!(
        msg.contains("stage dependency") && msg.contains("scene.json"),
        "{msg}"
    );

    let config = config_in(dir.path());
    match cmd_plot(&config) {
        Err(Error::StageDependency { path, .. }) => assert!(path.ends_with(files::SCENE)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn fuse_with_too_few_shared_frames_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut sfm = PoseTable::new();
    let mut pnp = PoseTable::new();
    for f in 0..4 {
        let p = Pose::from_parts(Pose::identity().rotation, Vec3::new(f as f64, 0.0, 0.0));
        if f < 2 {
            sfm.insert(f, p, Provenance::Sfm);
        }
        pnp.insert(f, p, Provenance::Pnp);
    }
    io::write_file(&dir.path().join(files::POSES_SFM), &io::format_poses(&sfm)).unwrap();
    io::write_file(&dir.path().join(files::POSES_PNP), &io::format_poses(&pnp)).unwrap();
    let out = cli(&["--out", dir.path().to_str().unwrap(), "fuse"]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("alignment infeasible"),
        "{}",
        stderr(&out)
    );
    assert!(matches!(
        cmd_fuse(&config_in(dir.path())),
        Err(Error::AlignmentInfeasible(_))
    ));
}

#[test]
fn stages_chain_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["synth"],
        vec!["sfm"],
        vec!["reloc"],
        vec!["fuse"],
        vec!["predict", "--ablation", "pnp-only"],
        vec!["eval", "--ablation", "pnp-only"],
        vec!["--policy", "prefer-pnp", "fuse"],
        vec!["plot"],
    ] {
        let mut full = vec!["--out", out];
        full.extend(args.iter());
        let o = cli(&full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let table = std::fs::read_to_string(dir.path().join("metrics_pnp_only.txt")).unwrap();
    assert!(table.starts_with("Method"));
    assert!(table.contains("pnp-only"));

    let hybrid = io::parse_poses(
        &dir.path().join(files::POSES_HYBRID),
        &std::fs::read_to_string(dir.path().join(files::POSES_HYBRID)).unwrap(),
    )
    .unwrap();
    assert_eq!(hybrid.count_provenance(Provenance::HybridPnp), hybrid.len());

    let bad = cli(&["--out", out, "predict", "--ablation", "nope"]);
    assert!(!bad.status.success());
}

#[test]
fn manifest_counts_match_emitted_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.scene.sfm_failure_segment = Some([4, 8]);
    hybridloc::pipeline::cmd_run_all(&config).unwrap();
    let m = read_manifest(&config).unwrap();
    for (key, name) in [
        ("SFM", files::POSES_SFM),
        ("PNP", files::POSES_PNP),
        ("HYBRID", files::POSES_HYBRID),
    ] {
        let path = dir.path().join(name);
        let t = io::parse_poses(&path, &std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(m.pose_coverage[key], t.len(), "{key}");
    }
    assert_eq!(
        m.pose_coverage["HYBRID-SFM"] + m.pose_coverage["HYBRID-PNP"],
        m.pose_coverage["HYBRID"]
    );
    let names: Vec<&str> = m.artifacts.iter().map(|a| a.name.as_str()).collect();
    assert!(names.contains(&files::PLOT) && !names.contains(&files::MANIFEST));

    let cmp = std::fs::read_to_string(dir.path().join(files::COMPARISON)).unwrap();
    let lines: Vec<&str> = cmp.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0].split_whitespace().collect::<Vec<_>>(),
        ["Method", "Succ%", "Succ*%", "L2", "Angle", "QwP%"]
    );
    for row in &lines[1..] {
        assert_eq!(row.split_whitespace().count(), 6);
    }
}

#[test]
fn plot_is_valid_svg_and_notes_empty_hybrid() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path());
    cmd_synth(&config).unwrap();
    let empty = io::format_poses(&PoseTable::new());
    for name in [
        files::POSES_SFM_ALIGNED,
        files::POSES_PNP,
        files::POSES_HYBRID,
    ] {
        io::write_file(&dir.path().join(name), &empty).unwrap();
    }
    cmd_plot(&config).unwrap();
    let svg = std::fs::read_to_string(dir.path().join(files::PLOT)).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(svg.contains("hybrid (0 poses)"));
    let lines = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("trajectory"))
        .count();
    assert_eq!(lines, 1, "only the ground-truth trajectory is drawn");

    cmd_plot(&config).unwrap();
    assert_eq!(
        std::fs::read_to_string(dir.path().join(files::PLOT)).unwrap(),
        svg
    );
}

#[test]
fn zero_query_scene_writes_empty_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.scene.num_queries = 0;
    cmd_synth(&config).unwrap();
    let path = dir.path().join(files::GROUND_TRUTH);
    let gt: GroundTruthFile = io::from_json(
        &path,
        io::GROUND_TRUTH_SCHEMA,
        &std::fs::read_to_string(&path).unwrap(),
    )
    .unwrap();
    assert!(gt.queries.is_empty());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 3\n[scene]\nnum_frames = 8\nnum_queries = 2\n").unwrap();
    let out = dir.path().join("run");
    let o = cli(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "synth",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_manifest(&config_in(&out)).unwrap();
    assert_eq!(m.config.seed, 3);
    assert_eq!(m.config.scene.num_frames, 8);

    std::fs::write(&cfg, "sede = 3\n").unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "synth"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("c.toml"));
}
