use std::ffi::{CStr, CString};
use std::ptr;

use hybridloc::fuse::umeyama_sim3;
use hybridloc::geometry::exp_so3;
use hybridloc::synthworld::{generate_scene, SceneConfig};
use hybridloc::Vec3;
use hybridloc_ffi::*;

fn k() -> HlIntrinsics {
    HlIntrinsics {
        fx: 500.0,
        fy: 500.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
    }
}

fn identity() -> HlPose {
    HlPose {
        rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.0; 3],
    }
}

fn last_error() -> String {
    let p = hl_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn project_and_backproject_round_trip() {
    let pose = HlPose {
        translation: [0.5, -0.2, 0.1],
        ..identity()
    };
    let x = [0.3, 0.4, 5.0];
    let mut uv = [0.0; 2];
    let mut depth = 0.0;
    let s = unsafe { hl_project(x.as_ptr(), &pose, &k(), uv.as_mut_ptr(), &mut depth) };
    assert_eq!(s, HlStatus::Ok);
    let mut back = [0.0; 3];
    let s = unsafe { hl_backproject(uv.as_ptr(), depth, &k(), &pose, back.as_mut_ptr()) };
    assert_eq!(s, HlStatus::Ok);
    for i in 0..3 {
        assert!((back[i] - x[i]).abs() < 1e-12);
    }
}

#[test]
fn errors_set_status_and_message() {
    let behind = [0.0, 0.0, -1.0];
    let mut uv = [0.0; 2];
    let s = unsafe {
        hl_project(
            behind.as_ptr(),
            &identity(),
            &k(),
            uv.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, HlStatus::BehindCamera);

    let mut out = [0.0; 3];
    let s = unsafe { hl_backproject(uv.as_ptr(), 0.0, &k(), &identity(), out.as_mut_ptr()) };
    assert_eq!(s, HlStatus::InvalidArgument);
    assert!(last_error().contains("depth"));

    let s = unsafe {
        hl_project(
            ptr::null(),
            &identity(),
            &k(),
            uv.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, HlStatus::NullPointer);

    let bad = HlPose {
        rotation: [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.0; 3],
    };
    let s = unsafe {
        hl_project(
            behind.as_ptr(),
            &bad,
            &k(),
            uv.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, HlStatus::InvalidArgument);
}

#[test]
fn umeyama_matches_library() {
    let r = exp_so3(&Vec3::new(0.2, -0.4, 0.9));
    let src: Vec<Vec3> = (0..6)
        .map(|i| Vec3::new(i as f64, (i * i) as f64 * 0.3, 1.0 - i as f64 * 0.7))
        .collect();
    let dst: Vec<Vec3> = src
        .iter()
        .map(|p| 2.5 * (r * p) + Vec3::new(1.0, 2.0, 3.0))
        .collect();
    let flat = |v: &[Vec3]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<f64>>();
    let mut out = HlSim3 {
        scale: 0.0,
        rotation: [0.0; 9],
        translation: [0.0; 3],
    };
    let s = unsafe {
        hl_umeyama(
            flat(&src).as_ptr(),
            flat(&dst).as_ptr(),
            src.len(),
            &mut out,
        )
    };
    assert_eq!(s, HlStatus::Ok);
    let lib = umeyama_sim3(&src, &dst).unwrap();
    assert!((out.scale - lib.scale).abs() < 1e-12);
    assert!((out.scale - 2.5).abs() < 1e-9);

    let s = unsafe { hl_umeyama(flat(&src).as_ptr(), flat(&dst).as_ptr(), 2, &mut out) };
    assert_ne!(s, HlStatus::Ok);
}

#[test]
fn ransac_pnp_recovers_scene_pose() {
    let scene = generate_scene(&SceneConfig::default(), 1).unwrap();
    let truth = scene.trajectory[4];
    let mut pixels = Vec::new();
    let mut points = Vec::new();
    for wp in &scene.world_points {
        if let Some((px, _)) = scene.observe(4, &wp.position) {
            pixels.extend([px.u, px.v]);
            points.extend([wp.position.x, wp.position.y, wp.position.z]);
        }
    }
    let n = pixels.len() / 2;
    let params = hl_ransac_params_default();
    let mut pose = identity();
    let mut inliers = vec![0usize; n];
    let mut count = 0usize;
    let s = unsafe {
        hl_ransac_pnp(
            pixels.as_ptr(),
            points.as_ptr(),
            n,
            &k(),
            &params,
            &mut pose,
            inliers.as_mut_ptr(),
            &mut count,
        )
    };
    assert_eq!(s, HlStatus::Ok);
    assert_eq!(count, n);
    for i in 0..3 {
        assert!((pose.translation[i] - truth.translation[i]).abs() < 1e-6);
    }

    let s = unsafe {
        hl_ransac_pnp(
            pixels.as_ptr(),
            points.as_ptr(),
            4,
            &k(),
            &params,
            &mut pose,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, HlStatus::NoPose);
}

#[test]
fn pose_table_handles() {
    let pnp = hl_pose_table_new();
    let sfm = hl_pose_table_new();
    unsafe {
        for f in 0..5usize {
            let c = [f as f64, (f as f64).sin(), 0.3 * f as f64];
            let p = HlPose {
                translation: c,
                ..identity()
            };
            assert_eq!(
                hl_pose_table_insert(pnp, f, &p, HlProvenance::Pnp),
                HlStatus::Ok
            );
            if f != 2 {
                // SfM frame: scaled by 0.5 and shifted.
                let q = HlPose {
                    translation: [0.5 * c[0] + 1.0, 0.5 * c[1], 0.5 * c[2] - 2.0],
                    ..identity()
                };
                assert_eq!(
                    hl_pose_table_insert(sfm, f, &q, HlProvenance::Sfm),
                    HlStatus::Ok
                );
            }
        }
        assert_eq!(hl_pose_table_len(pnp), 5);
        let mut frames = [0usize; 8];
        assert_eq!(
            hl_pose_table_frames(sfm, frames.as_mut_ptr(), frames.len()),
            4
        );
        assert_eq!(&frames[..4], &[0, 1, 3, 4]);

        let mut aligned = ptr::null_mut();
        let mut sim = HlSim3 {
            scale: 0.0,
            rotation: [0.0; 9],
            translation: [0.0; 3],
        };
        assert_eq!(
            hl_align_sfm_to_scan(sfm, pnp, &mut aligned, &mut sim),
            HlStatus::Ok
        );
        assert!((sim.scale - 2.0).abs() < 1e-9);

        let mut hybrid = ptr::null_mut();
        assert_eq!(
            hl_union_poses(aligned, pnp, HlPreference::PreferSfm, 0.0, &mut hybrid),
            HlStatus::Ok
        );
        assert_eq!(hl_pose_table_len(hybrid), 5);
        let mut pose = identity();
        let mut prov = HlProvenance::Sfm;
        assert_eq!(
            hl_pose_table_get(hybrid, 2, &mut pose, &mut prov),
            HlStatus::Ok
        );
        assert_eq!(prov, HlProvenance::HybridPnp);
        assert_eq!(
            hl_pose_table_get(hybrid, 3, &mut pose, &mut prov),
            HlStatus::Ok
        );
        assert_eq!(prov, HlProvenance::HybridSfm);
        assert!((pose.translation[0] - 3.0).abs() < 1e-9);
        assert_eq!(
            hl_pose_table_get(hybrid, 9, &mut pose, &mut prov),
            HlStatus::NotFound
        );

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("h.csv").to_str().unwrap()).unwrap();
        assert_eq!(hl_pose_table_save(hybrid, path.as_ptr()), HlStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(hl_pose_table_load(path.as_ptr(), &mut loaded), HlStatus::Ok);
        assert_eq!(hl_pose_table_len(loaded), 5);

        let missing = CString::new(dir.path().join("none.csv").to_str().unwrap()).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(
            hl_pose_table_load(missing.as_ptr(), &mut none),
            HlStatus::Io
        );
        assert!(none.is_null());
        assert!(last_error().contains("none.csv"));

        // Too few shared frames.
        let lone = hl_pose_table_new();
        let mut out = ptr::null_mut();
        assert_eq!(
            hl_align_sfm_to_scan(lone, pnp, &mut out, ptr::null_mut()),
            HlStatus::AlignmentInfeasible
        );

        for t in [pnp, sfm, aligned, hybrid, loaded, lone] {
            hl_pose_table_free(t);
        }
        hl_pose_table_free(ptr::null_mut());
        assert_eq!(hl_pose_table_len(ptr::null()), 0);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hybridloc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "hl_project",
        "hl_backproject",
        "hl_umeyama",
        "hl_ransac_pnp",
        "hl_pose_table_free",
        "HL_STATUS_OK",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(status.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        "#include \"hybridloc.h\"\nint main(void) { HlPose p; HlIntrinsics k; double uv[2]; (void)p; (void)k; (void)uv; return hl_version() == 0; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
