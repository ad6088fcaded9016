//! C ABI over the hybridloc geometry, PnP and pose-fusion routines.
//!
//! Every function returns an `HlStatus`. On failure a description is kept in
//! a thread-local buffer readable through `hl_last_error_message`. Pose tables
//! are opaque handles owned by the caller and released with
//! `hl_pose_table_free`. Rotations cross the boundary as nine row-major
//! doubles; poses are camera-to-world with the translation equal to the
//! camera center.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hybridloc::fuse::{align_sfm_to_scan, umeyama_sim3, union_poses, Preference, UnionPolicy};
use hybridloc::geometry::{backproject, project};
use hybridloc::io;
use hybridloc::pnp::{ransac_pnp, Correspondence2D3D, RansacParams};
use hybridloc::{Error, Intrinsics, Mat3, Pixel, Pose, PoseTable, Provenance, Vec3};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HlStatus {
    Ok = 0,
    InvalidArgument = 1,
    DegenerateGeometry = 2,
    EmptyReconstruction = 3,
    AlignmentInfeasible = 4,
    NoPose = 5,
    NoDetection = 6,
    UndefinedAngle = 7,
    StageDependency = 8,
    Io = 9,
    Parse = 10,
    NullPointer = 11,
    NotFound = 12,
    BehindCamera = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HlProvenance {
    Sfm = 0,
    Pnp = 1,
    HybridSfm = 2,
    HybridPnp = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HlPreference {
    PreferSfm = 0,
    PreferPnp = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HlIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HlPose {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HlSim3 {
    pub scale: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HlRansacParams {
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub confidence: f64,
    pub seed: u64,
}

/// Opaque pose table.
pub struct HlPoseTable {
    inner: PoseTable,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> HlStatus {
    match err {
        Error::InvalidArgument(_) => HlStatus::InvalidArgument,
        Error::DegenerateGeometry(_) => HlStatus::DegenerateGeometry,
        Error::EmptyReconstruction(_) => HlStatus::EmptyReconstruction,
        Error::AlignmentInfeasible(_) => HlStatus::AlignmentInfeasible,
        Error::NoPose(_) => HlStatus::NoPose,
        Error::NoDetection(_) => HlStatus::NoDetection,
        Error::UndefinedAngle => HlStatus::UndefinedAngle,
        Error::StageDependency { .. } => HlStatus::StageDependency,
        Error::Io { .. } => HlStatus::Io,
        Error::Parse { .. } => HlStatus::Parse,
    }
}

struct Fail(HlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status code.
fn guard<F>(f: F) -> HlStatus
where
    F: FnOnce() -> Result<(), Fail>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HlStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn intrinsics(k: &HlIntrinsics) -> Result<Intrinsics, Fail> {
    Ok(Intrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)?)
}

fn pose_in(p: &HlPose) -> Result<Pose, Fail> {
    Ok(Pose::new(
        Mat3::from_row_slice(&p.rotation),
        Vec3::from(p.translation),
    )?)
}

fn rotation_out(r: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = r[(i, j)];
        }
    }
    out
}

fn pose_out(p: &Pose) -> HlPose {
    HlPose {
        rotation: rotation_out(&p.rotation),
        translation: [p.translation.x, p.translation.y, p.translation.z],
    }
}

fn provenance_in(p: HlProvenance) -> Provenance {
    match p {
        HlProvenance::Sfm => Provenance::Sfm,
        HlProvenance::Pnp => Provenance::Pnp,
        HlProvenance::HybridSfm => Provenance::HybridSfm,
        HlProvenance::HybridPnp => Provenance::HybridPnp,
    }
}

fn provenance_out(p: Provenance) -> HlProvenance {
    match p {
        Provenance::Sfm => HlProvenance::Sfm,
        Provenance::Pnp => HlProvenance::Pnp,
        Provenance::HybridSfm => HlProvenance::HybridSfm,
        Provenance::HybridPnp => HlProvenance::HybridPnp,
    }
}

fn into_handle(table: PoseTable) -> *mut HlPoseTable {
    Box::into_raw(Box::new(HlPoseTable { inner: table }))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Projects `point[3]` into `out_uv[2]`; `out_depth` may be null.
///
/// # Safety
/// Pointers must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn hl_project(
    point: *const f64,
    pose: *const HlPose,
    k: *const HlIntrinsics,
    out_uv: *mut f64,
    out_depth: *mut f64,
) -> HlStatus {
    guard(|| {
        let x = slice(point, 3, "point")?;
        let pose = pose_in(deref(pose, "pose")?)?;
        let k = intrinsics(deref(k, "intrinsics")?)?;
        if out_uv.is_null() {
            return Err(null("out_uv"));
        }
        let (px, depth) = project(&Vec3::new(x[0], x[1], x[2]), &pose, &k).ok_or_else(|| {
            Fail(
                HlStatus::BehindCamera,
                "point is not in front of the camera".into(),
            )
        })?;
        *out_uv = px.u;
        *out_uv.add(1) = px.v;
        if !out_depth.is_null() {
            *out_depth = depth;
        }
        Ok(())
    })
}

/// Lifts pixel `uv[2]` at `depth` to the world point `out_xyz[3]`.
///
/// # Safety
/// Pointers must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn hl_backproject(
    uv: *const f64,
    depth: f64,
    k: *const HlIntrinsics,
    pose: *const HlPose,
    out_xyz: *mut f64,
) -> HlStatus {
    guard(|| {
        let uv = slice(uv, 2, "uv")?;
        let k = intrinsics(deref(k, "intrinsics")?)?;
        let pose = pose_in(deref(pose, "pose")?)?;
        if out_xyz.is_null() {
            return Err(null("out_xyz"));
        }
        let x = backproject(&Pixel::new(uv[0], uv[1]), depth, &k, &pose)?;
        for i in 0..3 {
            *out_xyz.add(i) = x[i];
        }
        Ok(())
    })
}

/// Least-squares similarity mapping `src` onto `dst`, each `3 * n` doubles.
///
/// # Safety
/// `src` and `dst` must hold `3 * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hl_umeyama(
    src: *const f64,
    dst: *const f64,
    n: usize,
    out: *mut HlSim3,
) -> HlStatus {
    guard(|| {
        let s = slice(src, 3 * n, "src")?;
        let d = slice(dst, 3 * n, "dst")?;
        let out = deref_mut(out, "out")?;
        let to_pts = |v: &[f64]| {
            v.chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect::<Vec<_>>()
        };
        let sim = umeyama_sim3(&to_pts(s), &to_pts(d))?;
        *out = HlSim3 {
            scale: sim.scale,
            rotation: rotation_out(&sim.rotation),
            translation: [sim.translation.x, sim.translation.y, sim.translation.z],
        };
        Ok(())
    })
}

/// Default RANSAC settings.
#[no_mangle]
pub extern "C" fn hl_ransac_params_default() -> HlRansacParams {
    let p = RansacParams::default();
    HlRansacParams {
        max_iterations: p.max_iterations,
        inlier_threshold: p.inlier_threshold,
        min_inliers: p.min_inliers,
        confidence: p.confidence,
        seed: p.seed,
    }
}

/// Robust PnP from `n` matches (`pixels`: 2n doubles, `points`: 3n doubles).
/// Returns `HL_STATUS_NO_POSE` when no hypothesis reaches `min_inliers`.
/// `out_inliers` (capacity `n`) and `out_inlier_count` may be null.
///
/// # Safety
/// Pointers must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn hl_ransac_pnp(
    pixels: *const f64,
    points: *const f64,
    n: usize,
    k: *const HlIntrinsics,
    params: *const HlRansacParams,
    out_pose: *mut HlPose,
    out_inliers: *mut usize,
    out_inlier_count: *mut usize,
) -> HlStatus {
    guard(|| {
        let px = slice(pixels, 2 * n, "pixels")?;
        let pts = slice(points, 3 * n, "points")?;
        let k = intrinsics(deref(k, "intrinsics")?)?;
        let p = deref(params, "params")?;
        let out_pose = deref_mut(out_pose, "out_pose")?;
        let corrs: Vec<Correspondence2D3D> = (0..n)
            .map(|i| Correspondence2D3D {
                pixel: Pixel::new(px[2 * i], px[2 * i + 1]),
                point: Vec3::new(pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]),
                point_id: i,
            })
            .collect();
        let params = RansacParams {
            max_iterations: p.max_iterations,
            inlier_threshold: p.inlier_threshold,
            min_inliers: p.min_inliers,
            confidence: p.confidence,
            seed: p.seed,
        };
        let outcome = ransac_pnp(&corrs, &k, &params)?.ok_or_else(|| {
            Fail(
                HlStatus::NoPose,
                "no hypothesis reached the minimum inlier count".into(),
            )
        })?;
        *out_pose = pose_out(&outcome.pose);
        if !out_inlier_count.is_null() {
            *out_inlier_count = outcome.inliers.len();
        }
        if !out_inliers.is_null() {
            for (i, &idx) in outcome.inliers.iter().enumerate() {
                *out_inliers.add(i) = idx;
            }
        }
        Ok(())
    })
}

/// New empty table.
#[no_mangle]
pub extern "C" fn hl_pose_table_new() -> *mut HlPoseTable {
    into_handle(PoseTable::new())
}

/// Reads a pose table file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hl_pose_table_load(
    path: *const c_char,
    out: *mut *mut HlPoseTable,
) -> HlStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let out = deref_mut(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(HlStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let path = Path::new(path);
        let table = io::parse_poses(path, &io::read_file(path)?)?;
        *out = into_handle(table);
        Ok(())
    })
}

/// Writes the table in the pose file format.
///
/// # Safety
/// `table` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hl_pose_table_save(
    table: *const HlPoseTable,
    path: *const c_char,
) -> HlStatus {
    guard(|| {
        let table = deref(table, "table")?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(HlStatus::InvalidArgument, "path is not UTF-8".into()))?;
        io::write_file(Path::new(path), &io::format_poses(&table.inner))?;
        Ok(())
    })
}

/// Number of posed frames; 0 for a null handle.
///
/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hl_pose_table_len(table: *const HlPoseTable) -> usize {
    table.as_ref().map_or(0, |t| t.inner.len())
}

/// Writes the ascending frame indices into `out_frames` (capacity `cap`) and
/// returns how many the table holds.
///
/// # Safety
/// `table` must be null or a live handle; `out_frames` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn hl_pose_table_frames(
    table: *const HlPoseTable,
    out_frames: *mut usize,
    cap: usize,
) -> usize {
    let Some(t) = table.as_ref() else {
        return 0;
    };
    if !out_frames.is_null() {
        for (i, f) in t.inner.frames().take(cap).enumerate() {
            *out_frames.add(i) = f;
        }
    }
    t.inner.len()
}

/// Inserts or replaces the pose for `frame`.
///
/// # Safety
/// `table` must be a live handle and `pose` valid.
#[no_mangle]
pub unsafe extern "C" fn hl_pose_table_insert(
    table: *mut HlPoseTable,
    frame: usize,
    pose: *const HlPose,
    provenance: HlProvenance,
) -> HlStatus {
    guard(|| {
        let table = deref_mut(table, "table")?;
        let pose = pose_in(deref(pose, "pose")?)?;
        table.inner.insert(frame, pose, provenance_in(provenance));
        Ok(())
    })
}

/// Pose and provenance for `frame`; `HL_STATUS_NOT_FOUND` when absent.
/// `out_provenance` may be null.
///
/// # Safety
/// `table` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn hl_pose_table_get(
    table: *const HlPoseTable,
    frame: usize,
    out_pose: *mut HlPose,
    out_provenance: *mut HlProvenance,
) -> HlStatus {
    guard(|| {
        let table = deref(table, "table")?;
        let out_pose = deref_mut(out_pose, "out_pose")?;
        let entry = table
            .inner
            .get(frame)
            .ok_or_else(|| Fail(HlStatus::NotFound, format!("frame {frame} has no pose")))?;
        *out_pose = pose_out(&entry.pose);
        if !out_provenance.is_null() {
            *out_provenance = provenance_out(entry.provenance);
        }
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `table` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hl_pose_table_free(table: *mut HlPoseTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Maps `sfm` into the frame of `pnp` using their shared frames. The mapped
/// table goes to `*out_aligned`; `out_sim3` may be null.
///
/// # Safety
/// Handles must be live; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn hl_align_sfm_to_scan(
    sfm: *const HlPoseTable,
    pnp: *const HlPoseTable,
    out_aligned: *mut *mut HlPoseTable,
    out_sim3: *mut HlSim3,
) -> HlStatus {
    guard(|| {
        let sfm = deref(sfm, "sfm")?;
        let pnp = deref(pnp, "pnp")?;
        let out_aligned = deref_mut(out_aligned, "out_aligned")?;
        let (aligned, report) = align_sfm_to_scan(&sfm.inner, &pnp.inner)?;
        if !out_sim3.is_null() {
            *out_sim3 = HlSim3 {
                scale: report.scale,
                rotation: report.rotation,
                translation: report.translation,
            };
        }
        *out_aligned = into_handle(aligned);
        Ok(())
    })
}

/// Union of an aligned SfM table and a PnP table. A `consistency_gate` of
/// zero or less disables the gate.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hl_union_poses(
    aligned_sfm: *const HlPoseTable,
    pnp: *const HlPoseTable,
    preference: HlPreference,
    consistency_gate: f64,
    out: *mut *mut HlPoseTable,
) -> HlStatus {
    guard(|| {
        let sfm = deref(aligned_sfm, "aligned_sfm")?;
        let pnp = deref(pnp, "pnp")?;
        let out = deref_mut(out, "out")?;
        let policy = UnionPolicy {
            preference: match preference {
                HlPreference::PreferSfm => Preference::PreferSfm,
                HlPreference::PreferPnp => Preference::PreferPnp,
            },
            consistency_gate: (consistency_gate > 0.0).then_some(consistency_gate),
        };
        *out = into_handle(union_poses(&sfm.inner, &pnp.inner, &policy)?);
        Ok(())
    })
}
