//! C ABI over the `nclr` library.
//!
//! Every entry point returns an [`NclrStatus`]. On failure the message is
//! kept per thread and can be copied out with [`nclr_last_error`]. Scenes and
//! models are opaque handles released with their `_free` functions. Poses are
//! 12 doubles: row-major rotation then translation, mapping LiDAR points into
//! the camera frame.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nclr::config::RunConfig;
use nclr::encoder::EncoderConfig;
use nclr::eval::{evaluate_scene, rre, rre_geodesic, rte, Ablation, EvalOptions};
use nclr::geometry::{project, CameraIntrinsics, RigidPose};
use nclr::matching::MatchConfig;
use nclr::model::init_model;
use nclr::params::ParamStore;
use nclr::pnp::solve_pose_values;
use nclr::scene::{generate_dataset, read_scene, write_scene, SceneConfig, SceneSample};
use nclr::autodiff::Matrix;
use nclr::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NclrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Version = 5,
    InsufficientCorrespondences = 6,
    Conditioning = 7,
    Solver = 8,
    Config = 9,
    Internal = 10,
    Panic = 11,
}

/// Pinhole intrinsics of a `width`×`height` feature grid.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct NclrIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Per-scene evaluation of a model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct NclrSceneMetrics {
    /// NaN when the pose solve failed.
    pub rte_m: f64,
    pub rre_deg: f64,
    pub match_mean_px: f64,
    pub match_std_px: f64,
    pub acc_at_5px: f64,
    /// 1 when the pose solve succeeded.
    pub pose_ok: u8,
}

/// Opaque synthetic scene.
pub struct NclrScene {
    inner: SceneSample,
}

/// Opaque trained model: parameters plus the configs they were built with.
pub struct NclrModel {
    params: ParamStore,
    encoder: EncoderConfig,
    matching: MatchConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> NclrStatus {
    match e {
        Error::Scene { source, .. } => status_of(source),
        Error::Io { .. } => NclrStatus::Io,
        Error::Format { .. } => NclrStatus::Format,
        Error::Version(_) => NclrStatus::Version,
        Error::InsufficientCorrespondences { .. } => NclrStatus::InsufficientCorrespondences,
        Error::Conditioning(_) => NclrStatus::Conditioning,
        Error::Solver(_) => NclrStatus::Solver,
        Error::Config(_) => NclrStatus::Config,
        Error::Dimension(_)
        | Error::Domain { .. }
        | Error::Parameter(_)
        | Error::Shape(_)
        | Error::ZeroNorm { .. }
        | Error::DegenerateBatch(_)
        | Error::Generation(_) => NclrStatus::InvalidArgument,
        _ => NclrStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, records any failure and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NclrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            NclrStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            NclrStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            NclrStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            NclrStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn pose_arg(p: *const f64, what: &'static str) -> Result<RigidPose, Fail> {
    let v: &[f64; 12] = slice(p, 12, what)?.try_into().expect("length 12");
    Ok(RigidPose::from_array(v))
}

fn intrinsics(k: &NclrIntrinsics) -> Result<CameraIntrinsics, Fail> {
    Ok(CameraIntrinsics::new(
        k.fx,
        k.fy,
        k.cx,
        k.cy,
        k.width as usize,
        k.height as usize,
    )?)
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Matrix, Fail> {
    Ok(Matrix::from_vec(rows, cols, data.to_vec())?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nclr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn nclr_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Projects `n` points (n×3, row-major) with `pose` and `k`. Writes n×2
/// pixel coordinates to `out_uv` and a 0/1 flag per point to `out_valid`;
/// points at or behind the camera get flag 0 and NaN coordinates.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn nclr_project(
    points: *const f64,
    n: usize,
    pose: *const f64,
    k: *const NclrIntrinsics,
    out_uv: *mut f64,
    out_valid: *mut u8,
) -> NclrStatus {
    guard(|| {
        let pts = matrix(slice(points, 3 * n, "points")?, n, 3)?;
        let pose = pose_arg(pose, "pose")?;
        let k = intrinsics(k.as_ref().ok_or(Fail::Null("intrinsics"))?)?;
        let uv = slice_mut(out_uv, 2 * n, "out_uv")?;
        let valid = slice_mut(out_valid, n, "out_valid")?;
        let proj = project(&pts, &pose, &k);
        for i in 0..n {
            let [u, v] = proj.coord(i);
            uv[2 * i] = u;
            uv[2 * i + 1] = v;
            valid[i] = proj.valid[i] as u8;
        }
        Ok(())
    })
}

/// EPnP followed by `iters` Gauss-Newton steps on `n` correspondences
/// (points n×3, targets n×2). Writes the pose (12 doubles) and the RMS
/// reprojection residual in pixels.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn nclr_solve_pose(
    points: *const f64,
    targets: *const f64,
    n: usize,
    k: *const NclrIntrinsics,
    iters: u32,
    out_pose: *mut f64,
    out_residual: *mut f64,
) -> NclrStatus {
    guard(|| {
        let pts = matrix(slice(points, 3 * n, "points")?, n, 3)?;
        let tg = matrix(slice(targets, 2 * n, "targets")?, n, 2)?;
        let k = intrinsics(k.as_ref().ok_or(Fail::Null("intrinsics"))?)?;
        let pose_out = slice_mut(out_pose, 12, "out_pose")?;
        let res_out = out(out_residual, "out_residual")?;
        let est = solve_pose_values(&pts, &tg, &k, iters as usize)?;
        pose_out.copy_from_slice(&est.pose.to_array());
        *res_out = est.residual;
        Ok(())
    })
}

/// Translation error in meters between two poses.
///
/// # Safety
/// `est` and `gt` must point to 12 doubles; `out_m` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nclr_rte(est: *const f64, gt: *const f64, out_m: *mut f64) -> NclrStatus {
    guard(|| {
        let e = pose_arg(est, "est")?;
        let g = pose_arg(gt, "gt")?;
        *out(out_m, "out_m")? = rte(&e, &g);
        Ok(())
    })
}

/// Rotation error in degrees: Euler-angle sum, or the geodesic angle when
/// `geodesic` is nonzero.
///
/// # Safety
/// `est` and `gt` must point to 12 doubles; `out_deg` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nclr_rre(
    est: *const f64,
    gt: *const f64,
    geodesic: u8,
    out_deg: *mut f64,
) -> NclrStatus {
    guard(|| {
        let e = pose_arg(est, "est")?;
        let g = pose_arg(gt, "gt")?;
        *out(out_deg, "out_deg")? = if geodesic != 0 {
            rre_geodesic(&e, &g)
        } else {
            rre(&e, &g)
        };
        Ok(())
    })
}

/// Generates one scene with default settings for everything except the
/// point count and grid size; the focal length equals the grid width.
///
/// # Safety
/// `out_scene` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nclr_scene_generate(
    seed: u64,
    n_points: u32,
    grid_height: u32,
    grid_width: u32,
    out_scene: *mut *mut NclrScene,
) -> NclrStatus {
    guard(|| {
        let slot = out(out_scene, "out_scene")?;
        let cfg = SceneConfig {
            n_points: n_points as usize,
            grid_height: grid_height as usize,
            grid_width: grid_width as usize,
            focal: grid_width as f64,
            ..SceneConfig::default()
        };
        let inner = generate_dataset(&cfg, 1, seed)?.remove(0);
        *slot = Box::into_raw(Box::new(NclrScene { inner }));
        Ok(())
    })
}

/// Reads a scene file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_scene` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nclr_scene_load(
    path: *const c_char,
    out_scene: *mut *mut NclrScene,
) -> NclrStatus {
    guard(|| {
        let slot = out(out_scene, "out_scene")?;
        let inner = read_scene(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(NclrScene { inner }));
        Ok(())
    })
}

/// Writes a scene file.
///
/// # Safety
/// `scene` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn nclr_scene_save(scene: *const NclrScene, path: *const c_char) -> NclrStatus {
    guard(|| {
        let s = scene.as_ref().ok_or(Fail::Null("scene"))?;
        write_scene(&path_arg(path, "path")?, &s.inner)?;
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn nclr_scene_free(scene: *mut NclrScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Point count and grid size of a scene.
///
/// # Safety
/// `scene` must come from this library; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nclr_scene_dims(
    scene: *const NclrScene,
    out_points: *mut usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> NclrStatus {
    guard(|| {
        let s = &scene.as_ref().ok_or(Fail::Null("scene"))?.inner;
        *out(out_points, "out_points")? = s.num_points();
        *out(out_height, "out_height")? = s.grid_height();
        *out(out_width, "out_width")? = s.grid_width();
        Ok(())
    })
}

/// Copies the points (n×3), the raw pose (12) and the intrinsics.
///
/// # Safety
/// `points` must hold 3n doubles and `pose` 12; `k` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nclr_scene_geometry(
    scene: *const NclrScene,
    points: *mut f64,
    pose: *mut f64,
    k: *mut NclrIntrinsics,
) -> NclrStatus {
    guard(|| {
        let s = &scene.as_ref().ok_or(Fail::Null("scene"))?.inner;
        slice_mut(points, 3 * s.num_points(), "points")?.copy_from_slice(s.points.data());
        slice_mut(pose, 12, "pose")?.copy_from_slice(&s.raw_pose.to_array());
        let ki = &s.intrinsics;
        *out(k, "k")? = NclrIntrinsics {
            fx: ki.fx,
            fy: ki.fy,
            cx: ki.cx,
            cy: ki.cy,
            width: ki.width as u32,
            height: ki.height as u32,
        };
        Ok(())
    })
}

/// Loads a parameter file. `config_path` may be null for default model
/// widths; otherwise its `[train.encoder]` and `[train.matching]` apply.
///
/// # Safety
/// Paths must be NUL-terminated (or null where allowed); `out_model` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn nclr_model_load(
    params_path: *const c_char,
    config_path: *const c_char,
    out_model: *mut *mut NclrModel,
) -> NclrStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(&path_arg(config_path, "config_path")?)?
        };
        let params = ParamStore::load(&path_arg(params_path, "params_path")?)?;
        init_model(&cfg.train.encoder, 0).check_layout(&params)?;
        *slot = Box::into_raw(Box::new(NclrModel {
            params,
            encoder: cfg.train.encoder,
            matching: cfg.train.matching,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn nclr_model_free(model: *mut NclrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs matching and pose estimation on one scene. `ablation` is one of
/// "cosine-hard", "cosine-soft", "learnable-hard", "learnable-soft", or
/// null for learnable-soft. A failed pose solve is reported through
/// `pose_ok` and NaN errors, not as an error status.
///
/// # Safety
/// Handles must come from this library; `ablation` must be null or
/// NUL-terminated; `out_metrics` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nclr_model_evaluate(
    model: *const NclrModel,
    scene: *const NclrScene,
    ablation: *const c_char,
    out_metrics: *mut NclrSceneMetrics,
) -> NclrStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let s = &scene.as_ref().ok_or(Fail::Null("scene"))?.inner;
        let slot = out(out_metrics, "out_metrics")?;
        let mut opts = EvalOptions::default();
        if !ablation.is_null() {
            let name = CStr::from_ptr(ablation)
                .to_str()
                .map_err(|_| Fail::Arg("ablation is not valid UTF-8".into()))?;
            opts.ablation = name.parse::<Ablation>()?;
        }
        let r = evaluate_scene(&m.params, &m.encoder, &m.matching, s, 0, &opts)?;
        let (mean, std, acc) = r
            .matching
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |x| (x.error.mean, x.error.std, x.accuracy));
        *slot = NclrSceneMetrics {
            rte_m: r.rte,
            rre_deg: r.rre,
            match_mean_px: mean,
            match_std_px: std,
            acc_at_5px: acc,
            pose_ok: r.pose_error.is_none() as u8,
        };
        Ok(())
    })
}
