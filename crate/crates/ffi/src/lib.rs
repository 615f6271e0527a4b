//! C ABI over the `msf3d` library.
//!
//! Every fallible call returns an [`Msf3dStatus`]; on failure the message is
//! available from [`msf3d_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Panics never cross the
//! boundary: they are reported as `MSF3D_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use msf3d::boxes::Box3D;
use msf3d::error::ExitCode;
use msf3d::io::read_scene;
use msf3d::matching::hungarian;
use msf3d::metrics::nds;
use msf3d::model::{Detector, SceneInputs};
use msf3d::scene::{generate_scene, Scene};
use msf3d::train::{load_model, Checkpoint, TrainConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Msf3dStatus {
    Ok = 0,
    InputError = 1,
    ContractViolation = 2,
    NumericFailure = 3,
    NullPointer = 4,
    Panic = 5,
}

/// A trained detector loaded from a checkpoint.
pub struct Msf3dModel(Detector);

/// One synthetic scene: boxes, camera rig and point cloud.
pub struct Msf3dScene(Scene);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Msf3dBox {
    pub center: [f64; 3],
    /// `(w, l, h)` in meters.
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: u32,
    pub score: f64,
}

impl From<&Box3D> for Msf3dBox {
    fn from(b: &Box3D) -> Self {
        Msf3dBox {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            velocity: b.velocity,
            class_id: b.class as u32,
            score: b.score,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(Msf3dStatus, String);

impl From<msf3d::Error> for Failure {
    fn from(e: msf3d::Error) -> Self {
        let status = match e.exit_code() {
            ExitCode::Success => Msf3dStatus::Ok,
            ExitCode::InputError => Msf3dStatus::InputError,
            ExitCode::ContractViolation => Msf3dStatus::ContractViolation,
            ExitCode::NumericFailure => Msf3dStatus::NumericFailure,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(Msf3dStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Msf3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Msf3dStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            Msf3dStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(Msf3dStatus::InputError, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies `boxes` into a caller buffer. `written` always receives the full
/// count; passing `out = NULL, capacity = 0` queries it.
unsafe fn copy_boxes(boxes: &[Box3D], out: *mut Msf3dBox, capacity: usize, written: *mut usize) -> Result<(), Failure> {
    let written = written.as_mut().ok_or_else(|| null("written"))?;
    *written = boxes.len();
    if out.is_null() && capacity == 0 {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("out"));
    }
    if capacity < boxes.len() {
        return Err(Failure(
            Msf3dStatus::ContractViolation,
            format!("buffer holds {capacity} boxes, {} needed", boxes.len()),
        ));
    }
    for (i, b) in boxes.iter().enumerate() {
        out.add(i).write(Msf3dBox::from(b));
    }
    Ok(())
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn msf3d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn msf3d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `msf3d train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn msf3d_model_load(path: *const c_char, out: *mut *mut Msf3dModel) -> Msf3dStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = std::fs::read(path).map_err(|e| Failure::from(msf3d::Error::from(e)))?;
        let (_, detector) = load_model(&Checkpoint::from_bytes(&bytes)?)?;
        *out = Box::into_raw(Box::new(Msf3dModel(detector)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `msf3d_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn msf3d_model_free(model: *mut Msf3dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of detections `msf3d_model_detect` produces per scene.
///
/// # Safety
/// `model` must be a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn msf3d_model_top_k(model: *const Msf3dModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.head.top_k)
}

/// Runs the detector on a scene; boxes are sorted by descending score.
///
/// # Safety
/// Handles must be live; `out` must hold `capacity` boxes (or be NULL with
/// `capacity == 0`); `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msf3d_model_detect(
    model: *const Msf3dModel,
    scene: *const Msf3dScene,
    out: *mut Msf3dBox,
    capacity: usize,
    written: *mut usize,
) -> Msf3dStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let scene = ref_arg(scene, "scene")?;
        let inputs = SceneInputs::prepare(&scene.0, &model.0.config)?;
        let boxes = model.0.detect(&inputs)?;
        copy_boxes(&boxes, out, capacity, written)
    })
}

/// Generates the scene for `seed` from the `scene` table of a training
/// config in TOML. `config_toml` may be NULL for the defaults.
///
/// # Safety
/// `config_toml` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msf3d_scene_generate(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut Msf3dScene,
) -> Msf3dStatus {
    guard(|| {
        let config = if config_toml.is_null() {
            TrainConfig::default()
        } else {
            TrainConfig::from_toml(str_arg(config_toml, "config_toml")?)?
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let scene = generate_scene(&config.scene, seed)?;
        *out = Box::into_raw(Box::new(Msf3dScene(scene)));
        Ok(())
    })
}

/// Reads a scene JSON file written by `msf3d generate`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msf3d_scene_read(path: *const c_char, out: *mut *mut Msf3dScene) -> Msf3dStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let scene = read_scene(Path::new(path))?;
        *out = Box::into_raw(Box::new(Msf3dScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `scene` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn msf3d_scene_free(scene: *mut Msf3dScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Copies the ground-truth boxes (score 1).
///
/// # Safety
/// As for `msf3d_model_detect`.
#[no_mangle]
pub unsafe extern "C" fn msf3d_scene_ground_truth(
    scene: *const Msf3dScene,
    out: *mut Msf3dBox,
    capacity: usize,
    written: *mut usize,
) -> Msf3dStatus {
    guard(|| copy_boxes(&ref_arg(scene, "scene")?.0.gt, out, capacity, written))
}

/// Number of LiDAR points in the scene, or 0 for NULL.
///
/// # Safety
/// `scene` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn msf3d_scene_point_count(scene: *const Msf3dScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.cloud.len())
}

/// Detection score from mAP and the five mean true-positive errors
/// (translation, scale, orientation, velocity, attribute).
///
/// # Safety
/// `tp_errors` must point to 5 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msf3d_nds(map: f64, tp_errors: *const f64, out: *mut f64) -> Msf3dStatus {
    guard(|| {
        if tp_errors.is_null() {
            return Err(null("tp_errors"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let tp: [f64; 5] = std::slice::from_raw_parts(tp_errors, 5).try_into().expect("5 values");
        if !map.is_finite() || tp.iter().any(|v| !v.is_finite()) {
            return Err(Failure(Msf3dStatus::InputError, "NDS inputs must be finite".into()));
        }
        *out = nds(map, &tp);
        Ok(())
    })
}

/// Minimum-cost assignment of every row of a row-major `rows x cols` cost
/// matrix (`rows <= cols`) to a distinct column, written to `out_cols`.
///
/// # Safety
/// `cost` must hold `rows * cols` doubles and `out_cols` `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn msf3d_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    out_cols: *mut usize,
) -> Msf3dStatus {
    guard(|| {
        if rows == 0 {
            return Ok(());
        }
        if cost.is_null() {
            return Err(null("cost"));
        }
        if out_cols.is_null() {
            return Err(null("out_cols"));
        }
        let len = rows.checked_mul(cols).ok_or_else(|| Failure(Msf3dStatus::InputError, "matrix too large".into()))?;
        let flat = std::slice::from_raw_parts(cost, len);
        let matrix: Vec<Vec<f64>> = if cols == 0 { vec![Vec::new(); rows] } else { flat.chunks(cols).map(<[f64]>::to_vec).collect() };
        let assignment = hungarian(&matrix)?;
        ptr::copy_nonoverlapping(assignment.as_ptr(), out_cols, rows);
        Ok(())
    })
}
