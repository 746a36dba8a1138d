//! C ABI over the lang4d library: load a checkpoint and a scene, run a text
//! query, read back masks, segments and lifted points.
//!
//! Every function returns an [`L4dStatus`]; on failure the message is kept
//! per thread and can be fetched with [`l4d_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lang4d::checkpoint::Checkpoint;
use lang4d::pipeline::{embedding_query, query_scene, Model};
use lang4d::query::Query4DResult;
use lang4d::sbd::Branch;
use lang4d::synth::{read_scene, Scene};
use lang4d::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L4dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Checkpoint = 5,
    NotFound = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L4dBranch {
    Agnostic = 0,
    Sensitive = 1,
}

impl From<L4dBranch> for Branch {
    fn from(b: L4dBranch) -> Branch {
        match b {
            L4dBranch::Agnostic => Branch::Agnostic,
            L4dBranch::Sensitive => Branch::Sensitive,
        }
    }
}

/// A trained model restored from a checkpoint.
pub struct L4dModel {
    model: Model,
    tau: f32,
    tau_t: f32,
}

/// A synthetic scene directory (`<bundle>/scene/<name>`).
pub struct L4dScene {
    scene: Scene,
}

/// Masks, segment and point clouds of one query.
pub struct L4dQueryResult {
    result: Query4DResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
    });
}

fn status_of(err: &Error) -> L4dStatus {
    match err {
        Error::Io { .. } => L4dStatus::Io,
        Error::Format(_) | Error::Json(_) => L4dStatus::Format,
        Error::Checkpoint { .. } => L4dStatus::Checkpoint,
        _ => L4dStatus::InvalidArgument,
    }
}

fn fail(status: L4dStatus, msg: &str) -> L4dStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (L4dStatus, String)>) -> L4dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            L4dStatus::Ok
        }
        Ok(Err((s, m))) => fail(s, &m),
        Err(_) => fail(L4dStatus::Panic, "internal panic"),
    }
}

fn lib(e: Error) -> (L4dStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (L4dStatus, String) {
    (L4dStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (L4dStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (L4dStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (L4dStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn l4d_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Width of a branch's compressed feature space (3 or 6).
#[no_mangle]
pub extern "C" fn l4d_branch_dim(branch: L4dBranch) -> usize {
    Branch::from(branch).dim()
}

/// Loads a checkpoint written by `lang4d train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn l4d_model_load(path: *const c_char, out: *mut *mut L4dModel) -> L4dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let ck = Checkpoint::load(Path::new(path)).map_err(lib)?;
        let (model, _) = ck.to_model(None).map_err(lib)?;
        let m = L4dModel {
            model,
            tau: ck.config.eval.tau,
            tau_t: ck.config.eval.tau_t,
        };
        *out = Box::into_raw(Box::new(m));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`l4d_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn l4d_model_free(model: *mut L4dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads one scene directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn l4d_scene_load(dir: *const c_char, out: *mut *mut L4dScene) -> L4dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = str_arg(dir, "dir")?;
        let scene = read_scene(Path::new(dir)).map_err(lib)?;
        *out = Box::into_raw(Box::new(L4dScene { scene }));
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a handle from [`l4d_scene_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn l4d_scene_free(scene: *mut L4dScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of frames of a scene, 0 for a null handle.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn l4d_scene_num_frames(scene: *const L4dScene) -> usize {
    scene.as_ref().map_or(0, |s| s.scene.frames.len())
}

fn run(
    model: &L4dModel,
    scene: &L4dScene,
    mut tq: lang4d::query::TextQuery,
    tau: f32,
    tau_t: f32,
    oracle_geometry: bool,
) -> Result<*mut L4dQueryResult, (L4dStatus, String)> {
    if tau.is_finite() {
        tq.tau = tau;
    } else {
        tq.tau = model.tau;
    }
    let tau_t = if tau_t.is_finite() { tau_t } else { model.tau_t };
    let result = query_scene(&model.model, &scene.scene, &tq, oracle_geometry, tau_t).map_err(lib)?;
    Ok(Box::into_raw(Box::new(L4dQueryResult { result })))
}

/// Runs a query stored with the scene. Pass NaN for `tau` or `tau_t` to
/// use the checkpoint's thresholds.
///
/// # Safety
/// Handles must be live, `name` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn l4d_query_named(
    model: *const L4dModel,
    scene: *const L4dScene,
    name: *const c_char,
    tau: f32,
    tau_t: f32,
    oracle_geometry: bool,
    out: *mut *mut L4dQueryResult,
) -> L4dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = handle(model, "model")?;
        let scene = handle(scene, "scene")?;
        let name = str_arg(name, "name")?;
        let q = scene
            .scene
            .query(name)
            .ok_or_else(|| (L4dStatus::NotFound, format!("scene has no query `{name}`")))?;
        let codec = model.model.codec(scene.scene.name()).map_err(lib)?;
        let tq = codec.compress(q).map_err(lib)?;
        *out = run(model, scene, tq, tau, tau_t, oracle_geometry)?;
        Ok(())
    })
}

/// Runs a query given as a vector: either full-size (compressed with the
/// scene's autoencoder) or already of the branch's width.
///
/// # Safety
/// Handles must be live, `embedding` must point to `len` floats, `out`
/// writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn l4d_query_embedding(
    model: *const L4dModel,
    scene: *const L4dScene,
    branch: L4dBranch,
    embedding: *const f32,
    len: usize,
    tau: f32,
    tau_t: f32,
    oracle_geometry: bool,
    out: *mut *mut L4dQueryResult,
) -> L4dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = handle(model, "model")?;
        let scene = handle(scene, "scene")?;
        if embedding.is_null() {
            return Err(null("embedding"));
        }
        let v = std::slice::from_raw_parts(embedding, len).to_vec();
        let codec = model.model.codec(scene.scene.name()).map_err(lib)?;
        let tq = embedding_query(codec, "embedding", branch.into(), v).map_err(lib)?;
        *out = run(model, scene, tq, tau, tau_t, oracle_geometry)?;
        Ok(())
    })
}

/// # Safety
/// `result` must be null or a handle from a query call, freed once.
#[no_mangle]
pub unsafe extern "C" fn l4d_result_free(result: *mut L4dQueryResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Number of frames covered by a result, 0 for a null handle.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn l4d_result_num_frames(result: *const L4dQueryResult) -> usize {
    result.as_ref().map_or(0, |r| r.result.frames.len())
}

/// Copies the temporal segment (ascending frame indices) into `frames`.
/// `written` receives the segment length; if it exceeds `cap` nothing is
/// copied and `BufferTooSmall` is returned.
///
/// # Safety
/// `frames` must point to `cap` writable values (or be null with cap 0);
/// `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn l4d_result_segment(
    result: *const L4dQueryResult,
    frames: *mut usize,
    cap: usize,
    written: *mut usize,
) -> L4dStatus {
    guard(|| {
        let r = handle(result, "result")?;
        if written.is_null() {
            return Err(null("written"));
        }
        let seg = &r.result.temporal_segment;
        *written = seg.len();
        if seg.len() > cap {
            return Err((L4dStatus::BufferTooSmall, format!("segment has {} frames", seg.len())));
        }
        if !seg.is_empty() {
            if frames.is_null() {
                return Err(null("frames"));
            }
            ptr::copy_nonoverlapping(seg.as_ptr(), frames, seg.len());
        }
        Ok(())
    })
}

/// Copies frame `t`'s binary mask (row-major, token grid) into `mask`;
/// `height` and `width` receive its size.
///
/// # Safety
/// `mask` must point to `cap` writable bytes; `height` and `width` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn l4d_result_mask(
    result: *const L4dQueryResult,
    t: usize,
    mask: *mut u8,
    cap: usize,
    height: *mut usize,
    width: *mut usize,
) -> L4dStatus {
    guard(|| {
        let r = handle(result, "result")?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        let f = r
            .result
            .frames
            .get(t)
            .ok_or_else(|| (L4dStatus::InvalidArgument, format!("frame {t} out of range")))?;
        let shape = f.relevancy.shape();
        *height = shape[0];
        *width = shape[1];
        if f.mask.len() > cap {
            return Err((L4dStatus::BufferTooSmall, format!("mask has {} cells", f.mask.len())));
        }
        if mask.is_null() {
            return Err(null("mask"));
        }
        ptr::copy_nonoverlapping(f.mask.as_ptr(), mask, f.mask.len());
        Ok(())
    })
}

/// Number of lifted points in frame `t` (0 outside the segment).
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn l4d_result_num_points(result: *const L4dQueryResult, t: usize) -> usize {
    result
        .as_ref()
        .and_then(|r| r.result.clouds.get(t))
        .map_or(0, |c| c.len())
}

/// Copies frame `t`'s points as `x y z` triples into `xyz` (`cap` floats).
///
/// # Safety
/// `xyz` must point to `cap` writable floats.
#[no_mangle]
pub unsafe extern "C" fn l4d_result_points(
    result: *const L4dQueryResult,
    t: usize,
    xyz: *mut f32,
    cap: usize,
) -> L4dStatus {
    guard(|| {
        let r = handle(result, "result")?;
        let cloud = r
            .result
            .clouds
            .get(t)
            .ok_or_else(|| (L4dStatus::InvalidArgument, format!("frame {t} out of range")))?;
        if 3 * cloud.len() > cap {
            return Err((L4dStatus::BufferTooSmall, format!("{} points need {} floats", cloud.len(), 3 * cloud.len())));
        }
        if cloud.is_empty() {
            return Ok(());
        }
        if xyz.is_null() {
            return Err(null("xyz"));
        }
        for (i, p) in cloud.points.iter().enumerate() {
            for k in 0..3 {
                *xyz.add(3 * i + k) = p[k] as f32;
            }
        }
        Ok(())
    })
}

/// Writes the result to `dir` in the same layout as `lang4d query`.
///
/// # Safety
/// `dir` and `name` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn l4d_result_write(
    result: *const L4dQueryResult,
    dir: *const c_char,
    name: *const c_char,
) -> L4dStatus {
    guard(|| {
        let r = handle(result, "result")?;
        let dir = str_arg(dir, "dir")?;
        let name = str_arg(name, "name")?;
        r.result.write(Path::new(dir), name).map_err(lib)
    })
}
