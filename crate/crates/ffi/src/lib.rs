//! C ABI over the geowarp library.
//!
//! Every fallible function returns a [`GwStatus`]. On failure a message is
//! kept per thread and can be read with [`gw_last_error_message`]. Objects are
//! opaque handles created by `*_new`/`*_load` functions and released with the
//! matching `*_free`. All buffers are row-major; images are `height × width`,
//! RGB values in `[0, 1]` interleaved per pixel, masks one byte per pixel
//! (nonzero = foreground). Matrices are row-major `f64`: intrinsics 3×3,
//! world-to-camera extrinsics 4×4.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use geowarp::geometry::{Extrinsics, Intrinsics};
use geowarp::grid::{Grid, RgbImage};
use geowarp::metrics;
use geowarp::prompt_lifting::PointCloud;
use geowarp::segmenter::{SegmenterConfig, SegmenterModel};
use geowarp::warp::{compute_warp_field, warp_logits};
use geowarp::Error;
use nalgebra::{Matrix3, Matrix4, Vector3};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GwStatus {
    Ok = 0,
    /// Invalid configuration or argument value.
    Config = 1,
    /// Missing, malformed or inconsistent data.
    Data = 2,
    /// A computation produced a non-finite value.
    Numeric = 3,
    /// A required pointer was null.
    NullArgument = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// The library panicked; the handle involved should be freed.
    Internal = 6,
}

/// Opaque segmenter model.
pub struct GwModel {
    inner: SegmenterModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn status_of(e: &Error) -> GwStatus {
    match e.exit_code() {
        1 => GwStatus::Config,
        3 => GwStatus::Numeric,
        _ => GwStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GwStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer passed as {name}"));
            GwStatus::NullArgument
        }
        Ok(Err(Failure::Utf8(name))) => {
            set_error(format!("{name} is not valid UTF-8"));
            GwStatus::InvalidUtf8
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            GwStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, name: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(name))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    let p = non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(name))
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    Ok(std::slice::from_raw_parts(non_null(p, name)?, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_out<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p as *const T, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn rgb_image(data: &[f64], height: usize, width: usize) -> Result<RgbImage, Failure> {
    let px = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(RgbImage::from_vec(height, width, px)?)
}

fn intrinsics(k: &[f64], height: usize, width: usize) -> Result<Intrinsics, Failure> {
    Ok(Intrinsics::from_matrix(&Matrix3::from_row_slice(k), width, height)?)
}

fn extrinsics(e: &[f64]) -> Result<Extrinsics, Failure> {
    Ok(Extrinsics::from_matrix4(&Matrix4::from_row_slice(e))?)
}

fn cloud(points: &[f64]) -> PointCloud {
    PointCloud::new(points.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn gw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn gw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a model with the default configuration.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn gw_model_new_default(out: *mut *mut GwModel) -> GwStatus {
    guard(|| {
        non_null(out as *const _, "out")?;
        let model = SegmenterModel::new(SegmenterConfig::default())?;
        *out = Box::into_raw(Box::new(GwModel { inner: model }));
        Ok(())
    })
}

/// Creates a model from a segmenter configuration TOML file.
///
/// # Safety
/// `config_path` must be a nul-terminated string; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn gw_model_from_config(config_path: *const c_char, out: *mut *mut GwModel) -> GwStatus {
    guard(|| {
        non_null(out as *const _, "out")?;
        let path = str_arg(config_path, "config_path")?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(Path::new(path), e))?;
        let model = SegmenterModel::new(SegmenterConfig::from_toml_str(&text)?)?;
        *out = Box::into_raw(Box::new(GwModel { inner: model }));
        Ok(())
    })
}

/// Replaces the model's adapters with those in a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gw_model_load_adapters(model: *mut GwModel, path: *const c_char) -> GwStatus {
    guard(|| {
        non_null(model as *const _, "model")?;
        let path = str_arg(path, "path")?;
        (*model).inner.load_adapters(Path::new(path))?;
        Ok(())
    })
}

/// Number of trainable (adapter) parameters.
///
/// # Safety
/// `model` must come from this library; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gw_model_trainable_count(model: *const GwModel, out: *mut usize) -> GwStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out as *const _, "out")?;
        *out = (*model).inner.trainable_count();
        Ok(())
    })
}

/// Per-pixel logits for `text` on an RGB image. `rgb` holds `height*width*3`
/// values, `out_logits` receives `height*width`.
///
/// # Safety
/// Buffers must be valid for the sizes above; `text` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn gw_predict_logits(
    model: *const GwModel,
    rgb: *const f64,
    height: usize,
    width: usize,
    text: *const c_char,
    out_logits: *mut f64,
) -> GwStatus {
    guard(|| {
        non_null(model, "model")?;
        let n = height * width;
        let image = rgb_image(slice_arg(rgb, n * 3, "rgb")?, height, width)?;
        let m = &(*model).inner;
        let instruction = m.parse_text(str_arg(text, "text")?)?;
        let logits = m.predict_logits(&image, &instruction)?;
        slice_out(out_logits, n, "out_logits")?.copy_from_slice(logits.as_slice());
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gw_model_free(model: *mut GwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Warps logits of view `a` (`a_height × a_width`) into view `b` using `b`'s
/// depth (`b_height × b_width`, meters, 0 = invalid). Writes warped logits
/// (0 where invalid) and a validity byte per `b` pixel.
///
/// # Safety
/// Buffers must be valid for the sizes above; `k_*` hold 9 and `e_*` 16 values.
#[no_mangle]
pub unsafe extern "C" fn gw_warp_logits(
    logits_a: *const f64,
    a_height: usize,
    a_width: usize,
    depth_b: *const f64,
    b_height: usize,
    b_width: usize,
    k_a: *const f64,
    k_b: *const f64,
    e_a: *const f64,
    e_b: *const f64,
    out_logits: *mut f64,
    out_valid: *mut u8,
) -> GwStatus {
    guard(|| {
        let nb = b_height * b_width;
        let p_a = Grid::from_vec(a_height, a_width, slice_arg(logits_a, a_height * a_width, "logits_a")?.to_vec())?;
        let depth = Grid::from_vec(b_height, b_width, slice_arg(depth_b, nb, "depth_b")?.to_vec())?;
        let ka = intrinsics(slice_arg(k_a, 9, "k_a")?, a_height, a_width)?;
        let kb = intrinsics(slice_arg(k_b, 9, "k_b")?, b_height, b_width)?;
        let ea = extrinsics(slice_arg(e_a, 16, "e_a")?)?;
        let eb = extrinsics(slice_arg(e_b, 16, "e_b")?)?;
        let field = compute_warp_field(&depth, &ka, &kb, &ea, &eb)?;
        let (warped, valid) = warp_logits(&p_a, &field)?;
        slice_out(out_logits, nb, "out_logits")?.copy_from_slice(warped.as_slice());
        for (o, &v) in slice_out(out_valid, nb, "out_valid")?.iter_mut().zip(valid.iter()) {
            *o = u8::from(v);
        }
        Ok(())
    })
}

/// IoU of two binary masks; 1 when both are empty.
///
/// # Safety
/// `pred` and `gt` must hold `height*width` bytes; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gw_miou(pred: *const u8, gt: *const u8, height: usize, width: usize, out: *mut f64) -> GwStatus {
    guard(|| {
        non_null(out as *const _, "out")?;
        let n = height * width;
        let p = Grid::from_vec(height, width, slice_arg(pred, n, "pred")?.iter().map(|&b| b != 0).collect())?;
        let g = Grid::from_vec(height, width, slice_arg(gt, n, "gt")?.iter().map(|&b| b != 0).collect())?;
        *out = metrics::miou(&p, &g)?;
        Ok(())
    })
}

/// Symmetric Chamfer distance between two clouds of `n_x` and `n_y` xyz
/// triples, divided by `norm_scale` and scaled by 100.
///
/// # Safety
/// `x` holds `3*n_x` and `y` `3*n_y` values; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gw_chamfer(x: *const f64, n_x: usize, y: *const f64, n_y: usize, norm_scale: f64, out: *mut f64) -> GwStatus {
    guard(|| {
        non_null(out as *const _, "out")?;
        let cx = cloud(slice_arg(x, 3 * n_x, "x")?);
        let cy = cloud(slice_arg(y, 3 * n_y, "y")?);
        *out = metrics::chamfer(&cx, &cy, norm_scale)?;
        Ok(())
    })
}

/// Point-cloud F-score at distance threshold `d`.
///
/// # Safety
/// `x` holds `3*n_x` and `y` `3*n_y` values; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gw_fscore(x: *const f64, n_x: usize, y: *const f64, n_y: usize, d: f64, out: *mut f64) -> GwStatus {
    guard(|| {
        non_null(out as *const _, "out")?;
        let cx = cloud(slice_arg(x, 3 * n_x, "x")?);
        let cy = cloud(slice_arg(y, 3 * n_y, "y")?);
        *out = metrics::fscore(&cx, &cy, d)?;
        Ok(())
    })
}
