//! C ABI for the enhancement model, the image metrics and the synthetic
//! degradation.
//!
//! Images cross the boundary as planar `float` buffers of shape
//! `3 x height x width` (all red values, then green, then blue) with values
//! in `[0, 1]`. Every function returns a status code; on failure
//! `uie_last_error` describes what went wrong on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use uie_unfold::checkpoint::Checkpoint;
use uie_unfold::data::{synth_degrade, DegradeParams, ImageTensor};
use uie_unfold::losses::LossConfig;
use uie_unfold::{metrics, pipeline, Error, Model};

pub const UIE_OK: i32 = 0;
pub const UIE_ERR_NULL_POINTER: i32 = 1;
pub const UIE_ERR_INVALID_ARGUMENT: i32 = 2;
pub const UIE_ERR_CONFIG: i32 = 3;
pub const UIE_ERR_IO: i32 = 4;
pub const UIE_ERR_CHECKPOINT: i32 = 5;
pub const UIE_ERR_SCHEMA_VERSION: i32 = 6;
pub const UIE_ERR_SHAPE: i32 = 7;
pub const UIE_ERR_NUMERIC: i32 = 8;
pub const UIE_ERR_INTERNAL: i32 = 9;
pub const UIE_ERR_PANIC: i32 = 10;

/// Opaque model handle.
pub struct UieModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => UIE_ERR_CONFIG,
        Error::WindowTooLarge { .. } => UIE_ERR_INVALID_ARGUMENT,
        Error::Io(_) | Error::Image { .. } | Error::Dataset(_) => UIE_ERR_IO,
        Error::Checkpoint(_) => UIE_ERR_CHECKPOINT,
        Error::SchemaVersion { .. } => UIE_ERR_SCHEMA_VERSION,
        Error::Shape(_) => UIE_ERR_SHAPE,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => UIE_ERR_NUMERIC,
        Error::Tensor(_) | Error::Json(_) => UIE_ERR_INTERNAL,
    }
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            UIE_OK
        }
        Ok(Err(Failure(code, msg))) => {
            set_last_error(msg);
            code
        }
        Err(_) => {
            set_last_error("internal panic".into());
            UIE_ERR_PANIC
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(UIE_ERR_NULL_POINTER, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

fn pixels(height: usize, width: usize) -> Result<usize, Failure> {
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure(UIE_ERR_INVALID_ARGUMENT, format!("bad image size {height}x{width}")))
}

/// # Safety
/// `data` must point to `3 * height * width` readable floats.
unsafe fn read_image(data: *const f32, height: usize, width: usize, name: &str) -> Result<ImageTensor, Failure> {
    non_null(data, name)?;
    let n = pixels(height, width)?;
    let values = std::slice::from_raw_parts(data, n).to_vec();
    Ok(ImageTensor::new(3, height, width, values)?)
}

/// # Safety
/// `out` must point to `img.data.len()` writable floats.
unsafe fn write_image(img: &ImageTensor, out: *mut f32) {
    ptr::copy_nonoverlapping(img.data.as_ptr(), out, img.data.len());
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn uie_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uie_model_load(path: *const c_char, out: *mut *mut UieModel) -> i32 {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(UIE_ERR_INVALID_ARGUMENT, "path is not UTF-8".into()))?;
        let model = Checkpoint::load(&PathBuf::from(path))?.to_model()?;
        *out = Box::into_raw(Box::new(UieModel { model }));
        Ok(())
    })
}

/// Releases a handle from `uie_model_load`. Null is ignored.
///
/// # Safety
/// `model` must come from `uie_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uie_model_free(model: *mut UieModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of unfolding stages of the loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uie_model_stages(model: *const UieModel, out: *mut usize) -> i32 {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.config.stages;
        Ok(())
    })
}

/// Enhances one planar RGB image of any size into `output` (same size),
/// clamped to `[0, 1]`.
///
/// # Safety
/// `input` and `output` must each hold `3 * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn uie_model_enhance(
    model: *const UieModel,
    input: *const f32,
    height: usize,
    width: usize,
    output: *mut f32,
) -> i32 {
    guard(|| {
        non_null(model, "model")?;
        non_null(output, "output")?;
        let img = read_image(input, height, width, "input")?;
        let out = pipeline::enhance_image(&(*model).model, &img)?;
        write_image(&out, output);
        Ok(())
    })
}

type Metric = fn(&ImageTensor, &ImageTensor) -> uie_unfold::Result<f64>;

unsafe fn metric(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64, f: Metric) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        let a = read_image(a, height, width, "a")?;
        let b = read_image(b, height, width, "b")?;
        *out = f(&a, &b)?;
        Ok(())
    })
}

/// PSNR in dB over all channels; identical images give `+inf`.
///
/// # Safety
/// `a` and `b` must each hold `3 * height * width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn uie_psnr(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> i32 {
    metric(a, b, height, width, out, metrics::psnr)
}

/// Mean SSIM with an 11x11 Gaussian window; both sides must be at least 11.
///
/// # Safety
/// As for `uie_psnr`.
#[no_mangle]
pub unsafe extern "C" fn uie_ssim(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> i32 {
    metric(a, b, height, width, out, |a, b| metrics::ssim(a, b, &LossConfig::default()))
}

/// Mean CIEDE2000 color difference of sRGB images.
///
/// # Safety
/// As for `uie_psnr`.
#[no_mangle]
pub unsafe extern "C" fn uie_delta_e(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> i32 {
    metric(a, b, height, width, out, metrics::delta_e)
}

/// `out = t * clean + (1 - t) * background + noise`, per channel, clamped.
///
/// # Safety
/// `clean` and `output` must each hold `3 * height * width` floats;
/// `transmission` and `background` must each hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn uie_synth_degrade(
    clean: *const f32,
    height: usize,
    width: usize,
    transmission: *const f64,
    background: *const f64,
    noise_std: f64,
    seed: u64,
    output: *mut f32,
) -> i32 {
    guard(|| {
        non_null(transmission, "transmission")?;
        non_null(background, "background")?;
        non_null(output, "output")?;
        let img = read_image(clean, height, width, "clean")?;
        let triple = |p: *const f64| {
            let s = std::slice::from_raw_parts(p, 3);
            [s[0], s[1], s[2]]
        };
        let params = DegradeParams {
            transmission: triple(transmission),
            background: triple(background),
            noise_std,
            seed,
        };
        write_image(&synth_degrade(&img, &params)?, output);
        Ok(())
    })
}
