//! C ABI over the `localnorm` crate.
//!
//! Every fallible function returns an [`LnStatus`]; on failure the message is
//! available from [`ln_last_error`] on the same thread. Models are opaque
//! [`LnModel`] handles released with [`ln_model_free`]. Pixel buffers are
//! `f32` NHWC in `[0, 255]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use localnorm::data::Dataset;
use localnorm::eval::{predict_dataset, EvalKind, EvalMode, EvalOptions};
use localnorm::model::{load_checkpoint, Model};
use localnorm::noise::{apply_noise_batch, NoiseFamily, NoiseSpec};
use localnorm::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Degenerate = 6,
    Numeric = 7,
    Internal = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LnEvalMode {
    Batch = 0,
    Voting = 1,
    FrozenBn = 2,
    Single = 3,
    SingleVoting = 4,
    SingleVotingRot90 = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LnNoiseFamily {
    Agn = 0,
    Apn = 1,
    Mbn = 2,
}

/// Opaque model handle.
pub struct LnModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LnStatus {
    match e {
        Error::Shape { .. } | Error::IndivisibleGroups(_) => LnStatus::Shape,
        Error::DegenerateGroup(_) | Error::DegenerateStatistics(_) => LnStatus::Degenerate,
        Error::NonFinite(_) | Error::Diverged { .. } => LnStatus::Numeric,
        Error::Io { .. } => LnStatus::Io,
        Error::Format { .. } => LnStatus::Format,
        Error::InvalidArgument(_) | Error::Config(_) | Error::UninitializedStats(_) => LnStatus::InvalidArgument,
        _ => LnStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (LnStatus, String)>) -> LnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LnStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LnStatus::Panic
        }
    }
}

fn lib<T>(r: localnorm::Result<T>) -> Result<T, (LnStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (LnStatus, String) {
    (LnStatus::NullPointer, format!("{what} is null"))
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ln_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ln_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads an `f32` or `f64` checkpoint into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ln_model_load(path: *const c_char, out: *mut *mut LnModel) -> LnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| (LnStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = lib(load_checkpoint::<f32>(Path::new(path)))?;
        *out = Box::into_raw(Box::new(LnModel { inner: ck.model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`ln_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ln_model_free(model: *mut LnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `[height, width, channels]` to `shape` and the class count to `classes`.
///
/// # Safety
/// `model` must be a live handle, `shape` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn ln_model_info(model: *const LnModel, shape: *mut usize, classes: *mut usize) -> LnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if shape.is_null() || classes.is_null() {
            return Err(null("output"));
        }
        let cfg = m.inner.config();
        std::ptr::copy_nonoverlapping(cfg.input.as_ptr(), shape, 3);
        *classes = cfg.classes;
        Ok(())
    })
}

fn eval_mode(mode: LnEvalMode) -> EvalMode {
    match mode {
        LnEvalMode::Batch => EvalMode::new(EvalKind::Batch),
        LnEvalMode::Voting => EvalMode::new(EvalKind::Voting),
        LnEvalMode::FrozenBn => EvalMode::new(EvalKind::FrozenBn),
        LnEvalMode::Single => EvalMode::new(EvalKind::Single),
        LnEvalMode::SingleVoting => EvalMode::new(EvalKind::SingleVoting),
        LnEvalMode::SingleVotingRot90 => EvalMode::rot90(EvalKind::SingleVoting),
    }
}

/// Predicts `n` images of the model's input shape from `pixels` into `labels`.
/// `batch_size` sets the evaluation batch for batched modes; `seed` drives
/// group selection in single-image modes.
///
/// # Safety
/// `pixels` must hold `n * H * W * C` floats and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn ln_model_predict(
    model: *const LnModel,
    pixels: *const f32,
    n: usize,
    mode: LnEvalMode,
    batch_size: usize,
    seed: u64,
    labels: *mut u32,
) -> LnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() || labels.is_null() {
            return Err(null("buffer"));
        }
        if n == 0 {
            return Err((LnStatus::InvalidArgument, "no images".into()));
        }
        let [h, w, c] = m.inner.config().input;
        let data = std::slice::from_raw_parts(pixels, n * h * w * c).to_vec();
        let images = lib(Tensor::new(&[n, h, w, c], data))?;
        let ds = lib(Dataset::new(images, vec![0; n], m.inner.config().classes, "ffi"))?;
        let opts = EvalOptions { batch_size, seed, ..EvalOptions::default() };
        let preds = lib(predict_dataset(&m.inner, &ds, &eval_mode(mode), None, &opts))?;
        for (i, p) in preds.into_iter().enumerate() {
            *labels.add(i) = p as u32;
        }
        Ok(())
    })
}

/// Degrades an `[n, h, w, c]` pixel buffer in place; image `i` draws from a
/// generator derived from `(seed, i)`, matching the library's batch noise.
///
/// # Safety
/// `pixels` must hold `n * h * w * c` floats.
#[no_mangle]
pub unsafe extern "C" fn ln_apply_noise(
    pixels: *mut f32,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    family: LnNoiseFamily,
    sigma: f64,
    seed: u64,
) -> LnStatus {
    guard(|| {
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let family = match family {
            LnNoiseFamily::Agn => NoiseFamily::Agn,
            LnNoiseFamily::Apn => NoiseFamily::Apn,
            LnNoiseFamily::Mbn => NoiseFamily::Mbn,
        };
        let spec = NoiseSpec::new(family, sigma, seed);
        lib(spec.validate())?;
        let buf = std::slice::from_raw_parts_mut(pixels, n * h * w * c);
        let images = lib(Tensor::new(&[n, h, w, c], buf.to_vec()))?;
        buf.copy_from_slice(lib(apply_noise_batch(&images, &spec))?.data());
        Ok(())
    })
}
