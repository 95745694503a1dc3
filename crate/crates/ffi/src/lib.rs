//! C interface to the change-detection model and the evaluation metrics.
//!
//! Every function returns a [`SiliStatus`]. On failure a message describing
//! the error is kept per thread and can be read with [`sili_last_error`].
//! Panics never cross the boundary; they are reported as `SILI_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sili_core::harness::checkpoint;
use sili_core::image::{ImageTensor, Mask};
use sili_core::metrics::{confusion, report, ConfusionCounts};
use sili_core::model::ChangeModel;
use sili_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiliStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numeric = 5,
    Internal = 6,
    Panic = 7,
}

/// A loaded model. Create with [`sili_model_load`], release with
/// [`sili_model_free`].
pub struct SiliModel {
    model: ChangeModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SiliConfusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SiliMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> SiliStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => SiliStatus::InvalidArgument,
        Error::Io { .. } | Error::Image { .. } | Error::Parse { .. } | Error::Csv(_) => SiliStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => SiliStatus::Checkpoint,
        Error::NonFinite { .. } => SiliStatus::Numeric,
        Error::Tensor(_) => SiliStatus::Internal,
    }
}

struct Failure(SiliStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SiliStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SiliStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SiliStatus {
    // Inference is read-only on the model, so a panic leaves it usable.
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SiliStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SiliStatus::Panic
        }
    }
}

/// Reads `h·w·3` interleaved RGB bytes.
unsafe fn rgb_image(data: *const u8, height: usize, width: usize, what: &str) -> Result<ImageTensor, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    let len = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| invalid(format!("{what} dimensions overflow")))?;
    // SAFETY: the caller guarantees `len` readable bytes.
    let bytes = std::slice::from_raw_parts(data, len);
    let values = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(ImageTensor::new(height, width, 3, values)?)
}

unsafe fn mask_from(data: *const u8, len: usize, what: &str) -> Result<Vec<u8>, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller guarantees `len` readable bytes.
    let bytes = std::slice::from_raw_parts(data, len);
    if let Some(i) = bytes.iter().position(|&b| b > 1) {
        return Err(invalid(format!("{what}[{i}] = {} is not 0 or 1", bytes[i])));
    }
    Ok(bytes.to_vec())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn sili_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sili_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `checkpoint_dir` must be a NUL-terminated UTF-8 path and `out` a valid
/// pointer. On success `*out` owns a model that must be released with
/// [`sili_model_free`]; on failure `*out` is set to null.
#[no_mangle]
pub unsafe extern "C" fn sili_model_load(checkpoint_dir: *const c_char, out: *mut *mut SiliModel) -> SiliStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if checkpoint_dir.is_null() {
            return Err(null("checkpoint_dir"));
        }
        let dir = CStr::from_ptr(checkpoint_dir)
            .to_str()
            .map_err(|_| invalid("checkpoint_dir is not UTF-8"))?;
        let model = checkpoint::load(Path::new(dir))?.build_model()?;
        *out = Box::into_raw(Box::new(SiliModel { model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`sili_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sili_model_free(model: *mut SiliModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts a change mask for one image pair.
///
/// Images are interleaved 8-bit RGB, row-major. The smaller image is treated
/// as the low-resolution observation. `ratio <= 0` takes the ratio of the
/// image heights. `mask_out` receives one byte per pixel of the larger image
/// (1 = change) and must hold `mask_len >= hr_height · hr_width` bytes.
///
/// # Safety
/// `model` must be a live model; `pre` and `post` must point to
/// `height · width · 3` readable bytes each; `mask_out` to `mask_len`
/// writable bytes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sili_model_predict(
    model: *const SiliModel,
    pre: *const u8,
    pre_height: usize,
    pre_width: usize,
    post: *const u8,
    post_height: usize,
    post_width: usize,
    ratio: f64,
    mask_out: *mut u8,
    mask_len: usize,
) -> SiliStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if mask_out.is_null() {
            return Err(null("mask_out"));
        }
        if ratio.is_nan() {
            return Err(invalid("ratio is NaN"));
        }
        let a = rgb_image(pre, pre_height, pre_width, "pre")?;
        let b = rgb_image(post, post_height, post_width, "post")?;
        let hr = if a.height() >= b.height() { &a } else { &b };
        let need = hr.height() * hr.width();
        if mask_len < need {
            return Err(invalid(format!("mask_out holds {mask_len} bytes, {need} needed")));
        }
        let mask: Mask = model.model.predict_pair(&a, &b, (ratio > 0.0).then_some(ratio))?;
        // SAFETY: checked above that `mask_out` holds at least `need` bytes.
        std::slice::from_raw_parts_mut(mask_out, need).copy_from_slice(mask.data());
        Ok(())
    })
}

/// Confusion counts of a predicted mask against a reference, both `len`
/// bytes of 0/1.
///
/// # Safety
/// `pred` and `gt` must point to `len` readable bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sili_confusion(pred: *const u8, gt: *const u8, len: usize, out: *mut SiliConfusion) -> SiliStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = Mask::new(1, len, mask_from(pred, len, "pred")?)?;
        let g = Mask::new(1, len, mask_from(gt, len, "gt")?)?;
        let c = confusion(&p, &g)?;
        *out = SiliConfusion {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        };
        Ok(())
    })
}

/// Precision, recall, F1, IoU and overall accuracy from confusion counts.
///
/// # Safety
/// `counts` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sili_metrics(counts: *const SiliConfusion, out: *mut SiliMetrics) -> SiliStatus {
    guard(|| {
        let c = counts.as_ref().ok_or_else(|| null("counts"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = report(&ConfusionCounts {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        });
        *out = SiliMetrics {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            iou: r.iou,
            oa: r.oa,
        };
        Ok(())
    })
}
