//! C interface: opaque model and confusion-matrix handles, integer status
//! codes, and a per-thread message describing the last failure.
//!
//! Every function returning [`MsegStatus`] leaves its out-parameters
//! untouched on failure. Handles are freed with their `_free` function;
//! passing NULL to a `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use marsseg::data::rgb_to_tensor_raw;
use marsseg::metrics::ConfusionMatrix;
use marsseg::network::{Model, NetworkConfig};
use marsseg::train::TrainState;
use marsseg::{Error, LabelMap};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsegStatus {
    Ok = 0,
    /// A required pointer was NULL.
    NullPointer = 1,
    /// Bad configuration or argument value.
    Config = 2,
    /// Training diverged.
    NonFinite = 3,
    /// A dataset or split with no samples.
    Empty = 4,
    /// Image extents the network cannot take.
    Geometry = 5,
    /// Unreadable or corrupt checkpoint.
    Checkpoint = 6,
    Io = 7,
    /// Caller-provided buffer too small.
    BufferTooSmall = 8,
    /// Any other library error.
    Internal = 9,
    /// A Rust panic was caught at the boundary.
    Panic = 10,
}

/// A trained (or freshly initialized) network.
pub struct MsegModel {
    model: Model<f32>,
}

/// Accumulated per-class pixel counts.
pub struct MsegConfusion {
    inner: ConfusionMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn status_of(e: &Error) -> MsegStatus {
    match e {
        Error::Config(_) => MsegStatus::Config,
        Error::NonFiniteLoss { .. } => MsegStatus::NonFinite,
        Error::Empty(_) => MsegStatus::Empty,
        Error::Geometry(_) => MsegStatus::Geometry,
        Error::Format(_) | Error::Integrity(_) | Error::State(_) => MsegStatus::Checkpoint,
        Error::Io(_) | Error::Image(_) => MsegStatus::Io,
        _ => MsegStatus::Internal,
    }
}

struct Fail(MsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MsegStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, converting errors and panics to a status and recording the
/// message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsegStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MsegStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(MsegStatus::Config, format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mseg_last_error(buf: *mut c_char, len: usize) -> usize {
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

/// Static NUL-terminated library version.
#[no_mangle]
pub extern "C" fn mseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads the network stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mseg_model_load(path: *const c_char, out: *mut *mut MsegModel) -> MsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let state = TrainState::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MsegModel { model: state.model }));
        Ok(())
    })
}

/// Creates an untrained network from a preset (`tiny`, `micro`, `desk`,
/// `full`) with deterministic initialization.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mseg_model_new(
    preset: *const c_char,
    num_classes: usize,
    seed: u64,
    out: *mut *mut MsegModel,
) -> MsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if preset.is_null() {
            return Err(null("preset"));
        }
        let name =
            CStr::from_ptr(preset).to_str().map_err(|_| Fail(MsegStatus::Config, "preset is not UTF-8".into()))?;
        let config = NetworkConfig::preset(name, num_classes).map_err(|e| Fail(MsegStatus::Config, e.to_string()))?;
        config.validate().map_err(|e| Fail(MsegStatus::Config, e.to_string()))?;
        let model = Model::new(&config, seed)?;
        *out = Box::into_raw(Box::new(MsegModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mseg_model_free(model: *mut MsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model predicts; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mseg_model_num_classes(model: *const MsegModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().num_classes)
}

/// Smallest extent >= `n` the model accepts without padding.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mseg_model_admissible_extent(model: *const MsegModel, n: usize) -> usize {
    model.as_ref().map_or(0, |m| m.model.admissible_extent(n))
}

/// Segments one interleaved 8-bit RGB image of `height` x `width` pixels
/// into `out_mask` (`height * width` class ids, row-major). With
/// `auto_pad` nonzero, inadmissible extents are padded and the result
/// cropped back; otherwise they yield `MSEG_STATUS_GEOMETRY`.
///
/// # Safety
/// `rgb` must point to `3 * height * width` bytes and `out_mask` to
/// `mask_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mseg_model_predict(
    model: *const MsegModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    auto_pad: i32,
    out_mask: *mut u8,
    mask_len: usize,
) -> MsegStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out_mask.is_null() {
            return Err(null("out_mask"));
        }
        let pixels = height
            .checked_mul(width)
            .filter(|&p| p > 0)
            .ok_or_else(|| Fail(MsegStatus::Config, format!("bad extents {height}x{width}")))?;
        if mask_len < pixels {
            return Err(Fail(MsegStatus::BufferTooSmall, format!("mask buffer holds {mask_len} bytes, need {pixels}")));
        }
        let raw = std::slice::from_raw_parts(rgb, 3 * pixels);
        let image = rgb_to_tensor_raw(raw, height, width)?;
        let mask = m.model.predict_image(&image, auto_pad != 0)?;
        std::slice::from_raw_parts_mut(out_mask, pixels).copy_from_slice(mask.data());
        Ok(())
    })
}

/// Empty confusion matrix over `num_classes` classes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mseg_confusion_new(num_classes: usize, out: *mut *mut MsegConfusion) -> MsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(1..=255).contains(&num_classes) {
            return Err(Fail(MsegStatus::Config, format!("num_classes must be 1..=255, got {num_classes}")));
        }
        *out = Box::into_raw(Box::new(MsegConfusion { inner: ConfusionMatrix::new(num_classes) }));
        Ok(())
    })
}

/// # Safety
/// `conf` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mseg_confusion_free(conf: *mut MsegConfusion) {
    if !conf.is_null() {
        drop(Box::from_raw(conf));
    }
}

/// Adds `len` prediction/target pixel pairs; target value 255 is ignored.
///
/// # Safety
/// `pred` and `target` must each point to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mseg_confusion_add(
    conf: *mut MsegConfusion,
    pred: *const u8,
    target: *const u8,
    len: usize,
) -> MsegStatus {
    guard(|| {
        let c = conf.as_mut().ok_or_else(|| null("conf"))?;
        if pred.is_null() || target.is_null() {
            return Err(null("pred/target"));
        }
        if len == 0 {
            return Ok(());
        }
        let p = LabelMap::new([1, 1, len], std::slice::from_raw_parts(pred, len).to_vec())?;
        let t = LabelMap::new([1, 1, len], std::slice::from_raw_parts(target, len).to_vec())?;
        c.inner.accumulate(&p, &t)?;
        Ok(())
    })
}

/// Writes per-class IoU into `iou[0..n]`; classes absent from both
/// prediction and target get NaN. `miou` (optional) receives the mean over
/// present classes, NaN when none is present.
///
/// # Safety
/// `iou` must point to `n` writable doubles; `miou` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn mseg_confusion_iou(
    conf: *const MsegConfusion,
    iou: *mut f64,
    n: usize,
    miou: *mut f64,
) -> MsegStatus {
    guard(|| {
        let c = conf.as_ref().ok_or_else(|| null("conf"))?;
        if iou.is_null() {
            return Err(null("iou"));
        }
        let k = c.inner.num_classes();
        if n < k {
            return Err(Fail(MsegStatus::BufferTooSmall, format!("iou buffer holds {n} values, need {k}")));
        }
        let out = std::slice::from_raw_parts_mut(iou, k);
        for (o, v) in out.iter_mut().zip(c.inner.iou_per_class()) {
            *o = v.unwrap_or(f64::NAN);
        }
        if !miou.is_null() {
            *miou = c.inner.miou().unwrap_or(f64::NAN);
        }
        Ok(())
    })
}
