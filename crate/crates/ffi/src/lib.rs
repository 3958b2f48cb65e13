//! C interface to the tracker.
//!
//! Every function returns an [`HtStatus`]. On failure a description is kept
//! per thread and can be read with [`ht_last_error`]. Models are opaque
//! handles owned by the caller and released with [`ht_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use heattrack::checkpoint;
use heattrack::eval::{compute_metrics, extract_coordinate, ConfusionCounts, EvalConfig};
use heattrack::mdd::FrameTriplet;
use heattrack::model::{Model, ModelConfig, Variant};
use heattrack::{Error, Tensor4};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Config = 6,
    NonFinite = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct HtModel {
    model: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HtMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when the metric's denominator is zero; the value is then 0.
    pub accuracy_defined: bool,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HtDetection {
    pub found: bool,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn status_of(e: &Error) -> HtStatus {
    match e {
        Error::Shape { .. } | Error::Divisibility { .. } | Error::NonScalarLoss(_) => HtStatus::Shape,
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::Diverged { .. } => HtStatus::NonFinite,
        Error::Io { .. } | Error::Dataset(_) => HtStatus::Io,
        Error::Checkpoint(_) => HtStatus::Checkpoint,
        Error::Config(_) => HtStatus::Config,
        _ => HtStatus::InvalidArgument,
    }
}

fn fail(status: HtStatus, msg: impl Into<String>) -> HtStatus {
    set_error(msg);
    status
}

/// Run `f`, recording errors and turning panics into [`HtStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), HtStatus>) -> HtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HtStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(HtStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: heattrack::Result<T>) -> Result<T, HtStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, HtStatus> {
    if p.is_null() {
        return Err(fail(HtStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HtStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a>(m: *const HtModel) -> Result<&'a HtModel, HtStatus> {
    m.as_ref().ok_or_else(|| fail(HtStatus::NullPointer, "model handle is null"))
}

fn null(what: &str) -> HtStatus {
    fail(HtStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread. Empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ht_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ht_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fresh model. `variant` is one of `v2`, `v4like`, `v2_mdd`, `v2_rstr`, `v5`.
/// Height and width must be multiples of 8 and of the patch size.
///
/// # Safety
/// `variant` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ht_model_new(
    variant: *const c_char,
    height: usize,
    width: usize,
    seed: u64,
    out: *mut *mut HtModel,
) -> HtStatus {
    if out.is_null() {
        return null("out");
    }
    *out = ptr::null_mut();
    guard(|| {
        let variant: Variant = lift(c_str(variant, "variant")?.parse())?;
        let model = lift(Model::new(ModelConfig {
            variant,
            height,
            width,
            seed,
            ..ModelConfig::default()
        }))?;
        *out = Box::into_raw(Box::new(HtModel { model }));
        Ok(())
    })
}

/// Model from a checkpoint manifest written by `heattrack train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ht_model_load(path: *const c_char, out: *mut *mut HtModel) -> HtStatus {
    if out.is_null() {
        return null("out");
    }
    *out = ptr::null_mut();
    guard(|| {
        let path = c_str(path, "path")?;
        let ck = lift(checkpoint::load(Path::new(path)))?;
        *out = Box::into_raw(Box::new(HtModel { model: ck.model }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `ht_model_new` or `ht_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ht_model_free(model: *mut HtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ht_model_param_count(model: *const HtModel, out: *mut usize) -> HtStatus {
    if out.is_null() {
        return null("out");
    }
    guard(|| {
        *out = handle(model)?.model.count_params();
        Ok(())
    })
}

/// Multiply-accumulates per sample at the model's resolution.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ht_model_macs(model: *const HtModel, out: *mut u64) -> HtStatus {
    if out.is_null() {
        return null("out");
    }
    guard(|| {
        *out = handle(model)?.model.estimate_flops();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `height` and `width` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ht_model_size(model: *const HtModel, height: *mut usize, width: *mut usize) -> HtStatus {
    if height.is_null() || width.is_null() {
        return null("height or width");
    }
    guard(|| {
        let cfg = handle(model)?.model.config();
        *height = cfg.height;
        *width = cfg.width;
        Ok(())
    })
}

/// Heatmaps for one window of three consecutive frames.
///
/// `frames` holds `3 · 3 · H · W` values in `[0, 1]`: frame-major, then planar
/// RGB, then rows. `heatmaps` receives `3 · H · W` probabilities, one plane per frame.
///
/// # Safety
/// `frames` must point to `frames_len` readable values and `heatmaps` to
/// `heatmaps_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn ht_model_infer(
    model: *const HtModel,
    frames: *const f64,
    frames_len: usize,
    heatmaps: *mut f64,
    heatmaps_len: usize,
) -> HtStatus {
    if frames.is_null() || heatmaps.is_null() {
        return null("frames or heatmaps");
    }
    guard(|| {
        let m = &handle(model)?.model;
        let (h, w) = (m.config().height, m.config().width);
        let plane = h * w;
        if frames_len != 9 * plane || heatmaps_len != 3 * plane {
            return Err(fail(
                HtStatus::Shape,
                format!(
                    "expected {} input and {} output values for {w}x{h}, got {frames_len} and {heatmaps_len}",
                    9 * plane,
                    3 * plane
                ),
            ));
        }
        let input = std::slice::from_raw_parts(frames, frames_len);
        let frame = |k: usize| Tensor4::from_vec([1, 3, h, w], input[k * 3 * plane..(k + 1) * 3 * plane].to_vec());
        let triplet = lift(FrameTriplet::new(lift(frame(0))?, lift(frame(1))?, lift(frame(2))?))?;
        let heat = lift(m.predict(&triplet))?;
        std::slice::from_raw_parts_mut(heatmaps, heatmaps_len).copy_from_slice(heat.data());
        Ok(())
    })
}

/// Accuracy, precision, recall and F1 from confusion counts.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ht_compute_metrics(
    tp: u64,
    fp1: u64,
    fp2: u64,
    tn: u64,
    fn_: u64,
    out: *mut HtMetrics,
) -> HtStatus {
    if out.is_null() {
        return null("out");
    }
    guard(|| {
        let m = compute_metrics(&ConfusionCounts::new(tp, fp1, fp2, tn, fn_));
        *out = HtMetrics {
            accuracy: m.accuracy.value,
            precision: m.precision.value,
            recall: m.recall.value,
            f1: m.f1.value,
            accuracy_defined: m.accuracy.defined,
            precision_defined: m.precision.defined,
            recall_defined: m.recall.defined,
            f1_defined: m.f1.defined,
        };
        Ok(())
    })
}

/// Centroid of the largest 8-connected region strictly above `threshold`
/// in a row-major `height × width` heatmap.
///
/// # Safety
/// `heatmap` must point to `height · width` readable values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn ht_detect_peak(
    heatmap: *const f64,
    height: usize,
    width: usize,
    threshold: f64,
    out: *mut HtDetection,
) -> HtStatus {
    if heatmap.is_null() || out.is_null() {
        return null("heatmap or out");
    }
    guard(|| {
        if height == 0 || width == 0 {
            return Err(fail(HtStatus::InvalidArgument, "heatmap is empty"));
        }
        let cfg = EvalConfig {
            threshold,
            ..EvalConfig::default()
        };
        lift(cfg.validate())?;
        let map = std::slice::from_raw_parts(heatmap, height * width);
        let d = extract_coordinate(0, map, width, &cfg);
        let (x, y) = d.center.unwrap_or((0.0, 0.0));
        *out = HtDetection {
            found: d.center.is_some(),
            x,
            y,
            confidence: d.confidence,
        };
        Ok(())
    })
}
