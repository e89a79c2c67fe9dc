//! C ABI over the streaming segmenter.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a [`MavosStatus`];
//! on failure [`mavos_last_error`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mavos::memory::MemoryPolicy;
use mavos::segmenter::{decode_checkpoint, encode_checkpoint, ObjectMask, Segmenter, SegmenterConfig, Tracker};
use mavos::synthgen::Frame;
use mavos::Error;

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MavosStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Numeric = 7,
    Usage = 8,
    Panic = 9,
}

/// Memory bank accounting for a tracker.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MavosMemoryStats {
    pub slot_count: usize,
    pub token_count: usize,
    pub logical_bytes: usize,
    pub id_bytes: usize,
    pub update_count: usize,
}

/// Trained or freshly initialized segmenter weights.
pub struct MavosModel(Segmenter<f64>);

/// Streaming inference state for one video.
pub struct MavosTracker(Tracker<f64>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MavosStatus {
    match e {
        Error::Validation(_) | Error::Dimension { .. } | Error::Shape { .. } => MavosStatus::Validation,
        Error::Config(_) | Error::Json(_) => MavosStatus::Config,
        Error::Io(_) => MavosStatus::Io,
        Error::Format { .. } => MavosStatus::Format,
        Error::Numeric { .. } => MavosStatus::Numeric,
        Error::Usage(_) => MavosStatus::Usage,
    }
}

struct Fail(MavosStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MavosStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MavosStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MavosStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MavosStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MavosStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn frame_from(rgb: &[u8], grid: usize) -> Result<Frame, Fail> {
    if rgb.len() != grid * grid * 3 {
        return Err(invalid(format!("rgb has {} bytes, expected {}", rgb.len(), grid * grid * 3)));
    }
    Ok(Frame { grid, rgb: rgb.to_vec() })
}

/// Version string of the library, statically allocated.
#[no_mangle]
pub extern "C" fn mavos_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mavos_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a model with random weights.
///
/// `config_json` may be null for the default configuration; otherwise it is a
/// JSON object with any of `grid`, `stride`, `dim`, `levels`, `blocks`,
/// `max_objects` and `decoder_hidden`.
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mavos_model_init(config_json: *const c_char, seed: u64, out: *mut *mut MavosModel) -> MavosStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let config: SegmenterConfig = if config_json.is_null() {
            SegmenterConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(|e| Fail(MavosStatus::Config, e.to_string()))?
        };
        let model = Segmenter::<f64>::init(config, seed)?;
        *out = Box::into_raw(Box::new(MavosModel(model)));
        Ok(())
    })
}

/// Loads a 64-bit checkpoint written by `mavos train` or [`mavos_model_save`].
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mavos_model_load(path: *const c_char, out: *mut *mut MavosModel) -> MavosStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let bytes = std::fs::read(Path::new(str_arg(path, "path")?)).map_err(Error::from)?;
        let model = decode_checkpoint::<f64>(&bytes)?;
        *out = Box::into_raw(Box::new(MavosModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mavos_model_save(model: *const MavosModel, path: *const c_char) -> MavosStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let bytes = encode_checkpoint(&model.0)?;
        std::fs::write(Path::new(str_arg(path, "path")?), bytes).map_err(Error::from)?;
        Ok(())
    })
}

/// Frame side length in pixels, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mavos_model_grid(model: *const MavosModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.grid)
}

/// Largest object count a mask may carry, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mavos_model_max_objects(model: *const MavosModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.max_objects)
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mavos_model_free(model: *mut MavosModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Creates a tracker that copies the model weights.
///
/// `policy` is one of `mca`, `full`, `refprev` or `window:N`; `delta` is the
/// memory update period in frames.
///
/// # Safety
/// `model` is a live handle; `policy` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mavos_tracker_new(
    model: *const MavosModel,
    policy: *const c_char,
    delta: usize,
    out: *mut *mut MavosTracker,
) -> MavosStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let policy: MemoryPolicy = str_arg(policy, "policy")?.parse()?;
        let tracker = Tracker::new(&model.0, policy, delta)?;
        *out = Box::into_raw(Box::new(MavosTracker(tracker)));
        Ok(())
    })
}

/// Starts a video from its first frame and object labels.
///
/// `rgb` holds `grid * grid * 3` interleaved bytes in row-major order.
/// `labels` holds `grid * grid` bytes: 0 for background, `k` for object `k`,
/// with `1 <= k <= objects`.
///
/// # Safety
/// `tracker` is a live handle; `rgb` and `labels` point to the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mavos_tracker_reset(
    tracker: *mut MavosTracker,
    rgb: *const u8,
    rgb_len: usize,
    labels: *const u8,
    labels_len: usize,
    objects: usize,
) -> MavosStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        let grid = t.0.config().grid;
        let frame = frame_from(bytes_arg(rgb, rgb_len, "rgb")?, grid)?;
        let labels = bytes_arg(labels, labels_len, "labels")?;
        if labels.len() != grid * grid {
            return Err(invalid(format!("labels has {} bytes, expected {}", labels.len(), grid * grid)));
        }
        let mask = ObjectMask::from_labels(grid, objects, labels.to_vec())?;
        t.0.reset(&frame, &mask)?;
        Ok(())
    })
}

/// Segments the next frame and writes one label byte per pixel to `out_labels`.
///
/// # Safety
/// `tracker` is a live handle; `rgb` points to `rgb_len` bytes and
/// `out_labels` to `out_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mavos_tracker_step(
    tracker: *mut MavosTracker,
    rgb: *const u8,
    rgb_len: usize,
    out_labels: *mut u8,
    out_len: usize,
) -> MavosStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        let grid = t.0.config().grid;
        let frame = frame_from(bytes_arg(rgb, rgb_len, "rgb")?, grid)?;
        if out_labels.is_null() {
            return Err(null("out_labels"));
        }
        if out_len != grid * grid {
            return Err(invalid(format!("out_labels has {out_len} bytes, expected {}", grid * grid)));
        }
        let mask = t.0.step(&frame)?;
        ptr::copy_nonoverlapping(mask.labels().as_ptr(), out_labels, out_len);
        Ok(())
    })
}

/// # Safety
/// `tracker` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mavos_tracker_memory_stats(tracker: *const MavosTracker, out: *mut MavosMemoryStats) -> MavosStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        let s = t.0.memory_stats().ok_or_else(|| Fail(MavosStatus::Usage, "tracker has not been reset".into()))?;
        *out = MavosMemoryStats {
            slot_count: s.slot_count,
            token_count: s.token_count,
            logical_bytes: s.logical_bytes,
            id_bytes: s.id_bytes,
            update_count: s.update_count,
        };
        Ok(())
    })
}

/// # Safety
/// `tracker` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mavos_tracker_free(tracker: *mut MavosTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}
