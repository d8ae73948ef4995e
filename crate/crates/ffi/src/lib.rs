//! C interface to the recognizer.
//!
//! Every entry point returns an [`SgcnStatus`] (or a plain value where noted)
//! and never unwinds across the boundary. On failure a message is kept per
//! thread and can be read with [`sgcn_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sgcn::chargraph::conv_cost_ratio;
use sgcn::error::SgcnError;
use sgcn::ink::{Point, Trajectory};
use sgcn::network::SgcnModel;
use sgcn::serve::top_scores;
use sgcn::trainer::{model_from_checkpoint, Checkpoint};

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgcnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    NotACheckpoint = 4,
    UnsupportedVersion = 5,
    CorruptCheckpoint = 6,
    EmptyTrajectory = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque handle to a loaded model.
pub struct SgcnHandle {
    model: SgcnModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &SgcnError) -> SgcnStatus {
    match e {
        SgcnError::Io(_) => SgcnStatus::Io,
        SgcnError::NotACheckpoint => SgcnStatus::NotACheckpoint,
        SgcnError::UnsupportedVersion(_) => SgcnStatus::UnsupportedVersion,
        SgcnError::CorruptCheckpoint(_) => SgcnStatus::CorruptCheckpoint,
        SgcnError::EmptyTrajectory => SgcnStatus::EmptyTrajectory,
        _ => SgcnStatus::InvalidArgument,
    }
}

struct Fail(SgcnStatus, String);

impl From<SgcnError> for Fail {
    fn from(e: SgcnError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SgcnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SgcnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SgcnStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            SgcnStatus::Panic
        }
    }
}

fn handle<'a>(h: *const SgcnHandle) -> Result<&'a SgcnHandle, Fail> {
    // SAFETY: non-null handles come from sgcn_model_load* and are live until freed.
    unsafe { h.as_ref() }.ok_or_else(|| null("handle"))
}

fn store(h: SgcnHandle, out: *mut *mut SgcnHandle) {
    // SAFETY: callers check `out` for null first.
    unsafe { *out = Box::into_raw(Box::new(h)) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sgcn_version() -> *const c_char {
    static V: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"",
    };
    V.as_ptr()
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sgcn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file. On success `*out` owns a handle that must be
/// released with [`sgcn_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sgcn_model_load(path: *const c_char, out: *mut *mut SgcnHandle) -> SgcnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Fail(SgcnStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(path))?;
        store(SgcnHandle { model: model_from_checkpoint(&ck)? }, out);
        Ok(())
    })
}

/// Loads a checkpoint from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sgcn_model_load_bytes(data: *const u8, len: usize, out: *mut *mut SgcnHandle) -> SgcnStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = unsafe { std::slice::from_raw_parts(data, len) };
        let ck = Checkpoint::from_bytes(bytes)?;
        store(SgcnHandle { model: model_from_checkpoint(&ck)? }, out);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sgcn_model_free(h: *mut SgcnHandle) {
    if !h.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(unsafe { Box::from_raw(h) })));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sgcn_model_num_classes(h: *const SgcnHandle) -> usize {
    unsafe { h.as_ref() }.map_or(0, |h| h.model.config.num_classes)
}

/// Copies the name of class `index` into `buf` with a trailing NUL.
/// `*required` receives the buffer size needed, NUL included, so a call with
/// `len == 0` queries it.
///
/// # Safety
/// `buf` must hold `len` bytes (may be null when `len == 0`); `required` may be null.
#[no_mangle]
pub unsafe extern "C" fn sgcn_model_class_name(
    h: *const SgcnHandle,
    index: usize,
    buf: *mut c_char,
    len: usize,
    required: *mut usize,
) -> SgcnStatus {
    guard(|| {
        let h = handle(h)?;
        let classes = h.model.config.num_classes;
        if index >= classes {
            return Err(Fail(SgcnStatus::InvalidArgument, format!("class {index} out of range [0, {classes})")));
        }
        let name = h.model.config.class_name(index).replace('\0', " ");
        let need = name.len() + 1;
        if !required.is_null() {
            unsafe { *required = need };
        }
        if len < need {
            return Err(Fail(SgcnStatus::BufferTooSmall, format!("class name needs {need} bytes")));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        unsafe {
            std::ptr::copy_nonoverlapping(name.as_ptr(), buf.cast::<u8>(), name.len());
            *buf.add(name.len()) = 0;
        }
        Ok(())
    })
}

/// Recognizes one character.
///
/// `points` holds interleaved `x, y` pairs for all strokes back to back;
/// stroke `i` has `stroke_lengths[i]` points. The `topk` best classes are
/// written to `out_classes` with their softmax scores in `out_scores`, best
/// first.
///
/// # Safety
/// `points` must hold `2 * sum(stroke_lengths)` doubles, `stroke_lengths`
/// `num_strokes` entries, and both outputs `topk` entries.
#[no_mangle]
pub unsafe extern "C" fn sgcn_recognize(
    h: *const SgcnHandle,
    points: *const f64,
    stroke_lengths: *const usize,
    num_strokes: usize,
    topk: usize,
    out_classes: *mut usize,
    out_scores: *mut f64,
) -> SgcnStatus {
    guard(|| {
        let h = handle(h)?;
        if num_strokes == 0 {
            return Err(SgcnError::EmptyTrajectory.into());
        }
        if stroke_lengths.is_null() || points.is_null() {
            return Err(null("points or stroke_lengths"));
        }
        if out_classes.is_null() || out_scores.is_null() {
            return Err(null("output"));
        }
        let lengths = unsafe { std::slice::from_raw_parts(stroke_lengths, num_strokes) };
        let total = lengths
            .iter()
            .try_fold(0usize, |a, &n| a.checked_add(n))
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| Fail(SgcnStatus::InvalidArgument, "stroke lengths overflow".into()))?;
        let flat = unsafe { std::slice::from_raw_parts(points, total) };
        let mut strokes = Vec::with_capacity(num_strokes);
        let mut at = 0;
        for &n in lengths {
            let s: Vec<Point> = flat[at..at + 2 * n].chunks_exact(2).map(|p| [p[0], p[1]]).collect();
            strokes.push(s);
            at += 2 * n;
        }
        let traj = Trajectory::new(strokes)?;
        let (top, _) = top_scores(&h.model, &traj, topk)?;
        let classes = unsafe { std::slice::from_raw_parts_mut(out_classes, topk) };
        let scores = unsafe { std::slice::from_raw_parts_mut(out_scores, topk) };
        for (i, (c, p)) in top.into_iter().enumerate() {
            classes[i] = c;
            scores[i] = p;
        }
        Ok(())
    })
}

/// Ratio of a 3×3 image convolution cost on `height × width` pixels to a
/// graph convolution over `num_nodes` nodes with `avg_edges` neighbors each.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgcn_cost_ratio(
    height: u64,
    width: u64,
    num_nodes: u64,
    avg_edges: f64,
    out: *mut f64,
) -> SgcnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = conv_cost_ratio(height, width, num_nodes, avg_edges)?;
        unsafe { *out = r.ratio };
        Ok(())
    })
}
