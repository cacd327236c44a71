//! C ABI over the tracker: opaque model and tracker handles, status codes,
//! and a per-thread last-error message.
//!
//! Every function that can fail returns a [`BottStatus`]; on failure the
//! message is available from [`bott_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::mem::ManuallyDrop;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bott::checkpoint::{load_model, ModelMeta};
use bott::network::Network;
use bott::online::{Associator, OnlineConfig, OnlineTracker};
use bott::types::{Box3D, DetectionFrame, SlidingWindow};
use bott::BottError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BottStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Panic = 5,
}

/// One detection as seen from C. `class_id` indexes the model's classes and
/// `score` becomes that class's score; velocity is used only when
/// `has_velocity` is set.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BottBox {
    pub frame_idx: i64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: u32,
    pub score: f64,
    pub vx: f64,
    pub vy: f64,
    pub has_velocity: bool,
}

/// Written for detections not published under a track.
pub const BOTT_NO_TRACK: u64 = u64::MAX;

/// A loaded model.
pub struct BottModel {
    net: Network,
    meta: ModelMeta,
}

/// An online tracker. Owns a private copy of its model.
pub struct BottTracker {
    tracker: ManuallyDrop<OnlineTracker<'static>>,
    net: *mut Network,
    n_classes: usize,
}

impl Drop for BottTracker {
    fn drop(&mut self) {
        // SAFETY: the tracker borrows `net`, so it goes first; `net` came
        // from `Box::into_raw` and is freed exactly once here.
        unsafe {
            ManuallyDrop::drop(&mut self.tracker);
            if !self.net.is_null() {
                drop(Box::from_raw(self.net));
            }
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn status_of(e: &BottError) -> BottStatus {
    match e {
        BottError::Io { .. } => BottStatus::Io,
        BottError::Domain(_) | BottError::Shape { .. } | BottError::Config(_) => BottStatus::InvalidArgument,
        _ => BottStatus::Data,
    }
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (BottStatus, String)>) -> BottStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BottStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BottStatus::Panic
        }
    }
}

fn lift(e: BottError) -> (BottStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (BottStatus, String) {
    (BottStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (BottStatus, String) {
    (BottStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (BottStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (BottStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn to_box(b: &BottBox, id: u64, n_classes: usize) -> Result<Box3D, (BottStatus, String)> {
    let c = b.class_id as usize;
    if c >= n_classes {
        return Err(invalid(format!("class_id {c} out of range for {n_classes} classes")));
    }
    let mut out = Box3D::new(c, n_classes);
    out.box_id = id;
    out.frame_idx = b.frame_idx;
    out.t = b.t;
    (out.x, out.y, out.z) = (b.x, b.y, b.z);
    (out.w, out.l, out.h) = (b.w, b.l, b.h);
    out.yaw = b.yaw;
    out.det_score = b.score;
    out.class_scores[c] = b.score;
    out.velocity = b.has_velocity.then_some([b.vx, b.vy]);
    out.validate(n_classes).map_err(lift)?;
    Ok(out)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bott_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bott_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint (and its JSON sidecar) into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bott_model_load(path: *const c_char, out: *mut *mut BottModel) -> BottStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let (net, meta) = load_model(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(BottModel { net, meta }));
        Ok(())
    })
}

/// Number of classes the model was trained on; 0 for a null model.
///
/// # Safety
/// `model` must be null or come from [`bott_model_load`].
#[no_mangle]
pub unsafe extern "C" fn bott_model_num_classes(model: *const BottModel) -> usize {
    model.as_ref().map_or(0, |m| m.meta.class_names.len())
}

/// Linking scores of `n` boxes forming one window, written row-major into
/// `out_scores` (`n * n` values) in input order. Boxes are grouped into
/// frames by `frame_idx`.
///
/// # Safety
/// `boxes` must point to `n` boxes and `out_scores` to `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn bott_model_link_scores(
    model: *const BottModel,
    boxes: *const BottBox,
    n: usize,
    out_scores: *mut f64,
) -> BottStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let boxes = slice_arg(boxes, n, "boxes")?;
        if n == 0 {
            return Err(invalid("window has no boxes"));
        }
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        let nc = m.meta.class_names.len();
        let mut frame_ids: Vec<i64> = boxes.iter().map(|b| b.frame_idx).collect();
        frame_ids.sort_unstable();
        frame_ids.dedup();
        let mut frames: Vec<DetectionFrame> = frame_ids
            .iter()
            .map(|&f| {
                let t = boxes.iter().find(|b| b.frame_idx == f).map_or(0.0, |b| b.t);
                DetectionFrame::new(f, t)
            })
            .collect();
        for (i, b) in boxes.iter().enumerate() {
            let k = frame_ids.binary_search(&b.frame_idx).expect("frame listed");
            if b.t != frames[k].t {
                return Err(invalid(format!("boxes of frame {} disagree on t", b.frame_idx)));
            }
            frames[k].boxes.push(to_box(b, i as u64, nc)?);
        }
        let window = SlidingWindow::new(frames).map_err(lift)?;
        let ls = m.net.forward(&window).map_err(lift)?;
        let out = std::slice::from_raw_parts_mut(out_scores, n * n);
        for r in 0..n {
            for c in 0..n {
                out[ls.box_ref[r] as usize * n + ls.box_ref[c] as usize] = ls.get(r, c);
            }
        }
        Ok(())
    })
}

/// Frees a model. Null is ignored.
///
/// # Safety
/// `model` must be null or come from [`bott_model_load`], and not be used again.
#[no_mangle]
pub unsafe extern "C" fn bott_model_free(model: *mut BottModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Creates an online tracker. With a null `model` the tracker uses the
/// nearest-neighbor baseline and `class_names` must list the taxonomy;
/// otherwise the model's classes are used and `class_names` is ignored.
/// `config_json` optionally holds an online-tracker configuration object.
///
/// # Safety
/// Pointers must be null or valid; `class_names` must hold `n_classes`
/// NUL-terminated strings when used.
#[no_mangle]
pub unsafe extern "C" fn bott_tracker_new(
    model: *const BottModel,
    class_names: *const *const c_char,
    n_classes: usize,
    config_json: *const c_char,
    out: *mut *mut BottTracker,
) -> BottStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: OnlineConfig = if config_json.is_null() {
            OnlineConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(|e| invalid(e.to_string()))?
        };
        let (names, net) = match model.as_ref() {
            Some(m) => (m.meta.class_names.clone(), Box::into_raw(Box::new(m.net.clone()))),
            None => {
                let raw = slice_arg(class_names, n_classes, "class_names")?;
                if raw.is_empty() {
                    return Err(invalid("class_names is empty"));
                }
                let names = raw
                    .iter()
                    .map(|p| str_arg(*p, "class name").map(str::to_string))
                    .collect::<Result<Vec<_>, _>>()?;
                (names, std::ptr::null_mut())
            }
        };
        // SAFETY: `net` stays alive until the tracker is dropped (see Drop).
        let assoc = match net.as_ref() {
            Some(n) => Associator::Network(n),
            None => Associator::NearestNeighbor,
        };
        let tracker = match OnlineTracker::new(assoc, cfg, &names) {
            Ok(t) => t,
            Err(e) => {
                if !net.is_null() {
                    drop(Box::from_raw(net));
                }
                return Err(lift(e));
            }
        };
        *out = Box::into_raw(Box::new(BottTracker {
            tracker: ManuallyDrop::new(tracker),
            net,
            n_classes: names.len(),
        }));
        Ok(())
    })
}

/// Feeds one frame. `out_track_ids[i]` receives the track id published for
/// `boxes[i]`, or [`BOTT_NO_TRACK`]. The boxes' own `frame_idx` and `t` are
/// replaced by the arguments.
///
/// # Safety
/// `boxes` must point to `n` boxes and `out_track_ids` to `n` slots.
#[no_mangle]
pub unsafe extern "C" fn bott_tracker_step(
    tracker: *mut BottTracker,
    frame_idx: i64,
    t: f64,
    boxes: *const BottBox,
    n: usize,
    out_track_ids: *mut u64,
) -> BottStatus {
    guard(|| {
        let tr = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        let boxes = slice_arg(boxes, n, "boxes")?;
        if n > 0 && out_track_ids.is_null() {
            return Err(null("out_track_ids"));
        }
        let mut frame = DetectionFrame::new(frame_idx, t);
        for (i, b) in boxes.iter().enumerate() {
            let b = BottBox { frame_idx, t, ..*b };
            frame.boxes.push(to_box(&b, i as u64, tr.n_classes)?);
        }
        let published = tr.tracker.step(&frame).map_err(lift)?;
        if n > 0 {
            let out = std::slice::from_raw_parts_mut(out_track_ids, n);
            out.fill(BOTT_NO_TRACK);
            for p in &published.tracks {
                out[p.bbox.box_id as usize] = p.track_id;
            }
        }
        Ok(())
    })
}

/// Number of live tracks; 0 for a null tracker.
///
/// # Safety
/// `tracker` must be null or come from [`bott_tracker_new`].
#[no_mangle]
pub unsafe extern "C" fn bott_tracker_num_tracks(tracker: *const BottTracker) -> usize {
    tracker.as_ref().map_or(0, |t| t.tracker.tracks().len())
}

/// Frees a tracker. Null is ignored.
///
/// # Safety
/// `tracker` must be null or come from [`bott_tracker_new`], and not be used again.
#[no_mangle]
pub unsafe extern "C" fn bott_tracker_free(tracker: *mut BottTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}
