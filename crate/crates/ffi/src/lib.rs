//! C ABI over the `sdsrcnn` detector.
//!
//! Every fallible function returns an [`SdsStatus`]; on failure a message is
//! available from [`sds_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use sdsrcnn::config::RunConfig;
use sdsrcnn::geometry::{self, BBox, ScoredBox};
use sdsrcnn::image::GrayImage;
use sdsrcnn::pipeline::{self, PipelineConfig};
use sdsrcnn::tinynet::{checkpoint, Network};
use sdsrcnn::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Box with top-left corner `(x, y)`, width `w` and height `h` in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdsBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdsDetection {
    pub bbox: SdsBox,
    pub fused_score: f64,
    pub rpn_score: f64,
    /// Meaningful only when `has_bcn_score` is nonzero.
    pub bcn_score: f64,
    pub has_bcn_score: i32,
}

/// Opaque detector: a proposal network, an optional classifier network and
/// the pipeline settings.
pub struct SdsDetector {
    rpn: Network,
    bcn: Option<Network>,
    cfg: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SdsStatus {
    match e {
        Error::Io { .. } => SdsStatus::Io,
        Error::Checkpoint(_) => SdsStatus::Checkpoint,
        Error::Config(_) => SdsStatus::Config,
        _ => SdsStatus::InvalidArgument,
    }
}

fn fail(status: SdsStatus, msg: &str) -> SdsStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), SdsStatus>) -> SdsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SdsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(SdsStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: sdsrcnn::Result<T>) -> Result<T, SdsStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, SdsStatus> {
    if p.is_null() {
        return Err(fail(SdsStatus::NullPointer, &format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(SdsStatus::InvalidArgument, &format!("{what} is not UTF-8")))
}

fn to_bbox(b: &SdsBox) -> Result<BBox, SdsStatus> {
    lift(BBox::new(b.x, b.y, b.w, b.h))
}

/// Message of the last failure on this thread; empty when none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn sds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a detector from checkpoint files. `bcn_path` and `config_path` may
/// be null (proposal scores only; default settings).
#[no_mangle]
pub unsafe extern "C" fn sds_detector_new(
    rpn_path: *const c_char,
    bcn_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut SdsDetector,
) -> SdsStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SdsStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let rpn = lift(checkpoint::load(path_arg(rpn_path, "rpn_path")?))?;
        let bcn = if bcn_path.is_null() {
            None
        } else {
            Some(lift(checkpoint::load(path_arg(bcn_path, "bcn_path")?))?)
        };
        let run = if config_path.is_null() {
            RunConfig::default()
        } else {
            lift(RunConfig::load(path_arg(config_path, "config_path")?))?
        };
        *out = Box::into_raw(Box::new(SdsDetector {
            rpn,
            bcn,
            cfg: run.pipeline_config(),
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sds_detector_free(detector: *mut SdsDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Detect pedestrians in a row-major 8-bit grayscale image. Up to
/// `capacity` detections are written in descending fused score; `count`
/// receives the total found. Returns `BufferTooSmall` when it exceeds
/// `capacity`.
#[no_mangle]
pub unsafe extern "C" fn sds_detector_detect(
    detector: *const SdsDetector,
    pixels: *const u8,
    width: usize,
    height: usize,
    out: *mut SdsDetection,
    capacity: usize,
    count: *mut usize,
) -> SdsStatus {
    guard(|| {
        if detector.is_null() || pixels.is_null() || count.is_null() || (out.is_null() && capacity > 0) {
            return Err(fail(SdsStatus::NullPointer, "null argument"));
        }
        let d = &*detector;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| fail(SdsStatus::InvalidArgument, "image size overflows"))?;
        let image = lift(GrayImage::new(width, height, slice::from_raw_parts(pixels, n).to_vec()))?;
        let dets = lift(pipeline::detect(&image.to_tensor(), &d.rpn, d.bcn.as_ref(), &d.cfg))?;
        *count = dets.len();
        let dst = if capacity == 0 { &mut [][..] } else { slice::from_raw_parts_mut(out, capacity) };
        for (slot, det) in dst.iter_mut().zip(&dets) {
            *slot = SdsDetection {
                bbox: SdsBox { x: det.bbox.x, y: det.bbox.y, w: det.bbox.w, h: det.bbox.h },
                fused_score: det.fused_score,
                rpn_score: det.rpn_score,
                bcn_score: det.bcn_score.unwrap_or(0.0),
                has_bcn_score: det.bcn_score.is_some() as i32,
            };
        }
        if dets.len() > capacity {
            return Err(fail(
                SdsStatus::BufferTooSmall,
                &format!("{} detections, capacity {capacity}", dets.len()),
            ));
        }
        Ok(())
    })
}

/// Intersection over union of two boxes with positive size.
#[no_mangle]
pub unsafe extern "C" fn sds_iou(a: *const SdsBox, b: *const SdsBox, out: *mut f64) -> SdsStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(fail(SdsStatus::NullPointer, "null argument"));
        }
        *out = geometry::iou(&to_bbox(&*a)?, &to_bbox(&*b)?);
        Ok(())
    })
}

/// Greedy non-maximum suppression. Kept indices go to `keep` (room for `n`
/// entries) in descending score order; `kept` receives their number.
#[no_mangle]
pub unsafe extern "C" fn sds_nms(
    boxes: *const SdsBox,
    scores: *const f64,
    n: usize,
    iou_threshold: f64,
    keep: *mut usize,
    kept: *mut usize,
) -> SdsStatus {
    guard(|| {
        if kept.is_null() || (n > 0 && (boxes.is_null() || scores.is_null() || keep.is_null())) {
            return Err(fail(SdsStatus::NullPointer, "null argument"));
        }
        if !(0.0..=1.0).contains(&iou_threshold) {
            return Err(fail(SdsStatus::InvalidArgument, "iou_threshold must lie in [0, 1]"));
        }
        let mut candidates = Vec::with_capacity(n);
        if n > 0 {
            for (b, &s) in slice::from_raw_parts(boxes, n).iter().zip(slice::from_raw_parts(scores, n)) {
                if !s.is_finite() {
                    return Err(fail(SdsStatus::InvalidArgument, "scores must be finite"));
                }
                candidates.push(ScoredBox::new(to_bbox(b)?, s));
            }
        }
        let result = geometry::nms(&candidates, iou_threshold);
        if n > 0 {
            slice::from_raw_parts_mut(keep, n)[..result.len()].copy_from_slice(&result);
        }
        *kept = result.len();
        Ok(())
    })
}

/// Foreground probability of the summed `(background, foreground)` logits
/// of the two stages.
#[no_mangle]
pub extern "C" fn sds_fuse_scores(rpn_bg: f64, rpn_fg: f64, bcn_bg: f64, bcn_fg: f64) -> f64 {
    pipeline::fuse_scores([rpn_bg, rpn_fg], [bcn_bg, bcn_fg])
}
