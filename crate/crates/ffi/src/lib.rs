//! C ABI over the `wseg` library.
//!
//! Every function returns a [`WsegStatus`]; on failure the message is kept
//! per thread and can be read with [`wseg_last_error_message`]. Score maps
//! are pixel-major (`height * width * num_labels`), images interleaved
//! (`height * width * channels`), label maps one byte per pixel.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use wseg::bboxlabels::bbox_rect;
use wseg::densecrf::{crf_refine, CrfParams};
use wseg::estep::{self, AdaptParams};
use wseg::eval::evaluate;
use wseg::net::{read_checkpoint, NetParams};
use wseg::{BoxAnnotation, Error, Image, LabelMap, LabeledBox, Rect, ScoreMap, WeakLabels};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WsegStatus {
    Ok = 0,
    InvalidInput = 1,
    Config = 2,
    Data = 3,
    Generation = 4,
    UndefinedMean = 5,
    Io = 6,
    NullPointer = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> WsegStatus {
    match e {
        Error::InvalidInput(_) => WsegStatus::InvalidInput,
        Error::Config(_) => WsegStatus::Config,
        Error::Data(_) => WsegStatus::Data,
        Error::Generation(_) => WsegStatus::Generation,
        Error::UndefinedMean => WsegStatus::UndefinedMean,
        Error::Io { .. } => WsegStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            WsegStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            WsegStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            WsegStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn score_map(p: *const f64, h: usize, w: usize, l: usize) -> Result<ScoreMap, Fail> {
    Ok(ScoreMap::new(h, w, l, slice(p, h * w * l, "scores")?.to_vec())?)
}

unsafe fn weak_labels(p: *const u8, n: usize, num_labels: usize) -> Result<WeakLabels, Fail> {
    Ok(WeakLabels::from_labels(num_labels, slice(p, n, "present")?.iter().copied())?)
}

fn write_labels(out: &mut [u8], map: &LabelMap) {
    out.copy_from_slice(map.labels());
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wseg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Opaque trained network.
pub struct WsegNet {
    params: NetParams,
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wseg_net_load(path: *const c_char, out: *mut *mut WsegNet) -> WsegStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidInput("path is not UTF-8".into()))?;
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        let params = read_checkpoint(bytes.as_slice())?;
        *out = Box::into_raw(Box::new(WsegNet { params }));
        Ok(())
    })
}

/// Loads a checkpoint from memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wseg_net_from_bytes(bytes: *const u8, len: usize, out: *mut *mut WsegNet) -> WsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let params = read_checkpoint(slice(bytes, len, "bytes")?)?;
        *out = Box::into_raw(Box::new(WsegNet { params }));
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wseg_net_free(net: *mut WsegNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of output labels, 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wseg_net_num_labels(net: *const WsegNet) -> usize {
    net.as_ref().map_or(0, |n| n.params.config().num_labels)
}

/// Input channels expected by the network, 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wseg_net_in_channels(net: *const WsegNet) -> usize {
    net.as_ref().map_or(0, |n| n.params.config().in_channels)
}

/// Per-pixel scores; `scores_out` holds `height * width * num_labels` values.
///
/// # Safety
/// `image` must hold `height * width * channels` values and `scores_out`
/// `height * width * wseg_net_num_labels(net)`.
#[no_mangle]
pub unsafe extern "C" fn wseg_net_forward(
    net: *const WsegNet,
    image: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    scores_out: *mut f64,
) -> WsegStatus {
    guard(|| {
        let net = net.as_ref().ok_or(Fail::Null("net"))?;
        let img = Image::new(height, width, channels, slice(image, height * width * channels, "image")?.to_vec())?;
        let scores = net.params.forward(&img)?;
        slice_mut(scores_out, scores.data().len(), "scores_out")?.copy_from_slice(scores.data());
        Ok(())
    })
}

/// Per-pixel softmax of a score map into `probs_out` (same size).
///
/// # Safety
/// Both buffers hold `height * width * num_labels` values.
#[no_mangle]
pub unsafe extern "C" fn wseg_pixel_distribution(
    scores: *const f64,
    height: usize,
    width: usize,
    num_labels: usize,
    probs_out: *mut f64,
) -> WsegStatus {
    guard(|| {
        let s = score_map(scores, height, width, num_labels)?;
        let p = wseg::pixel_distribution(&s)?;
        slice_mut(probs_out, p.data().len(), "probs_out")?.copy_from_slice(p.data());
        Ok(())
    })
}

/// k-th smallest of `values` with `k = ceil(rho * len)`.
///
/// # Safety
/// `values` holds `len` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn wseg_quota_threshold(values: *const f64, len: usize, rho: f64, out: *mut f64) -> WsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = estep::quota_threshold(slice(values, len, "values")?, rho)?;
        Ok(())
    })
}

/// Fixed-bias E-step for an image-level label set (`present`, background
/// implied). Writes `height * width` labels.
///
/// # Safety
/// `scores` as in [`wseg_pixel_distribution`]; `present` holds `num_present`
/// labels; `labels_out` holds `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn wseg_em_fixed_estep(
    scores: *const f64,
    height: usize,
    width: usize,
    num_labels: usize,
    present: *const u8,
    num_present: usize,
    b_fg: f64,
    b_bg: f64,
    labels_out: *mut u8,
) -> WsegStatus {
    guard(|| {
        let s = score_map(scores, height, width, num_labels)?;
        let z = weak_labels(present, num_present, num_labels)?;
        let map = estep::em_fixed_estep(&s, &z, b_fg, b_bg)?;
        write_labels(slice_mut(labels_out, height * width, "labels_out")?, &map);
        Ok(())
    })
}

/// Adaptive-bias E-step. `biases_out` may be null; otherwise it receives
/// `num_labels` biases (absent labels as `-inf`).
///
/// # Safety
/// As [`wseg_em_fixed_estep`]; `biases_out` null or `num_labels` doubles.
#[no_mangle]
pub unsafe extern "C" fn wseg_em_adapt_estep(
    scores: *const f64,
    height: usize,
    width: usize,
    num_labels: usize,
    present: *const u8,
    num_present: usize,
    rho_fg: f64,
    rho_bg: f64,
    seed: u64,
    labels_out: *mut u8,
    biases_out: *mut f64,
) -> WsegStatus {
    guard(|| {
        let s = score_map(scores, height, width, num_labels)?;
        let z = weak_labels(present, num_present, num_labels)?;
        let params = AdaptParams::new(rho_fg, rho_bg, seed)?;
        let biases = estep::em_adapt_biases(&s, &z, &params)?;
        let map = biases.apply(&s)?;
        write_labels(slice_mut(labels_out, height * width, "labels_out")?, &map);
        if !biases_out.is_null() {
            slice_mut(biases_out, num_labels, "biases_out")?.copy_from_slice(biases.as_slice());
        }
        Ok(())
    })
}

/// One labeled box; corners inclusive.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct WsegBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub label: u8,
}

unsafe fn box_annotation(p: *const WsegBox, n: usize) -> Result<BoxAnnotation, Fail> {
    Ok(BoxAnnotation::new(
        slice(p, n, "boxes")?
            .iter()
            .map(|b| LabeledBox {
                class: b.label,
                rect: Rect::new(b.x0 as usize, b.y0 as usize, b.x1 as usize, b.y1 as usize),
            })
            .collect(),
    ))
}

/// Filled-rectangle label map; the smallest box wins overlaps.
///
/// # Safety
/// `boxes` holds `num_boxes` entries; `labels_out` `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn wseg_bbox_rect(
    boxes: *const WsegBox,
    num_boxes: usize,
    height: usize,
    width: usize,
    labels_out: *mut u8,
) -> WsegStatus {
    guard(|| {
        let b = box_annotation(boxes, num_boxes)?;
        let map = bbox_rect(&b, height, width)?;
        write_labels(slice_mut(labels_out, height * width, "labels_out")?, &map);
        Ok(())
    })
}

/// Box-gated fixed-bias E-step.
///
/// # Safety
/// As [`wseg_em_fixed_estep`] and [`wseg_bbox_rect`].
#[no_mangle]
pub unsafe extern "C" fn wseg_bbox_em_fixed_estep(
    scores: *const f64,
    height: usize,
    width: usize,
    num_labels: usize,
    boxes: *const WsegBox,
    num_boxes: usize,
    b_fg: f64,
    b_bg: f64,
    labels_out: *mut u8,
) -> WsegStatus {
    guard(|| {
        let s = score_map(scores, height, width, num_labels)?;
        let b = box_annotation(boxes, num_boxes)?;
        let map = estep::bbox_em_fixed_estep(&s, &b, b_fg, b_bg)?;
        write_labels(slice_mut(labels_out, height * width, "labels_out")?, &map);
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct WsegCrfParams {
    pub w_spatial: f64,
    pub theta_gamma: f64,
    pub w_bilateral: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub iterations: u32,
}

impl From<WsegCrfParams> for CrfParams {
    fn from(p: WsegCrfParams) -> Self {
        CrfParams {
            w_spatial: p.w_spatial,
            theta_gamma: p.theta_gamma,
            w_bilateral: p.w_bilateral,
            theta_alpha: p.theta_alpha,
            theta_beta: p.theta_beta,
            iterations: p.iterations as usize,
        }
    }
}

#[no_mangle]
pub extern "C" fn wseg_crf_default_params() -> WsegCrfParams {
    let d = CrfParams::default();
    WsegCrfParams {
        w_spatial: d.w_spatial,
        theta_gamma: d.theta_gamma,
        w_bilateral: d.w_bilateral,
        theta_alpha: d.theta_alpha,
        theta_beta: d.theta_beta,
        iterations: d.iterations as u32,
    }
}

/// Dense-CRF refinement of a score map. `params` may be null for defaults.
///
/// # Safety
/// `scores` as above; `image` holds `height * width * channels` values;
/// `labels_out` `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn wseg_crf_refine(
    scores: *const f64,
    height: usize,
    width: usize,
    num_labels: usize,
    image: *const f64,
    channels: usize,
    params: *const WsegCrfParams,
    labels_out: *mut u8,
) -> WsegStatus {
    guard(|| {
        let s = score_map(scores, height, width, num_labels)?;
        let img = Image::new(height, width, channels, slice(image, height * width * channels, "image")?.to_vec())?;
        let p = params.as_ref().map_or_else(CrfParams::default, |p| (*p).into());
        let map = crf_refine(&s, &img, &p)?;
        write_labels(slice_mut(labels_out, height * width, "labels_out")?, &map);
        Ok(())
    })
}

/// Mean IOU of one prediction against ground truth over `num_pixels` pixels.
///
/// # Safety
/// `gt` and `pred` hold `num_pixels` bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn wseg_mean_iou(
    gt: *const u8,
    pred: *const u8,
    num_pixels: usize,
    num_labels: usize,
    out: *mut f64,
) -> WsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let g = LabelMap::new(1, num_pixels, slice(gt, num_pixels, "gt")?.to_vec())?;
        let p = LabelMap::new(1, num_pixels, slice(pred, num_pixels, "pred")?.to_vec())?;
        *out = evaluate(num_labels, [(&g, &p)], None)?.mean;
        Ok(())
    })
}
