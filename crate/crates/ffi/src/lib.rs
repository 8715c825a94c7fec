//! C ABI for the motion-alignment toolkit.
//!
//! Conventions:
//! - Images are interleaved 8-bit RGB, row-major, `width*height*3` bytes.
//! - Flow fields and models are opaque handles created and released by
//!   this library (`fa_*_free`).
//! - Every function returns [`FaStatus`]; on failure the thread-local
//!   message retrieved by [`fa_last_error`] describes the cause.
//!
//! The generated header lands in `include/flowalign.h`.

use flowalign::flow::{estimate_flow, flow_magnitude, warp_frame, FlowField};
use flowalign::harness::ReconHead;
use flowalign::imageio::{Frame, Plane};
use flowalign::metrics::{bd_rate, ms_ssim, psnr, RDCurve, RDPoint};
use flowalign::mrqa::{schedule_rollout, MrqaState};
use flowalign::numerics::{Scalar, Tensor};
use flowalign::sme::{gated_flow, select_scale, ScaleOutcome, ScaleSearchConfig};
use flowalign::tsmc::{build_feature_pyramid, read_checkpoint, tsmc_forward, FgdParams, TsmcConfig};
use flowalign::Error;
use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_float, c_int, CStr, CString};
use std::path::Path;

/// Result code of every API call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    DataError = 4,
    IoError = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn status_of(err: &Error) -> FaStatus {
    match err {
        Error::ShapeMismatch(_) => FaStatus::ShapeMismatch,
        Error::InvalidArgument(_) | Error::ColorSpace(_) => FaStatus::InvalidArgument,
        Error::Io(_) => FaStatus::IoError,
        Error::Data(_) => FaStatus::DataError,
        Error::NonFinite(_) | Error::Diverged(_) => FaStatus::Internal,
    }
}

fn fail(err: Error) -> FaStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Copy the last error message into `buf` (NUL-terminated, truncated to
/// `cap` bytes). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to `cap` writable bytes (or be null to query length).
#[no_mangle]
pub unsafe extern "C" fn fa_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            // Always terminate.
            *buf.add(n - 1) = 0;
        }
        bytes.len() - 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn frame_from_rgb8(ptr: *const u8, width: usize, height: usize) -> Result<Frame, Error> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("empty image".to_string()));
    }
    let src = std::slice::from_raw_parts(ptr, width * height * 3);
    let mut r = vec![0u8; width * height];
    let mut g = vec![0u8; width * height];
    let mut b = vec![0u8; width * height];
    for i in 0..width * height {
        r[i] = src[3 * i];
        g[i] = src[3 * i + 1];
        b[i] = src[3 * i + 2];
    }
    Frame::rgb(
        width,
        height,
        [
            Plane::new(width, height, r)?,
            Plane::new(width, height, g)?,
            Plane::new(width, height, b)?,
        ],
    )
}

fn frame_to_rgb8(frame: &Frame, dst: &mut [u8]) {
    let n = frame.width * frame.height;
    for i in 0..n {
        dst[3 * i] = frame.planes[0].data[i];
        dst[3 * i + 1] = frame.planes[1].data[i];
        dst[3 * i + 2] = frame.planes[2].data[i];
    }
}

/// PSNR (dB) between two interleaved RGB images of equal size.
///
/// # Safety
/// `a` and `b` must point to `width*height*3` readable bytes; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fa_psnr(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
    out: *mut c_double,
) -> FaStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("null pointer");
        return FaStatus::NullPointer;
    }
    let fa = match frame_from_rgb8(a, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let fb = match frame_from_rgb8(b, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    match psnr(&fa, &fb) {
        Ok(v) => {
            *out = v;
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// MS-SSIM between two interleaved RGB images of equal size.
///
/// # Safety
/// Same contracts as [`fa_psnr`].
#[no_mangle]
pub unsafe extern "C" fn fa_ms_ssim(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
    out: *mut c_double,
) -> FaStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("null pointer");
        return FaStatus::NullPointer;
    }
    let fa = match frame_from_rgb8(a, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let fb = match frame_from_rgb8(b, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    match ms_ssim(&fa, &fb) {
        Ok(v) => {
            *out = v;
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Bjøntegaard delta rate (percent) between two RD curves given as
/// parallel bpp/quality arrays (each at least 4 points).
///
/// # Safety
/// The four array pointers must hold `anchor_len` / `test_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fa_bd_rate(
    anchor_bpp: *const c_double,
    anchor_quality: *const c_double,
    anchor_len: usize,
    test_bpp: *const c_double,
    test_quality: *const c_double,
    test_len: usize,
    out: *mut c_double,
) -> FaStatus {
    if anchor_bpp.is_null()
        || anchor_quality.is_null()
        || test_bpp.is_null()
        || test_quality.is_null()
        || out.is_null()
    {
        set_error("null pointer");
        return FaStatus::NullPointer;
    }
    let mk = |bpp: *const c_double, q: *const c_double, n: usize| -> Result<RDCurve, Error> {
        let bpp = std::slice::from_raw_parts(bpp, n);
        let q = std::slice::from_raw_parts(q, n);
        RDCurve::new(
            bpp.iter()
                .zip(q)
                .map(|(&b, &q)| RDPoint {
                    bpp: b,
                    quality: q,
                    label: String::new(),
                })
                .collect(),
        )
    };
    let anchor = match mk(anchor_bpp, anchor_quality, anchor_len) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let test = match mk(test_bpp, test_quality, test_len) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match bd_rate(&anchor, &test) {
        Ok(v) => {
            *out = v;
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Quality-aware weight schedule from a PSNR trace of `trace_len >= 2`
/// entries; writes `trace_len - 1` weights. `base_weights` may be null for
/// the default 7-entry pattern.
///
/// # Safety
/// `psnr_trace` must hold `trace_len` doubles; `out_weights` must have
/// room for `trace_len - 1`; `base_weights`, when non-null, holds 7.
#[no_mangle]
pub unsafe extern "C" fn fa_mrqa_weights(
    psnr_trace: *const c_double,
    trace_len: usize,
    lambda: c_double,
    lambda_max: c_double,
    base_weights: *const c_double,
    out_weights: *mut c_double,
) -> FaStatus {
    if psnr_trace.is_null() || out_weights.is_null() {
        set_error("null pointer");
        return FaStatus::NullPointer;
    }
    let trace = std::slice::from_raw_parts(psnr_trace, trace_len);
    let mut state = match MrqaState::new(lambda, lambda_max) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    if !base_weights.is_null() {
        let bw = std::slice::from_raw_parts(base_weights, 7);
        let mut arr = [0.0; 7];
        arr.copy_from_slice(bw);
        state = state.with_base_weights(arr);
    }
    match schedule_rollout(trace, &state) {
        Ok(w) => {
            std::ptr::copy_nonoverlapping(w.as_ptr(), out_weights, w.len());
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Opaque dense flow field handle.
#[repr(C)]
pub struct FaFlow {
    _private: [u8; 0],
}

fn flow_into_handle(flow: FlowField) -> *mut FaFlow {
    Box::into_raw(Box::new(flow)) as *mut FaFlow
}

unsafe fn flow_ref<'a>(handle: *const FaFlow) -> Option<&'a FlowField> {
    (handle as *const FlowField).as_ref()
}

/// Estimate optical flow between two RGB images with the pyramidal
/// estimator (`levels` pyramid levels, `iters` refinements per level).
///
/// # Safety
/// Image pointers as in [`fa_psnr`]; `out_flow` receives an owned handle
/// that must be released with [`fa_flow_free`].
#[no_mangle]
pub unsafe extern "C" fn fa_flow_estimate(
    cur: *const u8,
    reference: *const u8,
    width: usize,
    height: usize,
    levels: usize,
    iters: usize,
    out_flow: *mut *mut FaFlow,
) -> FaStatus {
    if cur.is_null() || reference.is_null() || out_flow.is_null() {
        set_error("null pointer");
        return FaStatus::NullPointer;
    }
    let fc = match frame_from_rgb8(cur, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let fr = match frame_from_rgb8(reference, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    match estimate_flow(&fc, &fr, levels, iters) {
        Ok(flow) => {
            *out_flow = flow_into_handle(flow);
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Flow dimensions.
///
/// # Safety
/// `flow` must be a live handle; `out_*` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fa_flow_size(
    flow: *const FaFlow,
    out_width: *mut usize,
    out_height: *mut usize,
) -> FaStatus {
    let (Some(f), false, false) = (flow_ref(flow), out_width.is_null(), out_height.is_null())
    else {
        set_error("null pointer");
        return FaStatus::NullPointer;
    };
    *out_width = f.width;
    *out_height = f.height;
    FaStatus::Ok
}

/// RMS flow magnitude (pixels) with the epsilon floor.
///
/// # Safety
/// `flow` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fa_flow_magnitude(flow: *const FaFlow, out: *mut c_double) -> FaStatus {
    let (Some(f), false) = (flow_ref(flow), out.is_null()) else {
        set_error("null pointer");
        return FaStatus::NullPointer;
    };
    *out = flow_magnitude(f);
    FaStatus::Ok
}

/// Copy flow components into caller buffers of `width*height` floats each.
///
/// # Safety
/// `flow` must be a live handle; the buffers must be large enough.
#[no_mangle]
pub unsafe extern "C" fn fa_flow_data(
    flow: *const FaFlow,
    out_vx: *mut c_float,
    out_vy: *mut c_float,
) -> FaStatus {
    let (Some(f), false, false) = (flow_ref(flow), out_vx.is_null(), out_vy.is_null()) else {
        set_error("null pointer");
        return FaStatus::NullPointer;
    };
    for (i, &v) in f.vx.iter().enumerate() {
        *out_vx.add(i) = v as c_float;
    }
    for (i, &v) in f.vy.iter().enumerate() {
        *out_vy.add(i) = v as c_float;
    }
    FaStatus::Ok
}

/// Release a flow handle (null is a no-op).
///
/// # Safety
/// `flow` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fa_flow_free(flow: *mut FaFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow as *mut FlowField));
    }
}

/// Warp an RGB reference image by a flow field into `out_rgb`
/// (`width*height*3` bytes, same layout as the input).
///
/// # Safety
/// Pointers as in [`fa_psnr`]; `flow` must match the image size.
#[no_mangle]
pub unsafe extern "C" fn fa_warp_rgb(
    reference: *const u8,
    width: usize,
    height: usize,
    flow: *const FaFlow,
    out_rgb: *mut u8,
) -> FaStatus {
    let (Some(f), false, false) = (flow_ref(flow), reference.is_null(), out_rgb.is_null()) else {
        set_error("null pointer");
        return FaStatus::NullPointer;
    };
    let fr = match frame_from_rgb8(reference, width, height) {
        Ok(fr) => fr,
        Err(e) => return fail(e),
    };
    match warp_frame(&fr, f) {
        Ok(w) => {
            let dst = std::slice::from_raw_parts_mut(out_rgb, width * height * 3);
            frame_to_rgb8(&w, dst);
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Adaptive-scale flow search (training-free). Writes the per-scale warp
/// PSNR into `out_psnr` (NaN for skipped scales), the winning scale into
/// `out_best_scale`, and the re-estimated flow into `out_flow`.
///
/// # Safety
/// `scales`/`out_psnr` must hold `scales_len` doubles; other pointers as
/// in [`fa_flow_estimate`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fa_sme_select(
    cur: *const u8,
    reference: *const u8,
    width: usize,
    height: usize,
    scales: *const c_double,
    scales_len: usize,
    delta: c_double,
    parallel: c_int,
    out_best_scale: *mut c_double,
    out_psnr: *mut c_double,
    out_flow: *mut *mut FaFlow,
) -> FaStatus {
    if cur.is_null()
        || reference.is_null()
        || scales.is_null()
        || out_best_scale.is_null()
        || out_psnr.is_null()
        || out_flow.is_null()
    {
        set_error("null pointer");
        return FaStatus::NullPointer;
    }
    let fc = match frame_from_rgb8(cur, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let fr = match frame_from_rgb8(reference, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let cfg = ScaleSearchConfig {
        scales: std::slice::from_raw_parts(scales, scales_len).to_vec(),
        delta,
        tau: 0.0,
    };
    let estimator = flowalign::flow::PyramidLk::default();
    match select_scale(&fc, &fr, &cfg, &estimator, parallel != 0) {
        Ok(res) => {
            for (i, entry) in res.report.iter().enumerate() {
                *out_psnr.add(i) = match entry.outcome {
                    ScaleOutcome::Evaluated { warp_psnr } => warp_psnr,
                    ScaleOutcome::Skipped { .. } => f64::NAN,
                };
            }
            *out_best_scale = res.best_scale;
            *out_flow = flow_into_handle(res.flow);
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Magnitude-gated flow: estimates at scale 1 and runs the scale search
/// only when the magnitude exceeds `tau`. `out_searched` reports whether
/// the search ran.
///
/// # Safety
/// Pointers as in [`fa_sme_select`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fa_gated_flow(
    cur: *const u8,
    reference: *const u8,
    width: usize,
    height: usize,
    scales: *const c_double,
    scales_len: usize,
    delta: c_double,
    tau: c_double,
    out_searched: *mut c_int,
    out_flow: *mut *mut FaFlow,
) -> FaStatus {
    if cur.is_null()
        || reference.is_null()
        || scales.is_null()
        || out_searched.is_null()
        || out_flow.is_null()
    {
        set_error("null pointer");
        return FaStatus::NullPointer;
    }
    let fc = match frame_from_rgb8(cur, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let fr = match frame_from_rgb8(reference, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let cfg = ScaleSearchConfig {
        scales: std::slice::from_raw_parts(scales, scales_len).to_vec(),
        delta,
        tau,
    };
    let estimator = flowalign::flow::PyramidLk::default();
    match gated_flow(&fc, &fr, &cfg, &estimator, false) {
        Ok(res) => {
            *out_searched = res.search.is_some() as c_int;
            *out_flow = flow_into_handle(res.flow);
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Opaque alignment-model handle (parameters + reconstruction head).
#[repr(C)]
pub struct FaModel {
    _private: [u8; 0],
}

struct ModelInner {
    params: FgdParams<f32>,
    #[allow(dead_code)]
    recon: ReconHead<f32>,
}

/// Load an alignment model from a checkpoint with the given channel/group
/// configuration (pass 0 for defaults: channels 32/64/96, 1 group, k=3).
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out_model` receives an
/// owned handle released with [`fa_model_free`].
#[no_mangle]
pub unsafe extern "C" fn fa_model_load(
    path: *const c_char,
    c1: usize,
    c2: usize,
    c3: usize,
    groups: usize,
    out_model: *mut *mut FaModel,
) -> FaStatus {
    if path.is_null() || out_model.is_null() {
        set_error("null pointer");
        return FaStatus::NullPointer;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return FaStatus::InvalidArgument;
        }
    };
    let defaults = TsmcConfig::default();
    let cfg = TsmcConfig {
        channels: if c1 == 0 {
            defaults.channels
        } else {
            [c1, c2, c3]
        },
        groups: if groups == 0 { defaults.groups } else { groups },
        kernel: defaults.kernel,
    };
    let load = || -> Result<ModelInner, Error> {
        let entries = read_checkpoint::<f32>(Path::new(path))?;
        Ok(ModelInner {
            params: FgdParams::from_named(cfg, &entries)?,
            recon: ReconHead::from_named(cfg.channels[0], &entries)?,
        })
    };
    match load() {
        Ok(inner) => {
            *out_model = Box::into_raw(Box::new(inner)) as *mut FaModel;
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Release a model handle (null is a no-op).
///
/// # Safety
/// `model` must have come from [`fa_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fa_model_free(model: *mut FaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model as *mut ModelInner));
    }
}

/// Run two-stage motion compensation of `reference` toward `cur` using the
/// given flow, and report the aligned-context and coarse-warp MSE against
/// the current frame's feature pyramid (mean over the three levels).
/// Frame dimensions must be multiples of 4.
///
/// # Safety
/// Pointers as in [`fa_psnr`]; `model` and `flow` must be live handles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fa_model_align_score(
    model: *const FaModel,
    cur: *const u8,
    reference: *const u8,
    width: usize,
    height: usize,
    flow: *const FaFlow,
    out_aligned_mse: *mut c_double,
    out_coarse_mse: *mut c_double,
) -> FaStatus {
    let inner = match (model as *const ModelInner).as_ref() {
        Some(m) => m,
        None => {
            set_error("null model");
            return FaStatus::NullPointer;
        }
    };
    let (Some(fl), false, false, false, false) = (
        flow_ref(flow),
        cur.is_null(),
        reference.is_null(),
        out_aligned_mse.is_null(),
        out_coarse_mse.is_null(),
    ) else {
        set_error("null pointer");
        return FaStatus::NullPointer;
    };
    let fc = match frame_from_rgb8(cur, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let fr = match frame_from_rgb8(reference, width, height) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let run = || -> Result<(f64, f64), Error> {
        let out = tsmc_forward(&fr, fl, &inner.params)?;
        let targets = build_feature_pyramid(&fc, &inner.params)?;
        fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| {
                    let d = x.as_f64() - y.as_f64();
                    d * d
                })
                .sum::<f64>()
                / a.numel() as f64
        }
        let mut aligned = 0.0;
        let mut coarse = 0.0;
        for s in 0..3 {
            aligned += mse(&out.contexts[s], &targets.levels[s]) / 3.0;
            coarse += mse(&out.warped[s], &targets.levels[s]) / 3.0;
        }
        Ok((aligned, coarse))
    };
    match run() {
        Ok((a, c)) => {
            *out_aligned_mse = a;
            *out_coarse_mse = c;
            FaStatus::Ok
        }
        Err(e) => fail(e),
    }
}
