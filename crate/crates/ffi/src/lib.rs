//! C ABI.
//!
//! Every fallible function returns a [`SccanStatus`] and writes its result
//! through an out pointer. On failure the message is kept per thread and read
//! with [`sccan_last_error`]. Objects are opaque heap handles released by their
//! `_free` function; passing null to a `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sccan::cost::{cost_report, CostConfig};
use sccan::episodes::{load_episode, synth_episode, Episode, SynthSpec};
use sccan::model::{binarize_prediction, dice_loss, mask_iou, PreparedEpisode, Sccan};
use sccan::params::ParamStore;
use sccan::pma::{aggregate_pseudo_mask, binarize, max_similarity_prior, PseudoMask};
use sccan::train::{episode_pma, load_checkpoint};
use sccan::{sctf, DType, Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SccanStatus {
    Ok = 0,
    NullPointer = 1,
    /// Shapes, window sizes or other arguments that do not fit together.
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    /// A non-finite value appeared during computation.
    Numerical = 6,
    /// An internal invariant broke; the message has details.
    Internal = 7,
}

/// Dense `f64` tensor, row-major.
pub struct SccanTensor(Tensor);

/// Query, support shots and masks for one episode.
pub struct SccanEpisode(Episode);

/// Trained model with its parameters.
pub struct SccanModel {
    model: Sccan,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SccanStatus {
    match e {
        Error::Io { .. } => SccanStatus::Io,
        Error::Format { .. } => SccanStatus::Format,
        Error::Config(_) | Error::Generation(_) => SccanStatus::Config,
        Error::NonFinite { .. } => SccanStatus::Numerical,
        Error::Consistency(_) | Error::Contract(_) => SccanStatus::Internal,
        _ => SccanStatus::InvalidArgument,
    }
}

struct Null;

impl From<Null> for Failure {
    fn from(_: Null) -> Self {
        Failure(SccanStatus::NullPointer, "null pointer argument".into())
    }
}

struct Failure(SccanStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, records any error and converts panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SccanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SccanStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SccanStatus::Internal
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T) -> Result<&'a T, Null> {
    unsafe { p.as_ref() }.ok_or(Null)
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    let s = unsafe { as_ref(p)? };
    let s = unsafe { CStr::from_ptr(s) }.to_str().map_err(|_| {
        Failure(
            SccanStatus::InvalidArgument,
            "path is not valid UTF-8".into(),
        )
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Null.into());
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn put_value<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Null.into());
    }
    unsafe { *out = value };
    Ok(())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn sccan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sccan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `data` (`numel` = product of `shape`) into a new tensor.
///
/// # Safety
/// `shape` must point to `rank` values and `data` to their product.
#[no_mangle]
pub unsafe extern "C" fn sccan_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut SccanTensor,
) -> SccanStatus {
    guard(|| {
        if shape.is_null() || data.is_null() {
            return Err(Null.into());
        }
        let shape = unsafe { std::slice::from_raw_parts(shape, rank) };
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| {
                Failure(
                    SccanStatus::InvalidArgument,
                    format!("shape {shape:?} overflows"),
                )
            })?;
        let data = unsafe { std::slice::from_raw_parts(data, n) }.to_vec();
        unsafe { put(out, SccanTensor(Tensor::from_vec(shape, data)?)) }
    })
}

/// # Safety
/// `t` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sccan_tensor_free(t: *mut SccanTensor) {
    if !t.is_null() {
        drop(unsafe { Box::from_raw(t) });
    }
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sccan_tensor_rank(t: *const SccanTensor) -> usize {
    unsafe { t.as_ref() }.map_or(0, |t| t.0.rank())
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sccan_tensor_numel(t: *const SccanTensor) -> usize {
    unsafe { t.as_ref() }.map_or(0, |t| t.0.numel())
}

/// Writes the shape into `out`, which must hold `rank` values.
///
/// # Safety
/// `t` must be a live handle and `out` must have room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn sccan_tensor_shape(
    t: *const SccanTensor,
    out: *mut usize,
    cap: usize,
) -> SccanStatus {
    guard(|| {
        let t = unsafe { as_ref(t)? };
        if out.is_null() {
            return Err(Null.into());
        }
        let shape = t.0.shape();
        if cap < shape.len() {
            return Err(Failure(
                SccanStatus::InvalidArgument,
                format!("rank {} exceeds capacity {cap}", shape.len()),
            ));
        }
        unsafe { ptr::copy_nonoverlapping(shape.as_ptr(), out, shape.len()) };
        Ok(())
    })
}

/// Borrowed view of the values, valid while the handle lives.
///
/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sccan_tensor_data(t: *const SccanTensor) -> *const f64 {
    unsafe { t.as_ref() }.map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sccan_tensor_load(
    path: *const c_char,
    out: *mut *mut SccanTensor,
) -> SccanStatus {
    guard(|| {
        let path = unsafe { path_arg(path)? };
        unsafe { put(out, SccanTensor(sctf::load(path)?)) }
    })
}

/// Writes the tensor in `f64` unless `f32` is nonzero.
///
/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sccan_tensor_save(
    t: *const SccanTensor,
    path: *const c_char,
    f32: i32,
) -> SccanStatus {
    guard(|| {
        let t = unsafe { as_ref(t)? };
        let path = unsafe { path_arg(path)? };
        let dtype = if f32 != 0 { DType::F32 } else { DType::F64 };
        sctf::save(&t.0.clone().to_dtype(dtype), path)?;
        Ok(())
    })
}

unsafe fn pma(
    fq: *const SccanTensor,
    fs: *const SccanTensor,
    ms: *const SccanTensor,
    out: *mut *mut SccanTensor,
    f: fn(&Tensor, &Tensor, &Tensor) -> sccan::Result<PseudoMask>,
) -> SccanStatus {
    guard(|| {
        let (fq, fs, ms) = unsafe { (as_ref(fq)?, as_ref(fs)?, as_ref(ms)?) };
        let m = f(&fq.0, &fs.0, &ms.0)?;
        unsafe { put(out, SccanTensor(m.values)) }
    })
}

/// Aggregated pseudo mask (`1×H×W`, in `[0, 1]`) from `C×H×W` query and
/// support features and a `1×H×W` binary support mask.
///
/// # Safety
/// Inputs must be live handles.
#[no_mangle]
pub unsafe extern "C" fn sccan_pma_aggregated(
    fq: *const SccanTensor,
    fs: *const SccanTensor,
    ms: *const SccanTensor,
    out: *mut *mut SccanTensor,
) -> SccanStatus {
    unsafe { pma(fq, fs, ms, out, aggregate_pseudo_mask) }
}

/// Max-similarity prior with the same inputs and output as [`sccan_pma_aggregated`].
///
/// # Safety
/// Inputs must be live handles.
#[no_mangle]
pub unsafe extern "C" fn sccan_pma_max_similarity(
    fq: *const SccanTensor,
    fs: *const SccanTensor,
    ms: *const SccanTensor,
    out: *mut *mut SccanTensor,
) -> SccanStatus {
    unsafe { pma(fq, fs, ms, out, max_similarity_prior) }
}

/// 1 where `t >= threshold`, else 0.
///
/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sccan_binarize(
    t: *const SccanTensor,
    threshold: f64,
    out: *mut *mut SccanTensor,
) -> SccanStatus {
    guard(|| {
        let t = unsafe { as_ref(t)? };
        let m = PseudoMask {
            values: t.0.clone(),
            source: sccan::pma::PseudoMaskSource::Aggregated,
        };
        unsafe { put(out, SccanTensor(binarize(&m, threshold))) }
    })
}

/// Dice loss between a foreground probability map and a binary mask.
///
/// # Safety
/// Inputs must be live handles.
#[no_mangle]
pub unsafe extern "C" fn sccan_dice_loss(
    pred: *const SccanTensor,
    gt: *const SccanTensor,
    smooth: f64,
    out: *mut f64,
) -> SccanStatus {
    guard(|| {
        let (pred, gt) = unsafe { (as_ref(pred)?, as_ref(gt)?) };
        unsafe { put_value(out, dice_loss(&pred.0, &gt.0, smooth)?) }
    })
}

/// Foreground IoU of two binary masks. `defined` is set to 0 when both are empty.
///
/// # Safety
/// Inputs must be live handles.
#[no_mangle]
pub unsafe extern "C" fn sccan_mask_iou(
    pred: *const SccanTensor,
    gt: *const SccanTensor,
    out: *mut f64,
    defined: *mut i32,
) -> SccanStatus {
    guard(|| {
        let (pred, gt) = unsafe { (as_ref(pred)?, as_ref(gt)?) };
        let iou = mask_iou(&pred.0, &gt.0)?;
        unsafe {
            put_value(out, iou.unwrap_or(0.0))?;
            put_value(defined, i32::from(iou.is_some()))
        }
    })
}

/// Ratio of SCCA attention-core FLOPs to window self-attention FLOPs per block.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sccan_cost_ratio(
    height: usize,
    width: usize,
    window: usize,
    dim: usize,
    heads: usize,
    out: *mut f64,
) -> SccanStatus {
    guard(|| {
        let cfg = CostConfig {
            height,
            width,
            window,
            dim,
            heads,
            blocks: 1,
            mlp_ratio: 1,
            dtype: DType::F32,
        };
        unsafe { put_value(out, cost_report(&cfg)?.scca_ratio()) }
    })
}

/// Reads an episode directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sccan_episode_load(
    dir: *const c_char,
    out: *mut *mut SccanEpisode,
) -> SccanStatus {
    guard(|| {
        let dir = unsafe { path_arg(dir)? };
        unsafe { put(out, SccanEpisode(load_episode(dir)?)) }
    })
}

/// Generates a synthetic episode with default settings except the map size.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sccan_episode_synth(
    seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut *mut SccanEpisode,
) -> SccanStatus {
    guard(|| {
        let spec = SynthSpec {
            channels,
            height,
            width,
            blob: height.min(width) / 2,
            ..SynthSpec::default()
        };
        unsafe { put(out, SccanEpisode(synth_episode(seed, &spec)?)) }
    })
}

/// # Safety
/// `ep` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sccan_episode_free(ep: *mut SccanEpisode) {
    if !ep.is_null() {
        drop(unsafe { Box::from_raw(ep) });
    }
}

/// Copy of the episode's `1×H×W` query ground truth.
///
/// # Safety
/// `ep` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sccan_episode_query_mask(
    ep: *const SccanEpisode,
    out: *mut *mut SccanTensor,
) -> SccanStatus {
    guard(|| {
        let ep = unsafe { as_ref(ep)? };
        unsafe { put(out, SccanTensor(ep.0.query_mask.clone())) }
    })
}

/// Query IoU of the aggregated and max-similarity pseudo masks at `threshold`.
/// Needs an episode with high-level features.
///
/// # Safety
/// `ep` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sccan_episode_pma_iou(
    ep: *const SccanEpisode,
    threshold: f64,
    aggregated: *mut f64,
    max_similarity: *mut f64,
) -> SccanStatus {
    guard(|| {
        let ep = unsafe { as_ref(ep)? };
        let r = episode_pma(&ep.0, threshold)?;
        unsafe {
            put_value(aggregated, r.aggregated_iou)?;
            put_value(max_similarity, r.max_similarity_iou)
        }
    })
}

/// Loads a checkpoint directory written by `sccan train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sccan_model_load(
    dir: *const c_char,
    out: *mut *mut SccanModel,
) -> SccanStatus {
    guard(|| {
        let dir = unsafe { path_arg(dir)? };
        let (model, store) = load_checkpoint(&dir)?;
        unsafe { put(out, SccanModel { model, store }) }
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sccan_model_free(m: *mut SccanModel) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// `2×H×W` probabilities (background, foreground) for the episode's query.
/// When `mask` is not null it also receives the binary `1×H×W` prediction.
///
/// # Safety
/// `m` and `ep` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn sccan_model_predict(
    m: *const SccanModel,
    ep: *const SccanEpisode,
    probs: *mut *mut SccanTensor,
    mask: *mut *mut SccanTensor,
) -> SccanStatus {
    guard(|| {
        let (m, ep) = unsafe { (as_ref(m)?, as_ref(ep)?) };
        if probs.is_null() {
            return Err(Null.into());
        }
        let prepared = PreparedEpisode::new(&ep.0)?;
        let p = m.model.predict(&prepared, &m.store)?;
        if !mask.is_null() {
            unsafe { put(mask, SccanTensor(binarize_prediction(&p)?))? };
        }
        unsafe { put(probs, SccanTensor(p)) }
    })
}
