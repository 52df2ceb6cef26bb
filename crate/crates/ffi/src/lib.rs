//! C ABI over the narvid engine.
//!
//! Every fallible call returns a [`NarvidStatus`]; on failure the message is
//! available from [`narvid_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use narvid::dataio::{read_container, write_container, Dataset};
use narvid::filtering::FilterMode;
use narvid::inference::{fuse, model_matrices, report, zero_shot_matrices, Direction, FusionMode};
use narvid::matching::SimilarityMatrices;
use narvid::model::{load_checkpoint, save_checkpoint, ModelParams};
use narvid::objective::{train, TrainConfig};
use narvid::synthlab::{gen_planted, PlantSpec};
use narvid::NarvidError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NarvidStatus {
    Ok = 0,
    NullPointer = 1,
    Usage = 2,
    Shape = 3,
    Numeric = 4,
    Config = 5,
    Io = 6,
    Format = 7,
    Validation = 8,
    Corruption = 9,
    Panic = 10,
}

impl From<&NarvidError> for NarvidStatus {
    fn from(e: &NarvidError) -> Self {
        match e {
            NarvidError::Shape(_) => NarvidStatus::Shape,
            NarvidError::Numeric(_) => NarvidStatus::Numeric,
            NarvidError::Config(_) => NarvidStatus::Config,
            NarvidError::Usage(_) => NarvidStatus::Usage,
            NarvidError::Io { .. } => NarvidStatus::Io,
            NarvidError::Format(_) => NarvidStatus::Format,
            NarvidError::Validation(_) => NarvidStatus::Validation,
            NarvidError::Corruption { .. } => NarvidStatus::Corruption,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NarvidFusionMode {
    Standardized = 0,
    Sum = 1,
    Qv = 2,
    Qn = 3,
}

impl From<NarvidFusionMode> for FusionMode {
    fn from(m: NarvidFusionMode) -> Self {
        match m {
            NarvidFusionMode::Standardized => FusionMode::Standardized,
            NarvidFusionMode::Sum => FusionMode::Sum,
            NarvidFusionMode::Qv => FusionMode::Qv,
            NarvidFusionMode::Qn => FusionMode::Qn,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NarvidDirection {
    T2v = 0,
    V2t = 1,
}

impl From<NarvidDirection> for Direction {
    fn from(d: NarvidDirection) -> Self {
        match d {
            NarvidDirection::T2v => Direction::T2v,
            NarvidDirection::V2t => Direction::V2t,
        }
    }
}

/// Planted dataset settings; rates lie in [0, 1].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct NarvidPlantSpec {
    pub episodes: usize,
    pub frames: usize,
    pub words: usize,
    pub dim: usize,
    pub seed: u64,
    pub signal: f64,
    pub corrupt: f64,
    pub overlap: f64,
}

/// Retrieval metrics; recalls in percent.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NarvidReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
    pub mnr: f64,
    pub n: usize,
}

/// Opaque dataset handle.
pub struct NarvidDataset(Dataset);

/// Opaque model handle.
pub struct NarvidModel(ModelParams);

/// Opaque pair of `n x n` score matrices.
pub struct NarvidScores(SimilarityMatrices);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (NarvidStatus, String)>) -> NarvidStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NarvidStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NarvidStatus::Panic
        }
    }
}

type Fallible<T> = Result<T, (NarvidStatus, String)>;

fn engine<T>(r: narvid::Result<T>) -> Fallible<T> {
    r.map_err(|e| (NarvidStatus::from(&e), e.to_string()))
}

fn null(name: &str) -> (NarvidStatus, String) {
    (NarvidStatus::NullPointer, format!("{name} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Fallible<&'a T> {
    // SAFETY: the caller passes a live pointer or null.
    unsafe { p.as_ref() }.ok_or_else(|| null(name))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Fallible<PathBuf> {
    if p.is_null() {
        return Err(null(name));
    }
    // SAFETY: non-null, and the caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    let s = s.to_str().map_err(|_| (NarvidStatus::Usage, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Fallible<()> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: `out` is non-null and writable per the caller contract.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next narvid call on the same thread.
#[no_mangle]
pub extern "C" fn narvid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn narvid_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Reads a dataset container.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn narvid_dataset_read(path: *const c_char, out: *mut *mut NarvidDataset) -> NarvidStatus {
    guard(|| {
        let path = unsafe { path_arg(path, "path") }?;
        let ds = engine(read_container(path))?;
        unsafe { emit(out, NarvidDataset(ds)) }
    })
}

/// Writes a dataset container.
///
/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn narvid_dataset_write(ds: *const NarvidDataset, path: *const c_char) -> NarvidStatus {
    guard(|| {
        let ds = unsafe { borrow(ds, "dataset") }?;
        let path = unsafe { path_arg(path, "path") }?;
        engine(write_container(&ds.0, path))
    })
}

/// Generates a planted dataset.
///
/// # Safety
/// `spec` must point to a valid spec and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn narvid_dataset_generate(
    spec: *const NarvidPlantSpec,
    out: *mut *mut NarvidDataset,
) -> NarvidStatus {
    guard(|| {
        let s = *unsafe { borrow(spec, "spec") }?;
        let spec = PlantSpec {
            episodes: s.episodes,
            frames: s.frames,
            words: s.words,
            dim: s.dim,
            seed: s.seed,
            signal: s.signal,
            corrupt: s.corrupt,
            overlap: s.overlap,
        };
        let ds = engine(gen_planted(&spec))?;
        unsafe { emit(out, NarvidDataset(ds)) }
    })
}

/// Number of episodes, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn narvid_dataset_len(ds: *const NarvidDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.0.len())
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn narvid_dataset_dim(ds: *const NarvidDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.0.dim())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn narvid_dataset_free(ds: *mut NarvidDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Trains a model. `config_json` may be null for all defaults.
///
/// # Safety
/// `ds` must be a live handle, `config_json` null or NUL-terminated, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn narvid_train(
    ds: *const NarvidDataset,
    config_json: *const c_char,
    out: *mut *mut NarvidModel,
) -> NarvidStatus {
    guard(|| {
        let ds = unsafe { borrow(ds, "dataset") }?;
        let cfg = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = unsafe { CStr::from_ptr(config_json) }
                .to_str()
                .map_err(|_| (NarvidStatus::Usage, "config is not UTF-8".to_string()))?;
            engine(TrainConfig::from_json(text))?
        };
        let params = train(&ds.0, &cfg, |_| {}).map_err(|f| (NarvidStatus::from(&f.error), f.error.to_string()))?;
        unsafe { emit(out, NarvidModel(params)) }
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn narvid_model_load(path: *const c_char, out: *mut *mut NarvidModel) -> NarvidStatus {
    guard(|| {
        let path = unsafe { path_arg(path, "path") }?;
        let params = engine(load_checkpoint(path))?;
        unsafe { emit(out, NarvidModel(params)) }
    })
}

/// Saves a checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn narvid_model_save(model: *const NarvidModel, path: *const c_char) -> NarvidStatus {
    guard(|| {
        let model = unsafe { borrow(model, "model") }?;
        let path = unsafe { path_arg(path, "path") }?;
        engine(save_checkpoint(&model.0, path))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn narvid_model_free(model: *mut NarvidModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Scores every query against every episode. A null `model` gives the
/// zero-shot baseline and ignores `p` and `tau`.
///
/// # Safety
/// `model` must be null or live, `ds` live, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn narvid_scores_compute(
    model: *const NarvidModel,
    ds: *const NarvidDataset,
    p: f64,
    tau: f64,
    out: *mut *mut NarvidScores,
) -> NarvidStatus {
    guard(|| {
        let ds = unsafe { borrow(ds, "dataset") }?;
        let m = match unsafe { model.as_ref() } {
            None => zero_shot_matrices(&ds.0),
            Some(model) => {
                if !(tau.is_finite() && tau > 0.0) {
                    return Err((NarvidStatus::Usage, format!("tau must be positive, got {tau}")));
                }
                engine(model_matrices(&model.0, &ds.0, FilterMode::Nucleus(p), tau))?
            }
        };
        unsafe { emit(out, NarvidScores(m)) }
    })
}

/// Side length `n` of the score matrices, or 0 for a null handle.
///
/// # Safety
/// `scores` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn narvid_scores_size(scores: *const NarvidScores) -> usize {
    unsafe { scores.as_ref() }.map_or(0, |s| s.0.qv.rows())
}

/// Writes the fused `n x n` matrix row-major into `buf` of `len` doubles.
///
/// # Safety
/// `scores` must be live and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn narvid_scores_fuse(
    scores: *const NarvidScores,
    mode: NarvidFusionMode,
    buf: *mut f64,
    len: usize,
) -> NarvidStatus {
    guard(|| {
        let s = unsafe { borrow(scores, "scores") }?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let fused = engine(fuse(&s.0.qv, &s.0.qn, mode.into()))?;
        let data = fused.data();
        if len < data.len() {
            return Err((NarvidStatus::Shape, format!("buffer holds {len} values, need {}", data.len())));
        }
        // SAFETY: `buf` is writable for `len >= data.len()` doubles.
        unsafe { ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len()) };
        Ok(())
    })
}

/// Fuses, orients and ranks the scores into `out`.
///
/// # Safety
/// `scores` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn narvid_scores_report(
    scores: *const NarvidScores,
    mode: NarvidFusionMode,
    direction: NarvidDirection,
    out: *mut NarvidReport,
) -> NarvidStatus {
    guard(|| {
        let s = unsafe { borrow(scores, "scores") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = engine(report(&s.0, mode.into(), direction.into()))?;
        let value = NarvidReport { r1: r.r1, r5: r.r5, r10: r.r10, mdr: r.mdr, mnr: r.mnr, n: r.n };
        // SAFETY: checked non-null above.
        unsafe { *out = value };
        Ok(())
    })
}

/// # Safety
/// `scores` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn narvid_scores_free(scores: *mut NarvidScores) {
    if !scores.is_null() {
        drop(unsafe { Box::from_raw(scores) });
    }
}
