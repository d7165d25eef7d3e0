//! C ABI over `ehrstream`.
//!
//! Every fallible function returns an [`EhrStatus`]; on failure the message
//! is available from [`ehr_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ehrstream::checkpoint::{load_checkpoint, save_checkpoint};
use ehrstream::encoder::{HeadConfig, Model};
use ehrstream::text_embed::EmbeddingProvider;
use ehrstream::Error;

/// Result codes shared by every function in this library.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EhrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    InvalidArgument = 4,
    Io = 5,
    Format = 6,
    ConfigMismatch = 7,
    CacheMiss = 8,
    DegenerateLabels = 9,
    ShapeMismatch = 10,
    Panic = 11,
    Other = 99,
}

impl From<&Error> for EhrStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => EhrStatus::Io,
            Error::FormatError(_) | Error::ParseError { .. } => EhrStatus::Format,
            Error::ConfigMismatch(_) => EhrStatus::ConfigMismatch,
            Error::CacheMiss(_) => EhrStatus::CacheMiss,
            Error::DegenerateLabels => EhrStatus::DegenerateLabels,
            Error::ShapeMismatch(_) => EhrStatus::ShapeMismatch,
            Error::InvalidConfig(_) | Error::NonFiniteValue(_) | Error::InvalidSpec(_) => EhrStatus::InvalidArgument,
            _ => EhrStatus::Other,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(status: EhrStatus, msg: impl Into<String>) -> EhrStatus {
    set_error(msg.into());
    status
}

fn fail_with(e: Error) -> EhrStatus {
    let status = EhrStatus::from(&e);
    fail(status, format!("{}: {e}", e.name()))
}

/// Runs `f`, turning panics into [`EhrStatus::Panic`].
fn guard(f: impl FnOnce() -> EhrStatus) -> EhrStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(EhrStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, EhrStatus> {
    str_arg(p).map(PathBuf::from)
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, EhrStatus> {
    if p.is_null() {
        return Err(fail(EhrStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EhrStatus::InvalidUtf8, "string argument is not UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize) -> Result<&'a [T], EhrStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(EhrStatus::NullPointer, "null array argument"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! out_arg {
    ($p:expr) => {
        if $p.is_null() {
            return fail(EhrStatus::NullPointer, "null output pointer");
        }
    };
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ehr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ehr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Text pre-embedding source.
pub struct EhrProvider(EmbeddingProvider);

/// Deterministic hash-seeded provider.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ehr_provider_stub(dim: usize, seed: u64, out: *mut *mut EhrProvider) -> EhrStatus {
    guard(|| {
        out_arg!(out);
        if dim == 0 {
            return fail(EhrStatus::InvalidArgument, "dim must be >= 1");
        }
        *out = Box::into_raw(Box::new(EhrProvider(EmbeddingProvider::stub(dim, seed))));
        EhrStatus::Ok
    })
}

/// Provider backed by an embedding cache file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ehr_provider_open_cache(path: *const c_char, out: *mut *mut EhrProvider) -> EhrStatus {
    guard(|| {
        out_arg!(out);
        let path = try_status!(path_arg(path));
        match EmbeddingProvider::open_cache(&path) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(EhrProvider(p)));
                EhrStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Vector width of the provider, 0 for a null handle.
///
/// # Safety
/// `provider` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ehr_provider_dim(provider: *const EhrProvider) -> usize {
    provider.as_ref().map_or(0, |p| p.0.dim())
}

/// Writes the pre-embedding of `text` into `buf`, which must hold `len >= dim`
/// floats.
///
/// # Safety
/// `provider` must be a live handle, `text` NUL-terminated and `buf` valid
/// for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ehr_provider_embed(
    provider: *const EhrProvider,
    text: *const c_char,
    buf: *mut f32,
    len: usize,
) -> EhrStatus {
    guard(|| {
        let Some(p) = provider.as_ref() else {
            return fail(EhrStatus::NullPointer, "null provider");
        };
        out_arg!(buf);
        let text = try_status!(str_arg(text));
        if len < p.0.dim() {
            return fail(EhrStatus::BufferTooSmall, format!("buffer holds {len} floats, need {}", p.0.dim()));
        }
        match p.0.embed_text(text) {
            Ok(v) => {
                std::slice::from_raw_parts_mut(buf, v.len()).copy_from_slice(&v);
                EhrStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// # Safety
/// `provider` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ehr_provider_free(provider: *mut EhrProvider) {
    if !provider.is_null() {
        drop(Box::from_raw(provider));
    }
}

/// A loaded model checkpoint.
pub struct EhrCheckpoint(Model<f32>);

/// Loads and validates a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ehr_checkpoint_load(path: *const c_char, out: *mut *mut EhrCheckpoint) -> EhrStatus {
    guard(|| {
        out_arg!(out);
        let path = try_status!(path_arg(path));
        match load_checkpoint(&path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(EhrCheckpoint(m)));
                EhrStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Writes the checkpoint back to disk atomically.
///
/// # Safety
/// `ckpt` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ehr_checkpoint_save(ckpt: *const EhrCheckpoint, path: *const c_char) -> EhrStatus {
    guard(|| {
        let Some(c) = ckpt.as_ref() else {
            return fail(EhrStatus::NullPointer, "null checkpoint");
        };
        let path = try_status!(path_arg(path));
        match save_checkpoint(&c.0, &path) {
            Ok(()) => EhrStatus::Ok,
            Err(e) => fail_with(e),
        }
    })
}

/// Shape summary of a checkpoint.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EhrModelInfo {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub window_minutes: u32,
    pub pre_dim: usize,
    /// 0 for a pre-training checkpoint, else the task head width.
    pub task_out_dim: usize,
    pub n_features: usize,
    pub n_values: usize,
    pub n_tensors: usize,
    pub n_scalars: usize,
}

/// # Safety
/// `ckpt` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ehr_checkpoint_info(ckpt: *const EhrCheckpoint, out: *mut EhrModelInfo) -> EhrStatus {
    guard(|| {
        let Some(c) = ckpt.as_ref() else {
            return fail(EhrStatus::NullPointer, "null checkpoint");
        };
        out_arg!(out);
        let cfg = &c.0.config;
        let (n_features, n_values) = match cfg.head {
            HeadConfig::Pretrain { n_features, n_values } => (n_features, n_values),
            HeadConfig::Finetune { .. } => (0, 0),
        };
        *out = EhrModelInfo {
            layers: cfg.encoder.layers,
            hidden: cfg.encoder.hidden,
            heads: cfg.encoder.heads,
            ffn_dim: cfg.encoder.ffn_dim,
            max_seq_len: cfg.encoder.max_seq_len,
            window_minutes: cfg.window_minutes,
            pre_dim: cfg.pre_dim,
            task_out_dim: cfg.head_out_dim(),
            n_features,
            n_values,
            n_tensors: c.0.params.tensors.len(),
            n_scalars: c.0.params.tensors.iter().map(|t| t.len()).sum(),
        };
        EhrStatus::Ok
    })
}

/// # Safety
/// `ckpt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ehr_checkpoint_free(ckpt: *mut EhrCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

unsafe fn binary_metric(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
    f: fn(&[f64], &[bool]) -> ehrstream::Result<f64>,
) -> EhrStatus {
    guard(|| {
        out_arg!(out);
        let scores = try_status!(slice_arg(scores, n));
        let labels: Vec<bool> = try_status!(slice_arg(labels, n)).iter().map(|&y| y != 0).collect();
        match f(scores, &labels) {
            Ok(v) => {
                *out = v;
                EhrStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Area under the ROC curve; labels are 0 or non-zero.
///
/// # Safety
/// `scores` and `labels` must be valid for `n` reads, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn ehr_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> EhrStatus {
    binary_metric(scores, labels, n, out, ehrstream::metrics::auroc)
}

/// Area under the precision-recall curve.
///
/// # Safety
/// As for [`ehr_auroc`].
#[no_mangle]
pub unsafe extern "C" fn ehr_auprc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> EhrStatus {
    binary_metric(scores, labels, n, out, ehrstream::metrics::auprc)
}

/// Mean absolute error.
///
/// # Safety
/// `preds` and `targets` must be valid for `n` reads, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn ehr_mae(preds: *const f64, targets: *const f64, n: usize, out: *mut f64) -> EhrStatus {
    guard(|| {
        out_arg!(out);
        let p = try_status!(slice_arg(preds, n));
        let t = try_status!(slice_arg(targets, n));
        match ehrstream::metrics::mae(p, t) {
            Ok(v) => {
                *out = v;
                EhrStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Combined pre-training loss from its per-term means and value-slot counts.
/// A term with a zero count contributes nothing.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ehr_mlvm_total_loss(
    l_f: f64,
    l_cat: f64,
    n_cat: usize,
    l_cont: f64,
    n_cont: usize,
    alpha: f64,
    beta: f64,
    out: *mut f64,
) -> EhrStatus {
    guard(|| {
        out_arg!(out);
        *out = ehrstream::objective::total_loss(l_f, l_cat, n_cat, l_cont, n_cont, alpha, beta);
        EhrStatus::Ok
    })
}
