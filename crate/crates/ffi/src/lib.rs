//! C interface to `dgp-rtn`.
//!
//! Every fallible function returns a [`DgpStatus`]; on anything other than
//! `DGP_STATUS_OK` the message is available from [`dgp_last_error`] on the
//! same thread until the next failing call. Datasets and models are opaque
//! handles owned by the caller and released with their `_free` function.
//! Paths are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dgp_rtn::distributions::{binomial_kl_bound, binomial_kl_exact, delta_f2, theorem1_m, GaussianParams};
use dgp_rtn::evaluation::{relation_error, score_edges, ScoreMode};
use dgp_rtn::model::Model;
use dgp_rtn::synthdata::{self, Conversation, GenConfig};
use dgp_rtn::{checkpoint, training, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A path was not valid UTF-8.
    InvalidUtf8 = 2,
    Contract = 3,
    Domain = 4,
    Shape = 5,
    NonFinite = 6,
    Io = 7,
    Format = 8,
    Config = 9,
    /// The library panicked; this is a bug.
    Panic = 10,
}

impl From<&Error> for DgpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Contract(_) => Self::Contract,
            Error::Domain(_) => Self::Domain,
            Error::Shape { .. } => Self::Shape,
            Error::NonFinite(_) => Self::NonFinite,
            Error::Io { .. } => Self::Io,
            Error::Format(_) => Self::Format,
            Error::Config(_) => Self::Config,
        }
    }
}

/// Noiseless metrics over a dataset; `frames` is the number of labelled
/// frames the averages run over.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DgpMetrics {
    pub ce: f64,
    pub kl_edges: f64,
    pub kl_transform: f64,
    pub total: f64,
    pub accuracy: f64,
    pub frames: u64,
}

/// A set of conversations.
pub struct DgpDataset {
    conversations: Vec<Conversation>,
}

/// A model restored from a checkpoint, with the β it was trained at.
pub struct DgpModel {
    model: Model,
    beta: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(DgpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> DgpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => DgpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DgpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DgpStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|e| Failure(DgpStatus::InvalidUtf8, format!("path: {e}")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dgp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Minimizer `m ∈ (0, ½)` of the KL from the Binomial proxy to `𝒩(mu, var)`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dgp_theorem1_m(mu: f64, var: f64, out: *mut f64) -> DgpStatus {
    guard(|| write_out(out, theorem1_m(GaussianParams::new(mu, var)?)?))
}

/// Closed-form upper bound on `KL(ℬ(∞, m) ‖ ℬ(∞, m0))`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dgp_binomial_kl_bound(m: f64, m0: f64, out: *mut f64) -> DgpStatus {
    guard(|| write_out(out, binomial_kl_bound(m, m0)?))
}

/// `KL(ℬ(n, lambda) ‖ ℬ(n, lambda0))`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dgp_binomial_kl_exact(n: u64, lambda: f64, lambda0: f64, out: *mut f64) -> DgpStatus {
    guard(|| write_out(out, binomial_kl_exact(n, lambda, lambda0)?))
}

/// Excess of the proxy KL above its infimum at `m` in the `λ → 0` limit.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dgp_delta_f2(m: f64, out: *mut f64) -> DgpStatus {
    guard(|| write_out(out, delta_f2(m)?))
}

/// Generates `count` conversations with the default generator settings and
/// the given seed.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dgp_dataset_generate(count: usize, seed: u64, out: *mut *mut DgpDataset) -> DgpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let conversations = synthdata::generate(&GenConfig { seed, ..GenConfig::default() }, count)?;
        write_out(out, Box::into_raw(Box::new(DgpDataset { conversations })))
    })
}

/// Reads a JSON Lines dataset.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dgp_dataset_load(path: *const c_char, out: *mut *mut DgpDataset) -> DgpStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let conversations = synthdata::load(&path)?;
        write_out(out, Box::into_raw(Box::new(DgpDataset { conversations })))
    })
}

/// Writes a dataset as JSON Lines.
///
/// # Safety
/// `dataset` must be null or a live handle; `path` must be null or a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dgp_dataset_save(dataset: *const DgpDataset, path: *const c_char) -> DgpStatus {
    guard(|| {
        let dataset = handle(dataset, "dataset")?;
        synthdata::save(&path_arg(path)?, &dataset.conversations)?;
        Ok(())
    })
}

/// Number of conversations; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dgp_dataset_len(dataset: *const DgpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.conversations.len())
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dgp_dataset_free(dataset: *mut DgpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Restores a model from a checkpoint manifest.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_load(path: *const c_char, out: *mut *mut DgpModel) -> DgpStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let (model, manifest) = checkpoint::load(&path)?;
        let beta = manifest.train.map_or(training::TrainConfig::default().beta, |t| t.beta);
        write_out(out, Box::into_raw(Box::new(DgpModel { model, beta })))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_free(model: *mut DgpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Noiseless frame metrics of `model` on `dataset`, with the KL terms
/// weighted by the β stored in the checkpoint.
///
/// # Safety
/// Handles must be null or live; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_evaluate(
    model: *const DgpModel,
    dataset: *const DgpDataset,
    threads: usize,
    out: *mut DgpMetrics,
) -> DgpStatus {
    guard(|| {
        let (model, dataset) = (handle(model, "model")?, handle(dataset, "dataset")?);
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let m = training::evaluate(&model.model, &dataset.conversations, model.beta, threads.max(1))?;
        write_out(
            out,
            DgpMetrics {
                ce: m.ce,
                kl_edges: m.kl_edges,
                kl_transform: m.kl_transform,
                total: m.total,
                accuracy: m.accuracy,
                frames: m.frames as u64,
            },
        )
    })
}

/// Balanced relation-discovery error of the posterior summary edges on
/// `dataset`, calling the top-scored fifth of pairs positive.
///
/// # Safety
/// Handles must be null or live; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_relation_error(
    model: *const DgpModel,
    dataset: *const DgpDataset,
    out: *mut f64,
) -> DgpStatus {
    guard(|| {
        let (model, dataset) = (handle(model, "model")?, handle(dataset, "dataset")?);
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let scores = score_edges(&model.model, &dataset.conversations, ScoreMode::Summary, None)?;
        write_out(out, relation_error(&scores)?.balanced_error)
    })
}
