//! C ABI over the `lightgc2n` crate.
//!
//! Every object crosses the boundary as an opaque pointer created and freed
//! here. Fallible calls return an [`Lgc2nStatus`]; on failure the message is
//! kept per thread and read back with [`lgc2n_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lightgc2n::config::RunConfig;
use lightgc2n::data::Split;
use lightgc2n::experiment::{self, Prepared};
use lightgc2n::model::Model;
use lightgc2n::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lgc2nStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Config = 3,
    Data = 4,
    Divergence = 5,
    Incompatible = 6,
    BufferSize = 7,
    Panic = 8,
}

/// Run configuration; starts at the library defaults.
pub struct Lgc2nConfig(RunConfig);

/// A split dataset together with its interaction graph.
pub struct Lgc2nDataset(Prepared);

pub struct Lgc2nModel(Model);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Lgc2nMetrics {
    pub recall_5: f64,
    pub recall_20: f64,
    pub mrr_5: f64,
    pub mrr_20: f64,
    pub evaluated: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Lgc2nDatasetShape {
    pub items: usize,
    pub accounts: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(Lgc2nStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) | Error::Spec(_) => Lgc2nStatus::Config,
            Error::Divergence { .. } => Lgc2nStatus::Divergence,
            Error::Compatibility(_) => Lgc2nStatus::Incompatible,
            _ => Lgc2nStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Lgc2nStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let what = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(Lgc2nStatus::Panic, format!("panic: {what}")))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            Lgc2nStatus::Ok
        }
        Err(Failure(status, message)) => {
            set_last_error(message);
            status
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(Lgc2nStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(Lgc2nStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(Lgc2nStatus::InvalidString, format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(Lgc2nStatus::NullPointer, "output pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(Lgc2nStatus::NullPointer, "output pointer is null".into()));
    }
    *out = value;
    Ok(())
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn lgc2n_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn lgc2n_config_new() -> *mut Lgc2nConfig {
    Box::into_raw(Box::new(Lgc2nConfig(RunConfig::default())))
}

/// Sets one configuration key, using the same names as the CLI config file.
///
/// # Safety
/// `config` must come from [`lgc2n_config_new`]; `key` and `value` must be
/// nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_config_set(config: *mut Lgc2nConfig, key: *const c_char, value: *const c_char) -> Lgc2nStatus {
    guard(|| {
        let cfg = config
            .as_mut()
            .ok_or_else(|| Failure(Lgc2nStatus::NullPointer, "config is null".into()))?;
        let (key, value) = (string(key, "key")?, string(value, "value")?);
        cfg.0.set(key, value)?;
        Ok(())
    })
}

/// # Safety
/// `config` must come from [`lgc2n_config_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_config_free(config: *mut Lgc2nConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Generates and splits the synthetic dataset described by `config`.
///
/// # Safety
/// `config` must be a live config handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_dataset_synthetic(config: *const Lgc2nConfig, out: *mut *mut Lgc2nDataset) -> Lgc2nStatus {
    guard(|| {
        let cfg = deref(config, "config")?;
        cfg.0.validate()?;
        put(out, Lgc2nDataset(experiment::synthetic(&cfg.0)?))
    })
}

/// Loads and splits an interaction log.
///
/// # Safety
/// `config` must be a live config handle, `path` a nul-terminated string and
/// `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_dataset_load(
    config: *const Lgc2nConfig,
    path: *const c_char,
    out: *mut *mut Lgc2nDataset,
) -> Lgc2nStatus {
    guard(|| {
        let cfg = deref(config, "config")?;
        let path = PathBuf::from(string(path, "path")?);
        cfg.0.validate()?;
        let raw = experiment::load(&path, &cfg.0.data)?;
        put(out, Lgc2nDataset(experiment::prepare(&raw, &cfg.0.data)?))
    })
}

/// # Safety
/// `dataset` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_dataset_shape(dataset: *const Lgc2nDataset, out: *mut Lgc2nDatasetShape) -> Lgc2nStatus {
    guard(|| {
        let d = &deref(dataset, "dataset")?.0.dataset;
        let shape = Lgc2nDatasetShape {
            items: d.n_items(),
            accounts: d.n_accounts(),
            train_sequences: d.indices(Split::Train).len(),
            test_sequences: d.indices(Split::Test).len(),
        };
        write(out, shape)
    })
}

/// # Safety
/// `dataset` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_dataset_free(dataset: *mut Lgc2nDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Builds a model from `config` and trains it on the training split.
///
/// # Safety
/// `config` and `dataset` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_model_train(
    config: *const Lgc2nConfig,
    dataset: *const Lgc2nDataset,
    out: *mut *mut Lgc2nModel,
) -> Lgc2nStatus {
    guard(|| {
        let cfg = deref(config, "config")?;
        let p = &deref(dataset, "dataset")?.0;
        if out.is_null() {
            return Err(Failure(Lgc2nStatus::NullPointer, "output pointer is null".into()));
        }
        let (model, _) = experiment::train(&cfg.0, p, |_| {})?;
        put(out, Lgc2nModel(model))
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_model_load(path: *const c_char, out: *mut *mut Lgc2nModel) -> Lgc2nStatus {
    guard(|| {
        let path = string(path, "path")?;
        put(out, Lgc2nModel(Model::load(path)?))
    })
}

/// # Safety
/// `model` must be a live model handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_model_save(model: *const Lgc2nModel, path: *const c_char) -> Lgc2nStatus {
    guard(|| {
        let m = deref(model, "model")?;
        m.0.save(string(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live model handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_model_parameter_count(model: *const Lgc2nModel, out: *mut usize) -> Lgc2nStatus {
    guard(|| write(out, deref(model, "model")?.0.parameter_count()))
}

/// Full-ranking metrics on the test split of `dataset`.
///
/// # Safety
/// `model` and `dataset` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_model_evaluate(
    model: *const Lgc2nModel,
    dataset: *const Lgc2nDataset,
    out: *mut Lgc2nMetrics,
) -> Lgc2nStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let p = &deref(dataset, "dataset")?.0;
        let r = m.evaluate(&p.graph, &p.dataset)?;
        let metrics = Lgc2nMetrics {
            recall_5: r.recall_5,
            recall_20: r.recall_20,
            mrr_5: r.mrr_5,
            mrr_20: r.mrr_20,
            evaluated: r.n_evaluated,
        };
        write(out, metrics)
    })
}

/// Next-item logits for sequence `index` of `dataset`, written to `scores`,
/// which must hold exactly one value per item. Higher ranks first.
///
/// # Safety
/// `model` and `dataset` must be live handles and `scores` must point to
/// `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_model_scores(
    model: *const Lgc2nModel,
    dataset: *const Lgc2nDataset,
    index: usize,
    scores: *mut f64,
    len: usize,
) -> Lgc2nStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let p = &deref(dataset, "dataset")?.0;
        if scores.is_null() {
            return Err(Failure(Lgc2nStatus::NullPointer, "scores is null".into()));
        }
        m.check_compatible(&p.dataset)?;
        if len != p.dataset.n_items() {
            return Err(Failure(
                Lgc2nStatus::BufferSize,
                format!("scores holds {len} values but there are {} items", p.dataset.n_items()),
            ));
        }
        if index >= p.dataset.sequences.len() {
            return Err(Error::Index {
                what: "sequence",
                index,
                len: p.dataset.sequences.len(),
            }
            .into());
        }
        let row = m.scores(&m.edges(&p.graph)?, &p.dataset, &[index])?;
        std::slice::from_raw_parts_mut(scores, len).copy_from_slice(row.data());
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lgc2n_model_free(model: *mut Lgc2nModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
