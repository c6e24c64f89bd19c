//! C ABI for the capsfuse library.
//!
//! Datasets and models are opaque handles created and destroyed through this
//! interface. Structured inputs and outputs travel as JSON strings, which
//! keeps the surface small and language-agnostic. Every fallible call
//! returns a [`CfStatus`]; on any non-`Ok` status, `cf_last_error` returns a
//! message for the calling thread that stays valid until its next call into
//! this library.
//!
//! The C header is generated by `build.rs` into `include/capsfuse.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use capsfuse::cli::{build_model, RunConfig};
use capsfuse::data::{gen_synthetic, MultimodalDataset, SynthSpec};
use capsfuse::error::Error;
use capsfuse::model_io::{read_model, write_model, StoredModel};
use capsfuse::train::{evaluate, predict_probs, split_for, train, MultimodalClassifier};

/// Status codes mirroring the CLI exit codes where they overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    /// IO, format, or other internal failure; see `cf_last_error`.
    Error = 1,
    InvalidConfig = 2,
    DimensionMismatch = 3,
    DegenerateData = 4,
    InvalidMatrix = 5,
    /// A required pointer argument was null.
    NullPointer = 6,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 7,
    /// A caller-provided buffer has the wrong length.
    BufferSize = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("NULs stripped");
    });
}

fn status_of(err: &Error) -> CfStatus {
    match err.exit_code() {
        2 => CfStatus::InvalidConfig,
        3 => CfStatus::DimensionMismatch,
        4 => CfStatus::DegenerateData,
        5 => CfStatus::InvalidMatrix,
        _ => CfStatus::Error,
    }
}

fn fail(err: Error) -> CfStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// An opaque multimodal dataset handle.
pub struct CfDataset {
    inner: MultimodalDataset,
}

/// An opaque trained-model handle (architecture, weights, train settings).
pub struct CfModel {
    inner: StoredModel,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, CfStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(CfStatus::NullPointer);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(CfStatus::InvalidUtf8)
        }
    }
}

fn out_arg<T>(out: *mut T, what: &str) -> Result<(), CfStatus> {
    if out.is_null() {
        set_error(&format!("{what} is null"));
        return Err(CfStatus::NullPointer);
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the last failure on this thread. The pointer stays valid
/// until this thread's next call into the library.
#[no_mangle]
pub extern "C" fn cf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Free a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by a `cf_*` function that
/// documents `cf_string_free`, and must not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn cf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Generate a synthetic dataset from a JSON generator spec (the same schema
/// the CLI writes as a sidecar: n, dims, mode, positive_rate, noise_sigma,
/// seed).
///
/// # Safety
/// `spec_json` must be a NUL-terminated string; `out` must be a valid
/// pointer. On `Ok`, `*out` owns a dataset that must be released with
/// `cf_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_synth(
    spec_json: *const c_char,
    out: *mut *mut CfDataset,
) -> CfStatus {
    let spec_json = match unsafe { cstr_arg(spec_json, "spec_json") } {
        Ok(s) => s,
        Err(status) => return status,
    };
    if let Err(status) = out_arg(out, "out") {
        return status;
    }
    let spec: SynthSpec = match serde_json::from_str(spec_json) {
        Ok(s) => s,
        Err(e) => {
            set_error(&format!("invalid generator spec: {e}"));
            return CfStatus::InvalidConfig;
        }
    };
    match gen_synthetic(&spec) {
        Ok(ds) => {
            unsafe { *out = Box::into_raw(Box::new(CfDataset { inner: ds })) };
            CfStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Read a dataset file (`.csv` for the CSV format, binary otherwise).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid. On `Ok`, `*out` must
/// be released with `cf_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_read(
    path: *const c_char,
    out: *mut *mut CfDataset,
) -> CfStatus {
    let path = match unsafe { cstr_arg(path, "path") } {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    if let Err(status) = out_arg(out, "out") {
        return status;
    }
    let result = if path.extension().is_some_and(|e| e == "csv") {
        MultimodalDataset::read_csv(&path)
    } else {
        MultimodalDataset::read_binary(&path)
    };
    match result {
        Ok(ds) => {
            unsafe { *out = Box::into_raw(Box::new(CfDataset { inner: ds })) };
            CfStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Write a dataset in the binary format.
///
/// # Safety
/// `ds` must be a live dataset handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_write(ds: *const CfDataset, path: *const c_char) -> CfStatus {
    if ds.is_null() {
        set_error("ds is null");
        return CfStatus::NullPointer;
    }
    let path = match unsafe { cstr_arg(path, "path") } {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    match unsafe { &(*ds).inner }.write_binary(&path) {
        Ok(()) => CfStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_n_samples(ds: *const CfDataset) -> u64 {
    if ds.is_null() {
        return 0;
    }
    unsafe { &(*ds).inner }.n_samples() as u64
}

/// # Safety
/// `ds` must be null or an owned dataset handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_free(ds: *mut CfDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Train a model on a dataset. `config_json` uses the CLI run-config schema
/// (`model` and `train` sections; `data` and `output` are ignored here), or
/// null for defaults.
///
/// # Safety
/// `ds` must be a live dataset handle, `config_json` NUL-terminated or null,
/// `out` valid. On `Ok`, `*out` must be released with `cf_model_free`.
#[no_mangle]
pub unsafe extern "C" fn cf_train(
    ds: *const CfDataset,
    config_json: *const c_char,
    out: *mut *mut CfModel,
) -> CfStatus {
    if ds.is_null() {
        set_error("ds is null");
        return CfStatus::NullPointer;
    }
    if let Err(status) = out_arg(out, "out") {
        return status;
    }
    let config: RunConfig = if config_json.is_null() {
        RunConfig::default()
    } else {
        let text = match unsafe { cstr_arg(config_json, "config_json") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("invalid config: {e}"));
                return CfStatus::InvalidConfig;
            }
        }
    };
    let dataset = unsafe { &(*ds).inner };
    let outcome = (|| {
        let mut model = build_model(dataset, &config.model, config.train.seed)?;
        train(&mut model, dataset, &config.train, config.eval.fpr_max)?;
        Ok::<_, Error>(StoredModel {
            model,
            train: config.train.clone(),
        })
    })();
    match outcome {
        Ok(stored) => {
            unsafe { *out = Box::into_raw(Box::new(CfModel { inner: stored })) };
            CfStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `path` NUL-terminated, `out` valid. On `Ok`, `*out` must be released with
/// `cf_model_free`.
#[no_mangle]
pub unsafe extern "C" fn cf_model_read(path: *const c_char, out: *mut *mut CfModel) -> CfStatus {
    let path = match unsafe { cstr_arg(path, "path") } {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    if let Err(status) = out_arg(out, "out") {
        return status;
    }
    match read_model(&path) {
        Ok(stored) => {
            unsafe { *out = Box::into_raw(Box::new(CfModel { inner: stored })) };
            CfStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must be a live model handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cf_model_write(model: *const CfModel, path: *const c_char) -> CfStatus {
    if model.is_null() {
        set_error("model is null");
        return CfStatus::NullPointer;
    }
    let path = match unsafe { cstr_arg(path, "path") } {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    let stored = unsafe { &(*model).inner };
    match write_model(&path, &stored.model, &stored.train) {
        Ok(()) => CfStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Strategy name of a model ("capsnet", "addition", ...). Free with
/// `cf_string_free`.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn cf_model_strategy(model: *const CfModel) -> *mut c_char {
    if model.is_null() {
        return ptr::null_mut();
    }
    let name = unsafe { &(*model).inner }.model.strategy_name();
    CString::new(name).map_or(ptr::null_mut(), CString::into_raw)
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn cf_model_n_classes(model: *const CfModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    unsafe { &(*model).inner }.model.n_classes() as u64
}

/// Predict class probabilities for every sample, row-major into `out_probs`,
/// which must hold exactly `n_samples * n_classes` values.
///
/// # Safety
/// `model` and `ds` must be live handles; `out_probs` must point to
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cf_model_predict(
    model: *const CfModel,
    ds: *const CfDataset,
    out_probs: *mut f64,
    out_len: usize,
) -> CfStatus {
    if model.is_null() || ds.is_null() || out_probs.is_null() {
        set_error("model, ds, and out_probs must be non-null");
        return CfStatus::NullPointer;
    }
    let stored = unsafe { &(*model).inner };
    let dataset = unsafe { &(*ds).inner };
    let expected = dataset.n_samples() * stored.model.n_classes();
    if out_len != expected {
        set_error(&format!(
            "out_len is {out_len}, expected n_samples * n_classes = {expected}"
        ));
        return CfStatus::BufferSize;
    }
    let indices: Vec<usize> = (0..dataset.n_samples()).collect();
    match predict_probs(&stored.model, dataset, &indices) {
        Ok(probs) => {
            let data = probs.data();
            unsafe { ptr::copy_nonoverlapping(data.as_ptr(), out_probs, data.len()) };
            CfStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Evaluate a model on a dataset, reconstructing the validation/test split
/// from the stored training settings. Writes a JSON metric report to
/// `*out_json`; free it with `cf_string_free`.
///
/// # Safety
/// `model` and `ds` must be live handles; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_model_evaluate_json(
    model: *const CfModel,
    ds: *const CfDataset,
    fpr_max: f64,
    out_json: *mut *mut c_char,
) -> CfStatus {
    if model.is_null() || ds.is_null() {
        set_error("model and ds must be non-null");
        return CfStatus::NullPointer;
    }
    if let Err(status) = out_arg(out_json, "out_json") {
        return status;
    }
    let stored = unsafe { &(*model).inner };
    let dataset = unsafe { &(*ds).inner };
    let outcome = (|| {
        let split = split_for(dataset, &stored.train);
        let report = evaluate(&stored.model, dataset, &split, fpr_max)?;
        Ok::<_, Error>(serde_json::to_string_pretty(&report)?)
    })();
    match outcome {
        Ok(json) => match CString::new(json) {
            Ok(s) => {
                unsafe { *out_json = s.into_raw() };
                CfStatus::Ok
            }
            Err(_) => {
                set_error("report contained a NUL byte");
                CfStatus::Error
            }
        },
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must be null or an owned model handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cf_model_free(model: *mut CfModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
