//! C ABI over the streaming evaluation harness.
//!
//! Handles are opaque pointers owned by this library: create them through
//! the `sev_*` constructors, free them with the matching `*_free`. Every
//! fallible call returns a [`sev_status`]; on failure the thread-local
//! message from [`sev_last_error`] describes what went wrong. Strings
//! returned through `char **` out-parameters are owned by the caller and
//! must be released with [`sev_string_free`].
//!
//! The generated header lives at `include/streameval.h`.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use streameval::config::ExperimentConfig;
use streameval::dataset::{load_embeddings, synth_gaussian, Dataset, GaussianMixtureSpec};
use streameval::runner::run_experiment_in_memory;
use streameval::sequence::{build_sequence, SequenceSpec, StreamTask};
use streameval::Error;

/// Result of every fallible call in this API.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum sev_status {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration or specification was rejected.
    ConfigError = 3,
    /// The operation failed while running.
    RuntimeError = 4,
}

/// Opaque dataset handle.
pub struct sev_dataset {
    _private: [u8; 0],
}

/// Opaque stream-task handle.
pub struct sev_stream_task {
    _private: [u8; 0],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<Vec<u8>>) {
    let text = CString::new(message).unwrap_or_else(|_| CString::new("invalid error").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn status_of(err: &Error) -> sev_status {
    if err.is_config_error() {
        sev_status::ConfigError
    } else {
        sev_status::RuntimeError
    }
}

fn fail(err: Error) -> sev_status {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Guards an FFI body against panics; a panic reports `RuntimeError`.
fn guarded(body: impl FnOnce() -> sev_status) -> sev_status {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            sev_status::RuntimeError
        }
    }
}

unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, sev_status> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(sev_status::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        sev_status::InvalidUtf8
    })
}

fn dataset_into_raw(dataset: Dataset) -> *mut sev_dataset {
    Box::into_raw(Box::new(dataset)) as *mut sev_dataset
}

unsafe fn dataset_ref<'a>(handle: *const sev_dataset) -> Option<&'a Dataset> {
    (handle as *const Dataset).as_ref()
}

fn task_into_raw(task: StreamTask) -> *mut sev_stream_task {
    Box::into_raw(Box::new(task)) as *mut sev_stream_task
}

unsafe fn task_ref<'a>(handle: *const sev_stream_task) -> Option<&'a StreamTask> {
    (handle as *const StreamTask).as_ref()
}

fn emit_string(text: String, out: *mut *mut c_char) -> sev_status {
    match CString::new(text) {
        Ok(cstring) => {
            unsafe { *out = cstring.into_raw() };
            sev_status::Ok
        }
        Err(_) => {
            set_error("output contained an interior NUL byte");
            sev_status::RuntimeError
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sev_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread, or null if none occurred.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sev_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |text| text.as_ptr())
    })
}

/// Frees a string previously returned through a `char **` out-parameter.
///
/// # Safety
/// `text` must be a pointer obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sev_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

/// Synthesizes a Gaussian-mixture dataset from a JSON spec
/// (`{"num_classes": .., "dim": .., "cluster_separation": ..,
/// "samples_per_class": .., "pretrain_fraction": .., "seed": ..}`).
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sev_dataset_synth(
    spec_json: *const c_char,
    out: *mut *mut sev_dataset,
) -> sev_status {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return sev_status::NullArgument;
        }
        let text = match utf8_arg(spec_json) {
            Ok(text) => text,
            Err(status) => return status,
        };
        let spec: GaussianMixtureSpec = match serde_json::from_str(text) {
            Ok(spec) => spec,
            Err(e) => {
                set_error(format!("bad mixture spec: {e}"));
                return sev_status::ConfigError;
            }
        };
        match synth_gaussian(&spec) {
            Ok(dataset) => {
                *out = dataset_into_raw(dataset);
                sev_status::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a dataset from a binary embedding file and its JSON role manifest.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sev_dataset_load(
    embeddings_path: *const c_char,
    manifest_path: *const c_char,
    out: *mut *mut sev_dataset,
) -> sev_status {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return sev_status::NullArgument;
        }
        let embeddings = match utf8_arg(embeddings_path) {
            Ok(text) => text,
            Err(status) => return status,
        };
        let manifest = match utf8_arg(manifest_path) {
            Ok(text) => text,
            Err(status) => return status,
        };
        match load_embeddings(Path::new(embeddings), Path::new(manifest)) {
            Ok(dataset) => {
                *out = dataset_into_raw(dataset);
                sev_status::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sev_dataset_len(dataset: *const sev_dataset) -> u64 {
    dataset_ref(dataset).map_or(0, |ds| ds.len() as u64)
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sev_dataset_dim(dataset: *const sev_dataset) -> u32 {
    dataset_ref(dataset).map_or(0, |ds| ds.dim() as u32)
}

/// Releases a dataset handle.
///
/// # Safety
/// `dataset` must be null or a live handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sev_dataset_free(dataset: *mut sev_dataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset as *mut Dataset));
    }
}

/// Builds a heavy-tailed stream task over the dataset from a JSON spec
/// (`{"num_classes": .., "zipf_s": .., "total_samples": ..,
/// "head_threshold": .., "seed": ..}`).
///
/// # Safety
/// `dataset` must be a live handle, `spec_json` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sev_sequence_build(
    dataset: *const sev_dataset,
    spec_json: *const c_char,
    out: *mut *mut sev_stream_task,
) -> sev_status {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return sev_status::NullArgument;
        }
        let Some(dataset) = dataset_ref(dataset) else {
            set_error("null dataset handle");
            return sev_status::NullArgument;
        };
        let text = match utf8_arg(spec_json) {
            Ok(text) => text,
            Err(status) => return status,
        };
        let spec: SequenceSpec = match serde_json::from_str(text) {
            Ok(spec) => spec,
            Err(e) => {
                set_error(format!("bad sequence spec: {e}"));
                return sev_status::ConfigError;
            }
        };
        match build_sequence(dataset, &spec) {
            Ok(task) => {
                *out = task_into_raw(task);
                sev_status::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Stream length, or 0 for a null handle.
///
/// # Safety
/// `task` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sev_sequence_len(task: *const sev_stream_task) -> u64 {
    task_ref(task).map_or(0, |t| t.len() as u64)
}

/// Serializes the stream task (order, class counts, buckets) to JSON.
///
/// # Safety
/// `task` must be a live handle and `out_json` a valid pointer; the returned
/// string must be freed with [`sev_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sev_sequence_to_json(
    task: *const sev_stream_task,
    out_json: *mut *mut c_char,
) -> sev_status {
    guarded(|| {
        if out_json.is_null() {
            set_error("null out pointer");
            return sev_status::NullArgument;
        }
        let Some(task) = task_ref(task) else {
            set_error("null stream task handle");
            return sev_status::NullArgument;
        };
        match serde_json::to_string(task) {
            Ok(text) => emit_string(text, out_json),
            Err(e) => fail(e.into()),
        }
    })
}

/// Releases a stream-task handle.
///
/// # Safety
/// `task` must be null or a live handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sev_sequence_free(task: *mut sev_stream_task) {
    if !task.is_null() {
        drop(Box::from_raw(task as *mut StreamTask));
    }
}

/// Runs a whole experiment (pretraining plus one streamed run per seed)
/// from an experiment-config JSON and returns the run summaries as a JSON
/// array.
///
/// # Safety
/// `config_json` must be NUL-terminated and `out_summaries_json` a valid
/// pointer; the returned string must be freed with [`sev_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sev_run_experiment(
    config_json: *const c_char,
    out_summaries_json: *mut *mut c_char,
) -> sev_status {
    guarded(|| {
        if out_summaries_json.is_null() {
            set_error("null out pointer");
            return sev_status::NullArgument;
        }
        let text = match utf8_arg(config_json) {
            Ok(text) => text,
            Err(status) => return status,
        };
        let config = match ExperimentConfig::from_json(text) {
            Ok(config) => config,
            Err(e) => return fail(e),
        };
        match run_experiment_in_memory(&config) {
            Ok(summaries) => match serde_json::to_string(&summaries) {
                Ok(json) => emit_string(json, out_summaries_json),
                Err(e) => fail(e.into()),
            },
            Err(e) => fail(e),
        }
    })
}
