//! C ABI for the storyreel pipeline.
//!
//! Conventions:
//! - Every fallible function returns a [`StoryreelStatus`]; `OK` is 0.
//! - On failure, [`storyreel_last_error_message`] returns a thread-local,
//!   NUL-terminated description valid until the next failing call on the
//!   same thread.
//! - Structured results come back as JSON in newly allocated C strings that
//!   the caller must release with [`storyreel_string_free`].
//! - The store is an opaque handle created by [`storyreel_store_open`] and
//!   released by [`storyreel_store_free`]. Handles are immutable and may be
//!   shared across threads.
//!
//! The header `include/storyreel.h` is generated by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use storyreel::grounding::GroundingError;
use storyreel::metrics::MetricsError;
use storyreel::pipeline::{self, PipelineError, StoryboardConfig};
use storyreel::store::{FeatureStore, StoreError};

/// Result codes for every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoryreelStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Malformed input: bad JSON, bad dimensions, invalid configuration.
    InvalidArgument = 3,
    /// A referenced entity (video id, clip span, file) does not exist.
    NotFound = 4,
    /// An ingest conflicted with existing content.
    Conflict = 5,
    /// Filesystem or encoding failure.
    Io = 6,
    /// A numeric failure (degenerate input, non-finite value).
    Numeric = 7,
    /// A panic or other internal error.
    Internal = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn storyreel_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Crate version as a static NUL-terminated string; never free it.
#[no_mangle]
pub extern "C" fn storyreel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be a pointer previously returned by a `_json` output parameter
/// of this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn storyreel_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque handle to a loaded feature store.
pub struct StoryreelStore {
    inner: FeatureStore,
}

fn store_status(err: &StoreError) -> StoryreelStatus {
    match err {
        StoreError::Io { .. } | StoreError::Imaging(_) => StoryreelStatus::Io,
        StoreError::UnknownVideo(_) => StoryreelStatus::NotFound,
        StoreError::Conflict(_) => StoryreelStatus::Conflict,
        StoreError::SpanOutOfRange { .. }
        | StoreError::DimensionMismatch { .. }
        | StoreError::ManifestParse { .. }
        | StoreError::SchemaVersion { .. }
        | StoreError::FeatureParse { .. }
        | StoreError::Sidecar { .. }
        | StoreError::InvalidRecord { .. } => StoryreelStatus::InvalidArgument,
    }
}

fn grounding_status(err: &GroundingError) -> StoryreelStatus {
    match err {
        GroundingError::EmptyQuery
        | GroundingError::Dimension { .. }
        | GroundingError::InvalidTopK
        | GroundingError::EmbeddingFile { .. }
        | GroundingError::Archive(_) => StoryreelStatus::InvalidArgument,
        GroundingError::UnknownText(_) | GroundingError::EmptyStore => StoryreelStatus::NotFound,
        GroundingError::Degenerate(_) => StoryreelStatus::Numeric,
    }
}

fn pipeline_status(err: &PipelineError) -> StoryreelStatus {
    match err {
        PipelineError::Config(_) => StoryreelStatus::InvalidArgument,
        PipelineError::NoMatch(_) => StoryreelStatus::NotFound,
        PipelineError::Io { .. } | PipelineError::Imaging(_) => StoryreelStatus::Io,
        PipelineError::Store(e) => store_status(e),
        PipelineError::Grounding(e) => grounding_status(e),
        PipelineError::Segment { .. } | PipelineError::Transition { .. } => {
            StoryreelStatus::Numeric
        }
        PipelineError::Diffusion(_) | PipelineError::Personalize(_) => StoryreelStatus::Numeric,
    }
}

fn metrics_status(err: &MetricsError) -> StoryreelStatus {
    match err {
        MetricsError::NotEnoughFrames(_) | MetricsError::ShapeMismatch { .. } => {
            StoryreelStatus::InvalidArgument
        }
        MetricsError::Imaging(_) => StoryreelStatus::Io,
    }
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, StoryreelStatus> {
    str_arg(ptr).map(PathBuf::from)
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, StoryreelStatus> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(StoryreelStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        StoryreelStatus::InvalidUtf8
    })
}

fn json_out(value: &impl serde::Serialize, out: *mut *mut c_char) -> StoryreelStatus {
    let json = match serde_json::to_string_pretty(value) {
        Ok(j) => j,
        Err(e) => {
            set_error(&format!("serialization failed: {e}"));
            return StoryreelStatus::Internal;
        }
    };
    match CString::new(json) {
        Ok(cstring) => {
            unsafe { *out = cstring.into_raw() };
            StoryreelStatus::Ok
        }
        Err(_) => {
            set_error("serialized JSON contained a NUL byte");
            StoryreelStatus::Internal
        }
    }
}

fn guarded(f: impl FnOnce() -> StoryreelStatus) -> StoryreelStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            StoryreelStatus::Internal
        }
    }
}

/// Open the feature store at `path` and return a handle through `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn storyreel_store_open(
    path: *const c_char,
    out: *mut *mut StoryreelStore,
) -> StoryreelStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return StoryreelStatus::NullArgument;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match FeatureStore::open(&path) {
            Ok(store) => {
                *out = Box::into_raw(Box::new(StoryreelStore { inner: store }));
                StoryreelStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                store_status(&e)
            }
        }
    })
}

/// Release a store handle. Null is a no-op.
///
/// # Safety
/// `store` must have been returned by [`storyreel_store_open`] and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn storyreel_store_free(store: *mut StoryreelStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of videos in the store.
///
/// # Safety
/// `store` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn storyreel_store_video_count(
    store: *const StoryreelStore,
    out: *mut usize,
) -> StoryreelStatus {
    guarded(|| {
        if store.is_null() || out.is_null() {
            set_error("null pointer argument");
            return StoryreelStatus::NullArgument;
        }
        *out = (*store).inner.len();
        StoryreelStatus::Ok
    })
}

/// Feature dimension of the store; 0 when the store is empty.
///
/// # Safety
/// `store` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn storyreel_store_feature_dim(
    store: *const StoryreelStore,
    out: *mut usize,
) -> StoryreelStatus {
    guarded(|| {
        if store.is_null() || out.is_null() {
            set_error("null pointer argument");
            return StoryreelStatus::NullArgument;
        }
        *out = (*store).inner.feature_dim().unwrap_or(0);
        StoryreelStatus::Ok
    })
}

/// Retrieve the top-k moments per query.
///
/// `queries_json` is a JSON array of query strings. `joint_dim` selects the
/// joint embedding dimension (pass 0 for the default). The ranked results
/// are returned as JSON through `out_json` (caller frees).
///
/// # Safety
/// Pointer arguments must be valid; `out_json` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn storyreel_ground_json(
    store: *const StoryreelStore,
    queries_json: *const c_char,
    top_k: usize,
    joint_dim: usize,
    out_json: *mut *mut c_char,
) -> StoryreelStatus {
    guarded(|| {
        if store.is_null() || out_json.is_null() {
            set_error("null pointer argument");
            return StoryreelStatus::NullArgument;
        }
        let queries_json = match str_arg(queries_json) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let queries: Vec<String> = match serde_json::from_str(queries_json) {
            Ok(q) => q,
            Err(e) => {
                set_error(&format!("queries must be a JSON array of strings: {e}"));
                return StoryreelStatus::InvalidArgument;
            }
        };
        let store = &(*store).inner;
        let joint_dim =
            if joint_dim == 0 { storyreel::grounding::DEFAULT_JOINT_DIM } else { joint_dim };
        let feature_dim = match store.feature_dim() {
            Some(d) => d,
            None => {
                set_error("store is empty, nothing to retrieve");
                return StoryreelStatus::NotFound;
            }
        };
        let weights = storyreel::grounding::GroundingWeights::default_for(feature_dim, joint_dim);
        let encoder = pipeline::default_query_encoder(joint_dim);
        match storyreel::grounding::retrieve(&queries, store, &weights, &encoder, top_k) {
            Ok(results) => json_out(&results, out_json),
            Err(e) => {
                set_error(&e.to_string());
                grounding_status(&e)
            }
        }
    })
}

/// Run the full pipeline from a storyboard config file, writing frames and
/// the manifest into `out_dir`. When `out_manifest_json` is non-null it
/// receives the manifest as JSON (caller frees).
///
/// # Safety
/// `config_path` and `out_dir` must be valid NUL-terminated strings;
/// `out_manifest_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn storyreel_generate(
    config_path: *const c_char,
    out_dir: *const c_char,
    out_manifest_json: *mut *mut c_char,
) -> StoryreelStatus {
    guarded(|| {
        let config_path = match path_arg(config_path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let out_dir = match path_arg(out_dir) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let bytes = match std::fs::read(&config_path) {
            Ok(b) => b,
            Err(e) => {
                set_error(&format!("reading {}: {e}", config_path.display()));
                return StoryreelStatus::Io;
            }
        };
        let config: StoryboardConfig = match serde_json::from_slice(&bytes) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("parsing {}: {e}", config_path.display()));
                return StoryreelStatus::InvalidArgument;
            }
        };
        match pipeline::generate(&config, &out_dir) {
            Ok(manifest) => {
                if out_manifest_json.is_null() {
                    StoryreelStatus::Ok
                } else {
                    json_out(&manifest, out_manifest_json)
                }
            }
            Err(e) => {
                set_error(&e.to_string());
                pipeline_status(&e)
            }
        }
    })
}

/// Temporal flickering score of a frame directory, in [0, 100].
///
/// # Safety
/// `frames_dir` must be a valid NUL-terminated string and `out_score` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn storyreel_temporal_flickering(
    frames_dir: *const c_char,
    out_score: *mut f64,
) -> StoryreelStatus {
    guarded(|| {
        if out_score.is_null() {
            set_error("null output pointer");
            return StoryreelStatus::NullArgument;
        }
        let dir = match path_arg(frames_dir) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let frames = match storyreel::imaging::load_frames_dir(&dir) {
            Ok(f) => f,
            Err(e) => {
                set_error(&e.to_string());
                return StoryreelStatus::Io;
            }
        };
        match storyreel::metrics::temporal_flickering(&frames) {
            Ok(score) => {
                *out_score = score;
                StoryreelStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                metrics_status(&e)
            }
        }
    })
}

/// Score a frame directory with the built-in metric plus plugin
/// executables. `plugins_json` is an optional JSON array of plugin paths
/// (null for none). The metric table is returned as JSON via `out_json`
/// (caller frees).
///
/// # Safety
/// Pointer arguments must be valid; `plugins_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn storyreel_metrics_report_json(
    frames_dir: *const c_char,
    plugins_json: *const c_char,
    out_json: *mut *mut c_char,
) -> StoryreelStatus {
    guarded(|| {
        if out_json.is_null() {
            set_error("null output pointer");
            return StoryreelStatus::NullArgument;
        }
        let dir = match path_arg(frames_dir) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let plugins: Vec<PathBuf> = if plugins_json.is_null() {
            Vec::new()
        } else {
            let text = match str_arg(plugins_json) {
                Ok(s) => s,
                Err(status) => return status,
            };
            match serde_json::from_str::<Vec<String>>(text) {
                Ok(paths) => paths.into_iter().map(PathBuf::from).collect(),
                Err(e) => {
                    set_error(&format!("plugins must be a JSON array of paths: {e}"));
                    return StoryreelStatus::InvalidArgument;
                }
            }
        };
        match storyreel::metrics::metrics_report(Path::new(&dir), &plugins) {
            Ok(entries) => json_out(&entries, out_json),
            Err(e) => {
                set_error(&e.to_string());
                metrics_status(&e)
            }
        }
    })
}
