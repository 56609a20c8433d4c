//! C ABI over the adaptation lab: Gaussian feature statistics, the
//! symmetric divergence, and an end-to-end pipeline runner driven by a
//! JSON experiment config.
//!
//! Conventions: every fallible call returns a [`TtaStatus`]; outputs
//! come back through out-pointers that are written only on `Ok`. A
//! non-`Ok` status leaves a message readable via [`tta_last_error`]
//! (thread-local, valid until the next call on that thread). Strings
//! returned through out-pointers are heap C strings the caller must
//! release with [`tta_string_free`]; handles with [`tta_stats_free`].
//! Matrices pass as row-major buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use tta_core::align::{sym_kl, AlignError};
use tta_core::bench::generate_dataset;
use tta_core::cli::build_stream;
use tta_core::config::parse_config;
use tta_core::detector::save_checkpoint;
use tta_core::engine::{
    fit_source_stats, run_stream, AdaptMode, EngineError, TtaConfig,
};
use tta_core::pretrain::{pretrain, source_splits};
use tta_core::stats::{
    fit_source, regularize_cov, update_streaming, GaussianStats, StatsError, StreamConfig,
};

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Arguments were malformed: bad JSON, bad shape, bad number.
    InvalidArgument = 2,
    /// Dimensions of the operands disagree.
    DimMismatch = 3,
    /// A covariance is not positive definite.
    NotPositiveDefinite = 4,
    /// Filesystem trouble while running the pipeline.
    Io = 5,
    /// Unexpected internal failure (including caught panics).
    Internal = 6,
}

/// Opaque handle to a mean-and-covariance summary of a feature
/// distribution.
pub struct TtaStats(GaussianStats);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn fail(status: TtaStatus, msg: impl Into<Vec<u8>>) -> TtaStatus {
    let msg = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

fn stats_status(e: &StatsError) -> TtaStatus {
    match e {
        StatsError::DimMismatch { .. } => TtaStatus::DimMismatch,
        StatsError::NotPositiveDefinite => TtaStatus::NotPositiveDefinite,
        _ => TtaStatus::InvalidArgument,
    }
}

fn align_status(e: &AlignError) -> TtaStatus {
    match e {
        AlignError::DimMismatch { .. } => TtaStatus::DimMismatch,
        AlignError::NotPositiveDefinite => TtaStatus::NotPositiveDefinite,
        AlignError::BatchMismatch { .. } => TtaStatus::InvalidArgument,
    }
}

fn engine_status(e: &EngineError) -> TtaStatus {
    match e {
        EngineError::Stats(s) => stats_status(s),
        EngineError::Align(a) => align_status(a),
        EngineError::Checkpoint(_) | EngineError::Io { .. } => TtaStatus::Io,
        EngineError::Config(_) => TtaStatus::InvalidArgument,
        EngineError::Detector(_) => TtaStatus::Internal,
    }
}

/// Run `body` with panics fenced off from the foreign caller.
fn guarded(body: impl FnOnce() -> TtaStatus) -> TtaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(TtaStatus::Internal, "internal panic"),
    }
}

unsafe fn write_out<T>(out: *mut T, value: T) {
    *out = value;
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() && len > 0 {
        None
    } else if len == 0 {
        Some(&[])
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s)
        .unwrap_or_else(|_| CString::new("").unwrap())
        .into_raw()
}

/// Library version as a static NUL-terminated string; do not free.
#[no_mangle]
pub extern "C" fn tta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. Valid
/// until the next call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn tta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string previously returned through an out-pointer.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn tta_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Release a statistics handle.
///
/// # Safety
/// `stats` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn tta_stats_free(stats: *mut TtaStats) {
    if !stats.is_null() {
        drop(Box::from_raw(stats));
    }
}

/// Build statistics from an explicit mean (length `dim`) and row-major
/// covariance (`dim * dim`).
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tta_stats_new(
    mean: *const f64,
    cov: *const f64,
    dim: usize,
    out: *mut *mut TtaStats,
) -> TtaStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TtaStatus::NullPointer, "out is null");
        }
        let (Some(mean), Some(cov)) = (slice_arg(mean, dim), slice_arg(cov, dim * dim)) else {
            return fail(TtaStatus::NullPointer, "mean or cov is null");
        };
        if dim == 0 {
            return fail(TtaStatus::InvalidArgument, "dim must be positive");
        }
        let stats = GaussianStats::new(
            DVector::from_column_slice(mean),
            DMatrix::from_row_slice(dim, dim, cov),
        );
        match stats {
            Ok(s) => {
                write_out(out, Box::into_raw(Box::new(TtaStats(s))));
                TtaStatus::Ok
            }
            Err(e) => fail(stats_status(&e), e.to_string()),
        }
    })
}

/// Parse statistics from their JSON representation.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tta_stats_from_json(
    json: *const c_char,
    out: *mut *mut TtaStats,
) -> TtaStatus {
    guarded(|| {
        if json.is_null() || out.is_null() {
            return fail(TtaStatus::NullPointer, "json or out is null");
        }
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(_) => return fail(TtaStatus::InvalidArgument, "json is not UTF-8"),
        };
        match GaussianStats::from_json(text) {
            Ok(s) => {
                write_out(out, Box::into_raw(Box::new(TtaStats(s))));
                TtaStatus::Ok
            }
            Err(e) => fail(stats_status(&e), e.to_string()),
        }
    })
}

/// Serialize statistics to JSON; the result goes through
/// [`tta_string_free`].
///
/// # Safety
/// `stats` must be a live handle; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tta_stats_to_json(
    stats: *const TtaStats,
    out_json: *mut *mut c_char,
) -> TtaStatus {
    guarded(|| {
        if stats.is_null() || out_json.is_null() {
            return fail(TtaStatus::NullPointer, "stats or out_json is null");
        }
        write_out(out_json, to_c_string((*stats).0.to_json()));
        TtaStatus::Ok
    })
}

/// Dimension of the summarized features; 0 for a null handle.
///
/// # Safety
/// `stats` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tta_stats_dim(stats: *const TtaStats) -> usize {
    if stats.is_null() {
        0
    } else {
        (*stats).0.dim()
    }
}

/// Copy the mean into `out_mean` (length `dim`, from [`tta_stats_dim`]).
///
/// # Safety
/// `stats` must be a live handle; `out_mean` valid for `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn tta_stats_mean(
    stats: *const TtaStats,
    out_mean: *mut f64,
) -> TtaStatus {
    guarded(|| {
        if stats.is_null() || out_mean.is_null() {
            return fail(TtaStatus::NullPointer, "stats or out_mean is null");
        }
        let mean = (*stats).0.mean();
        std::ptr::copy_nonoverlapping(mean.as_slice().as_ptr(), out_mean, mean.len());
        TtaStatus::Ok
    })
}

/// Fit statistics to `n` samples of dimension `dim` (row-major
/// `n * dim` buffer) with population (1/N) covariance normalization.
///
/// # Safety
/// `data` must hold `n * dim` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tta_stats_fit(
    data: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut TtaStats,
) -> TtaStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TtaStatus::NullPointer, "out is null");
        }
        let Some(data) = slice_arg(data, n * dim) else {
            return fail(TtaStatus::NullPointer, "data is null");
        };
        if dim == 0 {
            return fail(TtaStatus::InvalidArgument, "dim must be positive");
        }
        let samples: Vec<DVector<f64>> =
            data.chunks(dim).map(DVector::from_column_slice).collect();
        match fit_source(&samples) {
            Ok(s) => {
                write_out(out, Box::into_raw(Box::new(TtaStats(s))));
                TtaStatus::Ok
            }
            Err(e) => fail(stats_status(&e), e.to_string()),
        }
    })
}

/// One streaming update folding a batch (row-major `n * dim`) into the
/// running statistics at rate `gamma` per sample; returns the
/// post-update statistics as a new handle.
///
/// # Safety
/// Pointer arguments as in [`tta_stats_fit`]; `stats` a live handle.
#[no_mangle]
pub unsafe extern "C" fn tta_stats_update_streaming(
    stats: *const TtaStats,
    batch: *const f64,
    n: usize,
    dim: usize,
    gamma: f64,
    out: *mut *mut TtaStats,
) -> TtaStatus {
    guarded(|| {
        if stats.is_null() || out.is_null() {
            return fail(TtaStatus::NullPointer, "stats or out is null");
        }
        let Some(batch) = slice_arg(batch, n * dim) else {
            return fail(TtaStatus::NullPointer, "batch is null");
        };
        if dim != (*stats).0.dim() {
            return fail(
                TtaStatus::DimMismatch,
                format!("batch dim {} vs stats dim {}", dim, (*stats).0.dim()),
            );
        }
        let samples: Vec<DVector<f64>> =
            batch.chunks(dim.max(1)).map(DVector::from_column_slice).collect();
        match update_streaming(&(*stats).0, &samples, &StreamConfig { gamma }) {
            Ok(s) => {
                write_out(out, Box::into_raw(Box::new(TtaStats(s))));
                TtaStatus::Ok
            }
            Err(e) => fail(stats_status(&e), e.to_string()),
        }
    })
}

/// Add the standard diagonal jitter to the covariance, returning a new
/// handle safe for Cholesky-based operations.
///
/// # Safety
/// `stats` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tta_stats_regularize(
    stats: *const TtaStats,
    out: *mut *mut TtaStats,
) -> TtaStatus {
    guarded(|| {
        if stats.is_null() || out.is_null() {
            return fail(TtaStatus::NullPointer, "stats or out is null");
        }
        let inner = &(*stats).0;
        let cov = match regularize_cov(inner.cov()) {
            Ok(c) => c,
            Err(e) => return fail(stats_status(&e), e.to_string()),
        };
        match GaussianStats::new(inner.mean().clone(), cov) {
            Ok(s) => {
                write_out(out, Box::into_raw(Box::new(TtaStats(s))));
                TtaStatus::Ok
            }
            Err(e) => fail(stats_status(&e), e.to_string()),
        }
    })
}

/// Symmetric KL divergence between two Gaussian summaries.
///
/// # Safety
/// `p` and `q` must be live handles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tta_sym_kl(
    p: *const TtaStats,
    q: *const TtaStats,
    out: *mut f64,
) -> TtaStatus {
    guarded(|| {
        if p.is_null() || q.is_null() || out.is_null() {
            return fail(TtaStatus::NullPointer, "p, q, or out is null");
        }
        match sym_kl(&(*p).0, &(*q).0) {
            Ok(v) => {
                write_out(out, v);
                TtaStatus::Ok
            }
            Err(e) => fail(align_status(&e), e.to_string()),
        }
    })
}

fn pipeline(text: &str) -> Result<String, (TtaStatus, String)> {
    let cfg = parse_config(text).map_err(|e| (TtaStatus::InvalidArgument, e.to_string()))?;
    let out_dir = PathBuf::from(&cfg.output_dir);

    let (params, report) = pretrain(&cfg.model, &cfg.scene, &cfg.pretrain, cfg.seed)
        .map_err(|e| (TtaStatus::Internal, e.to_string()))?;
    save_checkpoint(&out_dir.join("checkpoint"), &cfg.model, &params)
        .map_err(|e| (TtaStatus::Io, e.to_string()))?;

    let (train_spec, _) = source_splits(&cfg.scene);
    let scenes: Vec<_> = generate_dataset(&train_spec, cfg.pretrain.train_scenes)
        .map_err(|e| (TtaStatus::Internal, e.to_string()))?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let (global, fg) = fit_source_stats(&cfg.model, &params, &scenes)
        .map_err(|e| (engine_status(&e), e.to_string()))?;
    let source = tta_core::engine::SourceArtifacts {
        params,
        global_stats: global,
        fg_stats: fg,
    };

    let mut runs = Vec::new();
    for corruption in &cfg.stream.corruptions {
        let stream =
            build_stream(&cfg, corruption).map_err(|e| (TtaStatus::Internal, e.message()))?;
        let run = |tta: &TtaConfig| {
            run_stream(&cfg.model, &source, &stream, tta, &cfg.augment, cfg.eval.iou, cfg.seed)
                .map(|(log, _)| log.final_map())
                .map_err(|e| (engine_status(&e), e.to_string()))
        };
        let direct = run(&TtaConfig { flags: AdaptMode::Direct.flags(), ..cfg.tta.clone() })?;
        let adapted = run(&cfg.tta)?;
        runs.push(serde_json::json!({
            "corruption": corruption.label(),
            "direct_map": direct,
            "adapted_map": adapted,
        }));
    }
    let summary = serde_json::json!({
        "pretrain_map": report.final_val.map,
        "epochs_run": report.epochs_run,
        "runs": runs,
    });
    Ok(summary.to_string())
}

/// Run the whole experiment described by a JSON config — pretrain, fit
/// source statistics, then adapt over each configured corruption — and
/// return a JSON summary. Artifacts land under the config's
/// `output_dir`. The caller controls cost entirely through the config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out_summary_json`
/// must be valid. Free the result with [`tta_string_free`].
#[no_mangle]
pub unsafe extern "C" fn tta_pipeline_run(
    config_json: *const c_char,
    out_summary_json: *mut *mut c_char,
) -> TtaStatus {
    guarded(|| {
        if config_json.is_null() || out_summary_json.is_null() {
            return fail(TtaStatus::NullPointer, "config_json or out_summary_json is null");
        }
        let text = match CStr::from_ptr(config_json).to_str() {
            Ok(t) => t,
            Err(_) => return fail(TtaStatus::InvalidArgument, "config is not UTF-8"),
        };
        match pipeline(text) {
            Ok(summary) => {
                write_out(out_summary_json, to_c_string(summary));
                TtaStatus::Ok
            }
            Err((status, msg)) => fail(status, msg),
        }
    })
}
