//! C ABI over `loraplace`.
//!
//! Every fallible function returns an [`LpStatus`]; on failure the message is
//! available from [`lp_last_error`] on the same thread. Results and models are
//! opaque handles released with their `_free` function. Strings returned to
//! the caller are released with [`lp_string_free`].
//!
//! The C declarations live in `include/loraplace.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use loraplace::config::ServerConfig;
use loraplace::engine::{run_simulation, SimMode, SimulationResult};
use loraplace::placement::{encode_workload, sweep_optimal, Condition, SweepOptions, FEATURE_NAMES};
use loraplace::predictor::PlacementModel;
use loraplace::workload::WorkloadSpec;
use loraplace::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Validation = 3,
    Config = 4,
    Domain = 5,
    Fit = 6,
    Simulation = 7,
    Invariant = 8,
    Training = 9,
    Io = 10,
    Json = 11,
    Csv = 12,
    Panic = 13,
}

impl From<&Error> for LpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Validation { .. } => LpStatus::Validation,
            Error::Config(_) => LpStatus::Config,
            Error::Domain(_) => LpStatus::Domain,
            Error::Fit(_) => LpStatus::Fit,
            Error::Simulation(_) => LpStatus::Simulation,
            Error::Invariant(_) => LpStatus::Invariant,
            Error::Training(_) => LpStatus::Training,
            Error::Io { .. } => LpStatus::Io,
            Error::Json(_) => LpStatus::Json,
            Error::Csv(_) => LpStatus::Csv,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpMode {
    Full = 0,
    Mean = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LpMetrics {
    pub throughput_tok_s: f64,
    pub itl_mean_s: f64,
    pub itl_p50_s: f64,
    pub itl_p99_s: f64,
    pub ttft_mean_s: f64,
    pub ttft_p50_s: f64,
    pub ttft_p99_s: f64,
    pub ideal_throughput_tok_s: f64,
    pub starved: bool,
    pub degenerate: bool,
    pub finished_count: u64,
    pub rejected_count: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LpPlacement {
    pub max_throughput_tok_s: f64,
    pub n_star: u64,
    pub g_star: u64,
}

/// Opaque simulation result.
pub struct LpResult(SimulationResult);

/// Opaque trained placement model.
pub struct LpModel(PlacementModel);

pub const LP_FEATURE_COUNT: usize = 16;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Status(LpStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(LpStatus::NullArgument, format!("`{what}` is null"))
}

/// Runs `f`, catching panics and recording the error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            LpStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(&e.to_string());
            LpStatus::from(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_last_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            LpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::Status(LpStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn config_arg(p: *const c_char) -> Result<ServerConfig, Failure> {
    if p.is_null() {
        return Ok(ServerConfig::h100_synthetic(1));
    }
    Ok(ServerConfig::from_json_str(unsafe { str_arg(p, "config_json") }?)?)
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure::Status(LpStatus::InvalidUtf8, "output holds a NUL byte".into()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn lp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn lp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn lp_feature_count() -> usize {
    LP_FEATURE_COUNT
}

/// Name of feature `i` (static string), or null when out of range.
#[no_mangle]
pub extern "C" fn lp_feature_name(i: usize) -> *const c_char {
    static NAMES: [&str; 16] = [
        "rate_max\0", "rate_min\0", "rate_mean\0", "rate_std\0",
        "rank_max\0", "rank_min\0", "rank_mean\0", "rank_std\0",
        "input_len_max\0", "input_len_min\0", "input_len_mean\0", "input_len_std\0",
        "output_len_max\0", "output_len_min\0", "output_len_mean\0", "output_len_std\0",
    ];
    debug_assert!(NAMES.iter().zip(FEATURE_NAMES).all(|(a, b)| a.trim_end_matches('\0') == b));
    NAMES.get(i).map_or(ptr::null(), |s| s.as_ptr().cast())
}

/// Simulates a workload. `config_json` may be null for the built-in preset.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_simulate(
    workload_json: *const c_char,
    config_json: *const c_char,
    mode: LpMode,
    out: *mut *mut LpResult,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let workload = WorkloadSpec::from_json_str(unsafe { str_arg(workload_json, "workload_json") }?)?;
        let config = unsafe { config_arg(config_json) }?;
        let mode = match mode {
            LpMode::Full => SimMode::Full,
            LpMode::Mean => SimMode::Mean,
        };
        let r = run_simulation(&workload, &config, mode)?;
        unsafe { *out = Box::into_raw(Box::new(LpResult(r))) };
        Ok(())
    })
}

/// # Safety
/// `result` must come from [`lp_simulate`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_result_metrics(result: *const LpResult, out: *mut LpMetrics) -> LpStatus {
    guard(|| {
        let r = unsafe { result.as_ref() }.ok_or_else(|| null("result"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = &r.0.metrics;
        unsafe {
            *out = LpMetrics {
                throughput_tok_s: m.throughput_tok_s,
                itl_mean_s: m.itl_mean_s,
                itl_p50_s: m.itl_p50_s,
                itl_p99_s: m.itl_p99_s,
                ttft_mean_s: m.ttft_mean_s,
                ttft_p50_s: m.ttft_p50_s,
                ttft_p99_s: m.ttft_p99_s,
                ideal_throughput_tok_s: m.ideal_throughput_tok_s,
                starved: m.starved,
                degenerate: m.degenerate,
                finished_count: m.finished_count as u64,
                rejected_count: m.rejected_count as u64,
            }
        };
        Ok(())
    })
}

/// Full result as JSON; release with [`lp_string_free`].
///
/// # Safety
/// `result` must come from [`lp_simulate`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_result_to_json(result: *const LpResult, out: *mut *mut c_char) -> LpStatus {
    guard(|| {
        let r = unsafe { result.as_ref() }.ok_or_else(|| null("result"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(serde_json::to_string(&r.0).map_err(Error::from)?, out)
    })
}

/// # Safety
/// `result` must be null or come from [`lp_simulate`], and not be used after.
#[no_mangle]
pub unsafe extern "C" fn lp_result_free(result: *mut LpResult) {
    if !result.is_null() {
        drop(unsafe { Box::from_raw(result) });
    }
}

/// Placement sweep of one condition. `config_json` and `options_json` may be
/// null for the preset and default sweep options. Writes the result as JSON;
/// release it with [`lp_string_free`].
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_sweep(
    condition_json: *const c_char,
    config_json: *const c_char,
    options_json: *const c_char,
    out_json: *mut *mut c_char,
) -> LpStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let condition: Condition = loraplace::io::from_json_str(unsafe { str_arg(condition_json, "condition_json") }?)?;
        condition.validate()?;
        let config = unsafe { config_arg(config_json) }?;
        let opts: SweepOptions = if options_json.is_null() {
            SweepOptions::default()
        } else {
            loraplace::io::from_json_str(unsafe { str_arg(options_json, "options_json") }?)?
        };
        let p = sweep_optimal(&condition, &config, &opts)?;
        out_string(serde_json::to_string(&p).map_err(Error::from)?, out_json)
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_load(path: *const c_char, out: *mut *mut LpModel) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { str_arg(path, "path") }?;
        let m = PlacementModel::from_path(std::path::Path::new(path))?;
        unsafe { *out = Box::into_raw(Box::new(LpModel(m))) };
        Ok(())
    })
}

/// # Safety
/// `json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_from_json(json: *const c_char, out: *mut *mut LpModel) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m: PlacementModel = loraplace::io::from_json_str(unsafe { str_arg(json, "json") }?)?;
        m.validate()?;
        unsafe { *out = Box::into_raw(Box::new(LpModel(m))) };
        Ok(())
    })
}

/// Predicts from `n_features` values in [`lp_feature_name`] order.
///
/// # Safety
/// `features` must point to `n_features` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_predict(
    model: *const LpModel,
    features: *const f64,
    n_features: usize,
    out: *mut LpPlacement,
) -> LpStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if n_features != LP_FEATURE_COUNT {
            return Err(Error::validation("n_features", format!("expected {LP_FEATURE_COUNT}, got {n_features}")).into());
        }
        let x = unsafe { std::slice::from_raw_parts(features, n_features) };
        let p = m.0.predict(x);
        unsafe {
            *out = LpPlacement {
                max_throughput_tok_s: p.max_throughput_tok_s,
                n_star: p.n_star,
                g_star: p.g_star,
            }
        };
        Ok(())
    })
}

/// Encodes a condition JSON into `LP_FEATURE_COUNT` features.
///
/// # Safety
/// `condition_json` must be NUL-terminated; `out` must hold
/// `LP_FEATURE_COUNT` doubles.
#[no_mangle]
pub unsafe extern "C" fn lp_encode_condition(condition_json: *const c_char, out: *mut f64) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c: Condition = loraplace::io::from_json_str(unsafe { str_arg(condition_json, "condition_json") }?)?;
        c.validate()?;
        let f = encode_workload(&c)?;
        unsafe { ptr::copy_nonoverlapping(f.0.as_ptr(), out, LP_FEATURE_COUNT) };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from a model constructor, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn lp_model_free(model: *mut LpModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// SMAPE in percent of two series of length `n`.
///
/// # Safety
/// `predicted` and `actual` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_smape(predicted: *const f64, actual: *const f64, n: usize, out: *mut f64) -> LpStatus {
    guard(|| {
        if predicted.is_null() || actual.is_null() || out.is_null() {
            return Err(null("predicted, actual or out"));
        }
        let p = unsafe { std::slice::from_raw_parts(predicted, n) };
        let a = unsafe { std::slice::from_raw_parts(actual, n) };
        unsafe { *out = loraplace::metrics::smape(p, a)? };
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn lp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
