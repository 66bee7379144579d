//! C interface to the `cenkf` library.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`CenkfStatus`]; on failure, [`cenkf_last_error`] describes what went
//! wrong on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use cenkf::harness::{export_results, run_experiment, ExperimentConfig, ExperimentResult};
use cenkf::integrator::{solution_operator, IntegratorConfig};
use cenkf::patient_data::PatientTimeline;
use cenkf::qp::{solve_qp, LinearConstraints, QpConfig};
use cenkf::ultradian::{ExogenousInputs, NutritionEvent, PhysState, UltradianParams, STATE_DIM};
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenkfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Run = 5,
    NotAvailable = 6,
    Panic = 7,
}

/// Parsed patient timeline.
pub struct CenkfTimeline(PatientTimeline);

/// Experiment configuration.
pub struct CenkfConfig(ExperimentConfig);

/// Outcome of one filtering run.
pub struct CenkfResult(ExperimentResult);

/// One forecast row of a result.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CenkfRecord {
    pub t: f64,
    pub y: f64,
    pub forecast_mean: f64,
    pub forecast_std: f64,
    pub forecast_min: f64,
    pub forecast_max: f64,
    pub forecast_violations: usize,
    pub replaced: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: CenkfStatus, msg: impl Into<String>) -> CenkfStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> CenkfStatus) -> CenkfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(CenkfStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, CenkfStatus> {
    if s.is_null() {
        return Err(fail(CenkfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(CenkfStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], CenkfStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(CenkfStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, n))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

fn out_handle<T>(out: *mut *mut T, value: T) -> CenkfStatus {
    unsafe { *out = Box::into_raw(Box::new(value)) };
    CenkfStatus::Ok
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn cenkf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cenkf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a timeline from a `.csv` or `.json` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cenkf_timeline_from_path(path: *const c_char, out: *mut *mut CenkfTimeline) -> CenkfStatus {
    guard(|| {
        if out.is_null() {
            return fail(CenkfStatus::NullPointer, "out is null");
        }
        let path = tri!(str_arg(path, "path"));
        match PatientTimeline::from_path(Path::new(path)) {
            Ok(tl) => out_handle(out, CenkfTimeline(tl)),
            Err(e) => fail(CenkfStatus::Parse, e.to_string()),
        }
    })
}

/// Parse a timeline from CSV text.
///
/// # Safety
/// `id` and `csv` must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cenkf_timeline_from_csv(
    id: *const c_char,
    csv: *const c_char,
    out: *mut *mut CenkfTimeline,
) -> CenkfStatus {
    guard(|| {
        if out.is_null() {
            return fail(CenkfStatus::NullPointer, "out is null");
        }
        let id = tri!(str_arg(id, "id"));
        let csv = tri!(str_arg(csv, "csv"));
        match PatientTimeline::from_csv(id, csv.as_bytes()) {
            Ok(tl) => out_handle(out, CenkfTimeline(tl)),
            Err(e) => fail(CenkfStatus::Parse, e.to_string()),
        }
    })
}

/// Number of events in the timeline, or 0 for a null handle.
///
/// # Safety
/// `tl` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cenkf_timeline_len(tl: *const CenkfTimeline) -> usize {
    tl.as_ref().map_or(0, |t| t.0.events().len())
}

/// # Safety
/// `tl` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cenkf_timeline_free(tl: *mut CenkfTimeline) {
    if !tl.is_null() {
        drop(Box::from_raw(tl));
    }
}

/// Build a configuration from JSON. Null or empty text gives the defaults;
/// missing keys keep their default values.
///
/// # Safety
/// `json` must be null or a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cenkf_config_new(json: *const c_char, out: *mut *mut CenkfConfig) -> CenkfStatus {
    guard(|| {
        if out.is_null() {
            return fail(CenkfStatus::NullPointer, "out is null");
        }
        let text = if json.is_null() { "" } else { tri!(str_arg(json, "json")) };
        let cfg = if text.trim().is_empty() {
            ExperimentConfig::default()
        } else {
            match serde_json::from_str::<ExperimentConfig>(text) {
                Ok(c) => c,
                Err(e) => return fail(CenkfStatus::Parse, e.to_string()),
            }
        };
        if let Err(e) = cfg.validate() {
            return fail(CenkfStatus::InvalidArgument, e.to_string());
        }
        out_handle(out, CenkfConfig(cfg))
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cenkf_config_free(cfg: *mut CenkfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Run the filter over a timeline.
///
/// # Safety
/// `tl` and `cfg` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cenkf_run(
    tl: *const CenkfTimeline,
    cfg: *const CenkfConfig,
    out: *mut *mut CenkfResult,
) -> CenkfStatus {
    guard(|| {
        let (Some(tl), Some(cfg)) = (tl.as_ref(), cfg.as_ref()) else {
            return fail(CenkfStatus::NullPointer, "timeline or config is null");
        };
        if out.is_null() {
            return fail(CenkfStatus::NullPointer, "out is null");
        }
        match run_experiment(&tl.0, &cfg.0) {
            Ok(r) => out_handle(out, CenkfResult(r)),
            Err(e) => fail(CenkfStatus::Run, e.to_string()),
        }
    })
}

/// Number of forecast records in the result.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cenkf_result_len(res: *const CenkfResult) -> usize {
    res.as_ref().map_or(0, |r| r.0.records.len())
}

/// Copy record `index` into `out`.
///
/// # Safety
/// `res` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cenkf_result_record(res: *const CenkfResult, index: usize, out: *mut CenkfRecord) -> CenkfStatus {
    guard(|| {
        let Some(res) = res.as_ref() else {
            return fail(CenkfStatus::NullPointer, "result is null");
        };
        if out.is_null() {
            return fail(CenkfStatus::NullPointer, "out is null");
        }
        let Some(r) = res.0.records.get(index) else {
            return fail(CenkfStatus::InvalidArgument, format!("record {index} out of range ({} records)", res.0.records.len()));
        };
        *out = CenkfRecord {
            t: r.t,
            y: r.y,
            forecast_mean: r.forecast.mean,
            forecast_std: r.forecast.std,
            forecast_min: r.forecast.min,
            forecast_max: r.forecast.max,
            forecast_violations: r.forecast_violations,
            replaced: r.replaced,
        };
        CenkfStatus::Ok
    })
}

/// Mean squared forecast error after the configured cutoff. Returns
/// `NotAvailable` when no record qualifies.
///
/// # Safety
/// `res` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cenkf_result_mse(res: *const CenkfResult, out: *mut f64) -> CenkfStatus {
    guard(|| {
        let Some(res) = res.as_ref() else {
            return fail(CenkfStatus::NullPointer, "result is null");
        };
        if out.is_null() {
            return fail(CenkfStatus::NullPointer, "out is null");
        }
        match res.0.mse {
            Some(m) => {
                *out = m.mean;
                CenkfStatus::Ok
            }
            None => fail(CenkfStatus::NotAvailable, "no forecast record falls after the MSE cutoff"),
        }
    })
}

/// 1 if the run stopped early, else 0.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cenkf_result_aborted(res: *const CenkfResult) -> i32 {
    res.as_ref().map_or(0, |r| i32::from(r.0.metadata.aborted.is_some()))
}

/// Write the result tables into directory `dir`, creating it if needed.
///
/// # Safety
/// `res` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cenkf_result_export(res: *const CenkfResult, dir: *const c_char) -> CenkfStatus {
    guard(|| {
        let Some(res) = res.as_ref() else {
            return fail(CenkfStatus::NullPointer, "result is null");
        };
        let dir = tri!(str_arg(dir, "dir"));
        match export_results(&res.0, Path::new(dir)) {
            Ok(()) => CenkfStatus::Ok,
            Err(e) => fail(CenkfStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `res` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cenkf_result_free(res: *mut CenkfResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Number of physiological state variables.
#[no_mangle]
pub extern "C" fn cenkf_state_dim() -> usize {
    STATE_DIM
}

/// Integrate the model at nominal parameters from `initial` (length
/// `cenkf_state_dim()`) and write the state at each of the `n_times`
/// increasing `times` into `out`, row by row. The first time is the start.
/// Nutrition events are given as parallel arrays of times (min) and
/// amounts (mg).
///
/// # Safety
/// Array arguments must be valid for the stated lengths; `out` must hold
/// `n_times * cenkf_state_dim()` values.
#[no_mangle]
pub unsafe extern "C" fn cenkf_simulate(
    initial: *const f64,
    times: *const f64,
    n_times: usize,
    feed_times: *const f64,
    feed_amounts: *const f64,
    n_feeds: usize,
    out: *mut f64,
) -> CenkfStatus {
    guard(|| {
        let v0 = tri!(slice_arg(initial, STATE_DIM, "initial"));
        let grid = tri!(slice_arg(times, n_times, "times"));
        let ft = tri!(slice_arg(feed_times, n_feeds, "feed_times"));
        let fm = tri!(slice_arg(feed_amounts, n_feeds, "feed_amounts"));
        if grid.is_empty() {
            return fail(CenkfStatus::InvalidArgument, "times is empty");
        }
        if out.is_null() {
            return fail(CenkfStatus::NullPointer, "out is null");
        }
        let feeds = ft.iter().zip(fm).map(|(&t, &m)| NutritionEvent { t, m }).collect();
        let u = match ExogenousInputs::new(feeds, vec![]) {
            Ok(u) => u,
            Err(e) => return fail(CenkfStatus::InvalidArgument, e.to_string()),
        };
        let states = match solution_operator(grid, &PhysState::from_slice(v0), &UltradianParams::nominal(), &u, &IntegratorConfig::default()) {
            Ok(s) => s,
            Err(e) => return fail(CenkfStatus::Run, e.to_string()),
        };
        let dst = slice::from_raw_parts_mut(out, n_times * STATE_DIM);
        for (row, s) in dst.chunks_exact_mut(STATE_DIM).zip(&states) {
            row.copy_from_slice(&s.to_array());
        }
        CenkfStatus::Ok
    })
}

/// Solve `min ½ xᵀQx + cᵀx` subject to `A x = a` and `B x ≤ b`. Matrices
/// are row-major: `q` is n×n, `a_mat` n_eq×n, `b_mat` n_ineq×n. The
/// minimizer is written to `x` (length n).
///
/// # Safety
/// Array arguments must be valid for the stated dimensions.
#[no_mangle]
pub unsafe extern "C" fn cenkf_qp_solve(
    n: usize,
    q: *const f64,
    c: *const f64,
    n_eq: usize,
    a_mat: *const f64,
    a: *const f64,
    n_ineq: usize,
    b_mat: *const f64,
    b: *const f64,
    x: *mut f64,
) -> CenkfStatus {
    guard(|| {
        if n == 0 {
            return fail(CenkfStatus::InvalidArgument, "n must be positive");
        }
        if x.is_null() {
            return fail(CenkfStatus::NullPointer, "x is null");
        }
        let q = DMatrix::from_row_slice(n, n, tri!(slice_arg(q, n * n, "q")));
        let c = DVector::from_column_slice(tri!(slice_arg(c, n, "c")));
        let cons = LinearConstraints {
            eq_mat: DMatrix::from_row_slice(n_eq, n, tri!(slice_arg(a_mat, n_eq * n, "a_mat"))),
            eq_rhs: DVector::from_column_slice(tri!(slice_arg(a, n_eq, "a"))),
            ineq_mat: DMatrix::from_row_slice(n_ineq, n, tri!(slice_arg(b_mat, n_ineq * n, "b_mat"))),
            ineq_rhs: DVector::from_column_slice(tri!(slice_arg(b, n_ineq, "b"))),
        };
        match solve_qp(&q, &c, &cons, &QpConfig::default()) {
            Ok(sol) => {
                slice::from_raw_parts_mut(x, n).copy_from_slice(sol.x.as_slice());
                CenkfStatus::Ok
            }
            Err(e) => fail(CenkfStatus::Run, e.to_string()),
        }
    })
}
