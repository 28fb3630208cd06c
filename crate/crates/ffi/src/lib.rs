//! C interface to `pdkf-core`.
//!
//! Objects are handed out as opaque pointers and released with the matching
//! `*_free` function. Every fallible call returns a [`PdkfStatus`]; on
//! failure the message is available from [`pdkf_last_error`] on the same
//! thread until the next failing call. Matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::DMatrix;
use pdkf_core::analysis::solve_riccati;
use pdkf_core::harness::{emit_report, Experiment, ExperimentConfig, MsdReport};
use pdkf_core::statespace::{SensorModel, StateSpaceModel};
use pdkf_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdkfStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or an index out of range.
    InvalidArgument = 1,
    /// Configuration or dimension error.
    Config = 2,
    /// Numerical failure, including non-convergence.
    Numeric = 3,
    Io = 4,
    /// The requested value does not exist for this arm.
    Inapplicable = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Validated experiment: network, sensors and experiment arms.
pub struct PdkfExperiment {
    inner: Experiment,
}

/// Results of [`pdkf_experiment_run`].
pub struct PdkfReport {
    inner: MsdReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: PdkfStatus, msg: impl Into<String>) -> PdkfStatus {
    set_error(msg);
    status
}

fn status_of(err: &Error) -> PdkfStatus {
    match err.exit_code() {
        2 => PdkfStatus::Config,
        3 => PdkfStatus::Numeric,
        _ => PdkfStatus::Io,
    }
}

fn from_core(err: Error) -> PdkfStatus {
    fail(status_of(&err), err.to_string())
}

/// Run `f`, turning panics into [`PdkfStatus::Panic`].
fn guard(f: impl FnOnce() -> PdkfStatus) -> PdkfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(PdkfStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, PdkfStatus> {
    if p.is_null() {
        return Err(fail(PdkfStatus::InvalidArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PdkfStatus::InvalidArgument, format!("`{name}` is not valid UTF-8")))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, name: &str) -> Result<DMatrix<f64>, PdkfStatus> {
    if p.is_null() {
        return Err(fail(PdkfStatus::InvalidArgument, format!("`{name}` is null")));
    }
    let data = std::slice::from_raw_parts(p, rows * cols);
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

fn null_arg(name: &str) -> PdkfStatus {
    fail(PdkfStatus::InvalidArgument, format!("`{name}` is null"))
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pdkf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pdkf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn build_experiment(cfg: pdkf_core::Result<ExperimentConfig>, out: *mut *mut PdkfExperiment) -> PdkfStatus {
    let experiment = match cfg.and_then(Experiment::new) {
        Ok(e) => e,
        Err(e) => return from_core(e),
    };
    // SAFETY: caller checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(PdkfExperiment { inner: experiment })) };
    PdkfStatus::Ok
}

/// Build an experiment from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pdkf_experiment_from_toml(toml: *const c_char, out: *mut *mut PdkfExperiment) -> PdkfStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let text = match str_arg(toml, "toml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        build_experiment(ExperimentConfig::from_toml_str(text), out)
    })
}

/// Build an experiment from a TOML file; `PDKF_SEED` overrides the seed.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pdkf_experiment_from_file(path: *const c_char, out: *mut *mut PdkfExperiment) -> PdkfStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        build_experiment(ExperimentConfig::load(Path::new(path)), out)
    })
}

/// # Safety
/// `exp` must come from `pdkf_experiment_from_*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pdkf_experiment_free(exp: *mut PdkfExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `exp` must be null or a live experiment.
#[no_mangle]
pub unsafe extern "C" fn pdkf_experiment_node_count(exp: *const PdkfExperiment) -> usize {
    exp.as_ref().map_or(0, |e| e.inner.topology.node_count())
}

/// Number of experiment arms, or 0 for a null handle.
///
/// # Safety
/// `exp` must be null or a live experiment.
#[no_mangle]
pub unsafe extern "C" fn pdkf_experiment_arm_count(exp: *const PdkfExperiment) -> usize {
    exp.as_ref().map_or(0, |e| e.inner.arms.len())
}

/// Steady-state network MSD predicted for `arm` (linear scale), without
/// simulating. Returns [`PdkfStatus::Inapplicable`] when no prediction
/// exists.
///
/// # Safety
/// `exp` must be a live experiment and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pdkf_experiment_theory(exp: *const PdkfExperiment, arm: usize, out: *mut f64) -> PdkfStatus {
    guard(|| {
        let Some(e) = exp.as_ref() else { return null_arg("exp") };
        if out.is_null() {
            return null_arg("out");
        }
        if arm >= e.inner.arms.len() {
            return fail(PdkfStatus::InvalidArgument, format!("arm {arm} out of range"));
        }
        let theory = e.inner.theory().swap_remove(arm);
        match theory.network() {
            Some(v) => {
                *out = v;
                PdkfStatus::Ok
            }
            None => fail(PdkfStatus::Inapplicable, format!("{theory:?}")),
        }
    })
}

/// Run the Monte-Carlo ensemble.
///
/// # Safety
/// `exp` must be a live experiment and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pdkf_experiment_run(exp: *const PdkfExperiment, out: *mut *mut PdkfReport) -> PdkfStatus {
    guard(|| {
        let Some(e) = exp.as_ref() else { return null_arg("exp") };
        if out.is_null() {
            return null_arg("out");
        }
        match e.inner.run() {
            Ok(report) => {
                *out = Box::into_raw(Box::new(PdkfReport { inner: report }));
                PdkfStatus::Ok
            }
            Err(err) => from_core(err),
        }
    })
}

/// # Safety
/// `report` must come from `pdkf_experiment_run` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pdkf_report_free(report: *mut PdkfReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

unsafe fn arm_of<'a>(report: *const PdkfReport, arm: usize) -> Result<&'a pdkf_core::harness::ArmReport, PdkfStatus> {
    let Some(r) = report.as_ref() else {
        return Err(null_arg("report"));
    };
    r.inner
        .arms
        .get(arm)
        .ok_or_else(|| fail(PdkfStatus::InvalidArgument, format!("arm {arm} out of range")))
}

/// Shared entries `L` of `arm` and the scalars it transmits per iteration.
///
/// # Safety
/// `report` must be a live report; `l` and `scalars` writable or null.
#[no_mangle]
pub unsafe extern "C" fn pdkf_report_arm_info(
    report: *const PdkfReport,
    arm: usize,
    l: *mut usize,
    scalars: *mut usize,
) -> PdkfStatus {
    guard(|| match arm_of(report, arm) {
        Ok(a) => {
            if !l.is_null() {
                *l = a.l;
            }
            if !scalars.is_null() {
                *scalars = a.scalars_per_iteration;
            }
            PdkfStatus::Ok
        }
        Err(s) => s,
    })
}

/// Copy up to `len` points of `arm`'s network MSD curve (linear scale) into
/// `buf`; `total` receives the full curve length. Pass `buf = NULL` to
/// query the length only.
///
/// # Safety
/// `buf` must hold `len` doubles when non-null; `total` writable or null.
#[no_mangle]
pub unsafe extern "C" fn pdkf_report_curve(
    report: *const PdkfReport,
    arm: usize,
    buf: *mut f64,
    len: usize,
    total: *mut usize,
) -> PdkfStatus {
    guard(|| match arm_of(report, arm) {
        Ok(a) => {
            if !total.is_null() {
                *total = a.curve.len();
            }
            if !buf.is_null() {
                let n = len.min(a.curve.len());
                ptr::copy_nonoverlapping(a.curve.as_ptr(), buf, n);
            }
            PdkfStatus::Ok
        }
        Err(s) => s,
    })
}

/// Empirical and (when available) theoretical steady-state network MSD of
/// `arm`, linear scale. `theory` is set to NaN when inapplicable.
///
/// # Safety
/// `report` must be a live report; `empirical` and `theory` writable or null.
#[no_mangle]
pub unsafe extern "C" fn pdkf_report_steady(
    report: *const PdkfReport,
    arm: usize,
    empirical: *mut f64,
    theory: *mut f64,
) -> PdkfStatus {
    guard(|| match arm_of(report, arm) {
        Ok(a) => {
            if !empirical.is_null() {
                *empirical = a.steady_network;
            }
            if !theory.is_null() {
                *theory = a.theory.network().unwrap_or(f64::NAN);
            }
            PdkfStatus::Ok
        }
        Err(s) => s,
    })
}

/// Write `curves.csv`, `steady.csv` and `meta.json` into `dir`.
///
/// # Safety
/// `report` must be a live report and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pdkf_report_write(report: *const PdkfReport, dir: *const c_char) -> PdkfStatus {
    guard(|| {
        let Some(r) = report.as_ref() else {
            return null_arg("report");
        };
        let dir = match str_arg(dir, "dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        match emit_report(&r.inner, Path::new(dir)) {
            Ok(_) => PdkfStatus::Ok,
            Err(e) => from_core(e),
        }
    })
}

/// Steady-state prior covariance of a single Kalman filter with state
/// dimension `m` and observation dimension `p`, iterated from `pi0`.
/// `p_pred` receives the `m×m` result.
///
/// # Safety
/// Matrix pointers must hold the stated number of row-major doubles.
#[no_mangle]
pub unsafe extern "C" fn pdkf_solve_riccati(
    m: usize,
    p: usize,
    f: *const f64,
    g: *const f64,
    q: *const f64,
    pi0: *const f64,
    h: *const f64,
    r: *const f64,
    tol: f64,
    max_iter: usize,
    p_pred: *mut f64,
) -> PdkfStatus {
    guard(|| {
        if p_pred.is_null() {
            return null_arg("p_pred");
        }
        if m == 0 || p == 0 {
            return fail(PdkfStatus::Config, "dimensions must be positive");
        }
        let mats = (|| {
            Ok::<_, PdkfStatus>((
                matrix_arg(f, m, m, "f")?,
                matrix_arg(g, m, m, "g")?,
                matrix_arg(q, m, m, "q")?,
                matrix_arg(pi0, m, m, "pi0")?,
                matrix_arg(h, p, m, "h")?,
                matrix_arg(r, p, p, "r")?,
            ))
        })();
        let (f, g, q, pi0, h, r) = match mats {
            Ok(t) => t,
            Err(s) => return s,
        };
        let solved = StateSpaceModel::new(f, g, q, pi0)
            .and_then(|model| SensorModel::new(h, r).map(|s| (model, s)))
            .and_then(|(model, sensor)| solve_riccati(&model, &[&sensor], tol, max_iter));
        match solved {
            Ok(sol) => {
                let out = std::slice::from_raw_parts_mut(p_pred, m * m);
                for i in 0..m {
                    for j in 0..m {
                        out[i * m + j] = sol.p_pred[(i, j)];
                    }
                }
                PdkfStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}
