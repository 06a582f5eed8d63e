//! C ABI over `transfer_itr`.
//!
//! Objects are opaque handles created by `titr_*_new`/`titr_*_fit` functions
//! and released with the matching `titr_*_free`. Every fallible call returns a
//! [`TitrStatus`]; on failure the message is available from
//! [`titr_last_error_message`] on the same thread until the next failing call.
//! Matrices are passed row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use transfer_itr::evaluation::{value_aipw_weighted, Augmentation};
use transfer_itr::nuisance::{fit_nuisance, PropensityMode};
use transfer_itr::pipeline::{fit_rule, PipelineOptions};
use transfer_itr::weights::{effective_sample_size, fit_weights_tuned};
use transfer_itr::{
    Error, ErrorCategory, ExperimentalSample, LinearRule, Matrix, TargetSample, TransferWeights,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TitrStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad sizes or values supplied by the caller.
    InvalidArgument = 2,
    /// Data failed validation.
    Input = 3,
    Infeasible = 4,
    Numerical = 5,
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Experimental sample: covariates, binary treatment, outcome.
pub struct TitrExperimental(ExperimentalSample);

/// Covariate-only sample from the target population.
pub struct TitrTarget(TargetSample);

/// Per-row transfer weights summing to one.
pub struct TitrWeights(TransferWeights);

/// Linear rule `1{eta0 + eta1'x > 0}`.
pub struct TitrRule(LinearRule);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TitrStatus {
    match e.category() {
        ErrorCategory::Input => TitrStatus::Input,
        ErrorCategory::Infeasible => TitrStatus::Infeasible,
        ErrorCategory::Numerical => TitrStatus::Numerical,
        ErrorCategory::Io => TitrStatus::Io,
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard<F>(f: F) -> TitrStatus
where
    F: FnOnce() -> Result<(), (TitrStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TitrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TitrStatus::Panic
        }
    }
}

fn lib(e: Error) -> (TitrStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (TitrStatus, String) {
    (TitrStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (TitrStatus, String) {
    (TitrStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(
    p: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], (TitrStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to a live handle.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (TitrStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

fn matrix(x: &[f64], rows: usize, cols: usize) -> Result<Matrix, (TitrStatus, String)> {
    Matrix::new(rows, cols, x.to_vec()).map_err(lib)
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn titr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Build an experimental sample from `n x p` covariates, `n` treatments in
/// {0, 1} and `n` outcomes.
///
/// # Safety
/// `x` must hold `n * p` doubles, `a` and `y` `n` entries each; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn titr_experimental_new(
    x: *const f64,
    n: usize,
    p: usize,
    a: *const u8,
    y: *const f64,
    out: *mut *mut TitrExperimental,
) -> TitrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n.checked_mul(p).ok_or_else(|| invalid("n * p overflows"))?;
        let x = matrix(slice(x, len, "x")?, n, p)?;
        let a = slice(a, n, "a")?.to_vec();
        let y = slice(y, n, "y")?.to_vec();
        let s = ExperimentalSample::new(x, a, y).map_err(lib)?;
        store(out, TitrExperimental(s));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`titr_experimental_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn titr_experimental_free(h: *mut TitrExperimental) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Build a target sample from `m x p` covariates.
///
/// # Safety
/// `x` must hold `m * p` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn titr_target_new(
    x: *const f64,
    m: usize,
    p: usize,
    out: *mut *mut TitrTarget,
) -> TitrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = m.checked_mul(p).ok_or_else(|| invalid("m * p overflows"))?;
        let s = TargetSample::new(matrix(slice(x, len, "x")?, m, p)?).map_err(lib)?;
        store(out, TitrTarget(s));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`titr_target_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn titr_target_free(h: *mut TitrTarget) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Minimum-entropy balancing weights on first and second moments, with
/// tolerances tuned automatically.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn titr_weights_nonparametric(
    exp: *const TitrExperimental,
    target: *const TitrTarget,
    out: *mut *mut TitrWeights,
) -> TitrStatus {
    guard(|| {
        let exp = handle(exp, "exp")?;
        let target = handle(target, "target")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let tuned = fit_weights_tuned(&exp.0, &target.0).map_err(lib)?;
        store(out, TitrWeights(tuned.fit.weights));
        Ok(())
    })
}

/// Equal weights `1/n`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn titr_weights_uniform(n: usize, out: *mut *mut TitrWeights) -> TitrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 {
            return Err(invalid("n must be positive"));
        }
        store(out, TitrWeights(TransferWeights::uniform(n)));
        Ok(())
    })
}

/// Number of weights, or 0 for a null handle.
///
/// # Safety
/// `w` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn titr_weights_len(w: *const TitrWeights) -> usize {
    w.as_ref().map_or(0, |w| w.0.len())
}

/// Copy the weights into `buf`, which must have room for exactly `len` values.
///
/// # Safety
/// `w` must be live and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn titr_weights_copy(
    w: *const TitrWeights,
    buf: *mut f64,
    len: usize,
) -> TitrStatus {
    guard(|| {
        let w = handle(w, "w")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != w.0.len() {
            return Err(invalid(format!(
                "buffer holds {len} values, weights have {}",
                w.0.len()
            )));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(w.0.as_slice());
        Ok(())
    })
}

/// Kish effective sample size.
///
/// # Safety
/// `w` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn titr_weights_ess(w: *const TitrWeights, out: *mut f64) -> TitrStatus {
    guard(|| {
        let w = handle(w, "w")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = effective_sample_size(&w.0);
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a weights handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn titr_weights_free(h: *mut TitrWeights) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Rule from `len = p + 1` coefficients (intercept first).
///
/// # Safety
/// `eta` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn titr_rule_new(
    eta: *const f64,
    len: usize,
    out: *mut *mut TitrRule,
) -> TitrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if len == 0 {
            return Err(invalid("a rule needs at least an intercept"));
        }
        let rule = LinearRule::new(slice(eta, len, "eta")?.to_vec()).map_err(lib)?;
        store(out, TitrRule(rule));
        Ok(())
    })
}

/// Learn a rule: weighted nuisances with constant propensity, augmented
/// contrast, then the multi-start difference-of-convex fit. The rule is
/// scaled so its largest coefficient has magnitude one.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn titr_rule_fit(
    exp: *const TitrExperimental,
    w: *const TitrWeights,
    seed: u64,
    out: *mut *mut TitrRule,
) -> TitrStatus {
    guard(|| {
        let exp = handle(exp, "exp")?;
        let w = handle(w, "w")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut opts = PipelineOptions::default();
        opts.learn.seed = seed;
        let fitted = fit_rule(&exp.0, &w.0, &opts).map_err(lib)?;
        store(out, TitrRule(fitted.report.eta));
        Ok(())
    })
}

/// Number of coefficients, or 0 for a null handle.
///
/// # Safety
/// `rule` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn titr_rule_len(rule: *const TitrRule) -> usize {
    rule.as_ref().map_or(0, |r| r.0.eta().len())
}

/// Copy the coefficients into `buf`, which must have room for exactly `len`.
///
/// # Safety
/// `rule` must be live and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn titr_rule_eta(
    rule: *const TitrRule,
    buf: *mut f64,
    len: usize,
) -> TitrStatus {
    guard(|| {
        let rule = handle(rule, "rule")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let eta = rule.0.eta();
        if len != eta.len() {
            return Err(invalid(format!(
                "buffer holds {len} values, rule has {}",
                eta.len()
            )));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(eta);
        Ok(())
    })
}

/// Decision (0 or 1) for one covariate vector of length `p`.
///
/// # Safety
/// `rule` must be live, `x` readable for `p` doubles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn titr_rule_predict(
    rule: *const TitrRule,
    x: *const f64,
    p: usize,
    out: *mut u8,
) -> TitrStatus {
    guard(|| {
        let rule = handle(rule, "rule")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = rule.0.predict(slice(x, p, "x")?).map_err(lib)?;
        Ok(())
    })
}

/// Weighted augmented value of `rule`, with nuisances refitted under `w`.
///
/// # Safety
/// Handles must be live; `value` must be writable; `ess` may be null.
#[no_mangle]
pub unsafe extern "C" fn titr_rule_value(
    rule: *const TitrRule,
    exp: *const TitrExperimental,
    w: *const TitrWeights,
    value: *mut f64,
    ess: *mut f64,
) -> TitrStatus {
    guard(|| {
        let rule = handle(rule, "rule")?;
        let exp = handle(exp, "exp")?;
        let w = handle(w, "w")?;
        if value.is_null() {
            return Err(null("value"));
        }
        let fit = fit_nuisance(&exp.0, &w.0, PropensityMode::Constant).map_err(lib)?;
        let v =
            value_aipw_weighted(&rule.0, &exp.0, &w.0, &fit, Augmentation::Plus).map_err(lib)?;
        *value = v.value;
        if !ess.is_null() {
            *ess = v.ess;
        }
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a rule handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn titr_rule_free(h: *mut TitrRule) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
