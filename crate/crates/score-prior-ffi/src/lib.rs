//! C ABI over the score-prior library.
//!
//! The interface follows the usual conventions for embedding Rust in C
//! toolchains: models travel as opaque handles created by `sp_score_load`
//! and released by `sp_score_free`; every fallible call returns an `SP_*`
//! status code and leaves a human-readable detail string in thread-local
//! storage (`sp_last_error_message`); panics are caught at the boundary and
//! reported as `SP_ERR_PANIC` instead of unwinding into the caller.
//!
//! Buffers are caller-allocated: the caller owns `x`, `out`, and sample
//! buffers and guarantees the documented lengths. All arrays are dense
//! row-major `double`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use score_prior::density::{self, DivEstimator, GradEngine, ProbeDist};
use score_prior::odeint::{Method, SolverConfig};
use score_prior::score::ScoreField;

/// Call succeeded.
pub const SP_OK: i32 = 0;
/// A required pointer argument was null.
pub const SP_ERR_NULL: i32 = 1;
/// An argument failed validation (bad UTF-8, wrong buffer length, ...).
pub const SP_ERR_ARG: i32 = 2;
/// The computation itself failed; sp_last_error_message has the detail.
pub const SP_ERR_RUNTIME: i32 = 3;
/// A panic was caught at the language boundary.
pub const SP_ERR_PANIC: i32 = 4;

/// Opaque handle to a loaded score model.
#[repr(C)]
pub struct SpScore {
    _private: [u8; 0],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

fn guarded(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("panic caught at the FFI boundary");
            SP_ERR_PANIC
        }
    }
}

unsafe fn field_ref<'a>(handle: *const SpScore) -> Option<&'a ScoreField> {
    (handle as *const ScoreField).as_ref()
}

fn estimator(probes: u32, seed: u64) -> DivEstimator {
    if probes == 0 {
        DivEstimator::Exact
    } else {
        DivEstimator::Hutchinson {
            probes: probes as usize,
            dist: ProbeDist::Rademacher,
            seed,
        }
    }
}

fn solver(rtol: f64, atol: f64) -> SolverConfig {
    SolverConfig::new(Method::Dopri5).with_tol(rtol, atol)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message for this thread into `buf` (truncated to
/// `cap - 1` bytes, always NUL-terminated when `cap > 0`).
///
/// Returns the full message length in bytes, so callers can re-query with a
/// larger buffer; a null `buf` returns the length without copying.
#[no_mangle]
pub unsafe extern "C" fn sp_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a score-model checkpoint. Returns null on failure (see
/// sp_last_error_message); a non-null handle must be released with
/// sp_score_free.
#[no_mangle]
pub unsafe extern "C" fn sp_score_load(path: *const c_char) -> *mut SpScore {
    let out = catch_unwind(AssertUnwindSafe(|| {
        if path.is_null() {
            set_error("sp_score_load: path is null");
            return ptr::null_mut();
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(p) => p,
            Err(_) => {
                set_error("sp_score_load: path is not valid UTF-8");
                return ptr::null_mut();
            }
        };
        match ScoreField::load(Path::new(path)) {
            Ok(field) => Box::into_raw(Box::new(field)) as *mut SpScore,
            Err(e) => {
                set_error(&format!("sp_score_load: {e}"));
                ptr::null_mut()
            }
        }
    }));
    out.unwrap_or_else(|_| {
        set_error("panic caught at the FFI boundary");
        ptr::null_mut()
    })
}

/// Releases a handle from sp_score_load. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sp_score_free(handle: *mut SpScore) {
    if !handle.is_null() {
        drop(Box::from_raw(handle as *mut ScoreField));
    }
}

/// Model dimension, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn sp_score_dim(handle: *const SpScore) -> usize {
    field_ref(handle).map_or(0, |f| f.dim())
}

/// Evaluates the score (gradient of the diffused log-density) at `x` and
/// diffusion time `t`, writing `dim` values to `out`.
#[no_mangle]
pub unsafe extern "C" fn sp_score_eval(
    handle: *const SpScore,
    x: *const f64,
    len: usize,
    t: f64,
    out: *mut f64,
) -> i32 {
    guarded(|| {
        let Some(field) = field_ref(handle) else {
            set_error("sp_score_eval: null handle");
            return SP_ERR_NULL;
        };
        if x.is_null() || out.is_null() {
            set_error("sp_score_eval: null buffer");
            return SP_ERR_NULL;
        }
        if len != field.dim() {
            set_error(&format!(
                "sp_score_eval: buffer length {len} does not match model dimension {}",
                field.dim()
            ));
            return SP_ERR_ARG;
        }
        let x = slice::from_raw_parts(x, len);
        let out = slice::from_raw_parts_mut(out, len);
        match field.eval(x, t, out) {
            Ok(()) => SP_OK,
            Err(e) => {
                set_error(&format!("sp_score_eval: {e}"));
                SP_ERR_RUNTIME
            }
        }
    })
}

/// Log-probability of `x` under the model via the probability-flow ODE
/// (dopri5 with the given tolerances). `probes == 0` uses the exact
/// divergence; otherwise a Hutchinson estimate with that many Rademacher
/// probes keyed by `seed`. On success writes `*logp_out` and, when non-null,
/// `*nfe_out` (number of score evaluations spent).
#[no_mangle]
pub unsafe extern "C" fn sp_logprob(
    handle: *const SpScore,
    x: *const f64,
    len: usize,
    rtol: f64,
    atol: f64,
    probes: u32,
    seed: u64,
    logp_out: *mut f64,
    nfe_out: *mut u64,
) -> i32 {
    guarded(|| {
        let Some(field) = field_ref(handle) else {
            set_error("sp_logprob: null handle");
            return SP_ERR_NULL;
        };
        if x.is_null() || logp_out.is_null() {
            set_error("sp_logprob: null buffer");
            return SP_ERR_NULL;
        }
        if len != field.dim() {
            set_error(&format!(
                "sp_logprob: buffer length {len} does not match model dimension {}",
                field.dim()
            ));
            return SP_ERR_ARG;
        }
        let x = slice::from_raw_parts(x, len);
        match density::logprob(field, x, &solver(rtol, atol), &estimator(probes, seed)) {
            Ok(r) => {
                *logp_out = r.logp;
                if !nfe_out.is_null() {
                    *nfe_out = r.nfe as u64;
                }
                SP_OK
            }
            Err(e) => {
                set_error(&format!("sp_logprob: {e}"));
                SP_ERR_RUNTIME
            }
        }
    })
}

/// Gradient of the log-probability with respect to `x`, computed by the
/// adjoint method. Writes `dim` values to `grad_out` and, when non-null,
/// the log-probability to `logp_out`.
#[no_mangle]
pub unsafe extern "C" fn sp_grad_logprob(
    handle: *const SpScore,
    x: *const f64,
    len: usize,
    rtol: f64,
    atol: f64,
    probes: u32,
    seed: u64,
    grad_out: *mut f64,
    logp_out: *mut f64,
) -> i32 {
    guarded(|| {
        let Some(field) = field_ref(handle) else {
            set_error("sp_grad_logprob: null handle");
            return SP_ERR_NULL;
        };
        if x.is_null() || grad_out.is_null() {
            set_error("sp_grad_logprob: null buffer");
            return SP_ERR_NULL;
        }
        if len != field.dim() {
            set_error(&format!(
                "sp_grad_logprob: buffer length {len} does not match model dimension {}",
                field.dim()
            ));
            return SP_ERR_ARG;
        }
        let x = slice::from_raw_parts(x, len);
        match density::grad_logprob(
            field,
            x,
            &solver(rtol, atol),
            &estimator(probes, seed),
            GradEngine::Adjoint,
        ) {
            Ok(r) => {
                slice::from_raw_parts_mut(grad_out, len).copy_from_slice(&r.grad);
                if !logp_out.is_null() {
                    *logp_out = r.logp;
                }
                SP_OK
            }
            Err(e) => {
                set_error(&format!("sp_grad_logprob: {e}"));
                SP_ERR_RUNTIME
            }
        }
    })
}

/// Draws `n` samples from the model prior by the reverse SDE on an
/// `n_steps` grid, writing an `n x dim` row-major block to `out`.
#[no_mangle]
pub unsafe extern "C" fn sp_sample(
    handle: *const SpScore,
    n: usize,
    n_steps: usize,
    seed: u64,
    out: *mut f64,
) -> i32 {
    guarded(|| {
        let Some(field) = field_ref(handle) else {
            set_error("sp_sample: null handle");
            return SP_ERR_NULL;
        };
        if out.is_null() {
            set_error("sp_sample: null buffer");
            return SP_ERR_NULL;
        }
        match density::sample_reverse_sde(field, n, n_steps, seed) {
            Ok(samples) => {
                let flat: Vec<f64> = samples.iter().copied().collect();
                slice::from_raw_parts_mut(out, flat.len()).copy_from_slice(&flat);
                SP_OK
            }
            Err(e) => {
                set_error(&format!("sp_sample: {e}"));
                SP_ERR_RUNTIME
            }
        }
    })
}
