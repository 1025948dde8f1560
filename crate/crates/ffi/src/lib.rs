//! C ABI over the certifier.
//!
//! Every fallible function returns a [`CcStatus`]; on failure a description
//! is available from [`cc_last_error_message`] on the same thread. Handles
//! returned by `cc_classifier_load` must be released with
//! `cc_classifier_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use convexcert::model_io;
use convexcert::separability::separability_bound;
use convexcert::{Error, FeatureConvexClassifier, Norm, Tensor};

pub const CC_NORM_L1: u32 = 1;
pub const CC_NORM_L2: u32 = 2;
pub const CC_NORM_LINF: u32 = 3;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Version = 6,
    Numeric = 7,
    UnsupportedNorm = 8,
    Panic = 9,
}

/// Opaque classifier handle.
pub struct CcClassifier {
    inner: FeatureConvexClassifier,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CcStatus {
    match e {
        Error::Shape { .. } => CcStatus::Shape,
        Error::Io { .. } => CcStatus::Io,
        Error::Version { .. } => CcStatus::Version,
        Error::Parse { .. } | Error::Format(_) | Error::Consistency(_) | Error::Json(_) | Error::Csv(_) => {
            CcStatus::Format
        }
        Error::Numeric(_) => CcStatus::Numeric,
        Error::UnsupportedNorm(_) => CcStatus::UnsupportedNorm,
        Error::Contract(_) | Error::Config(_) => CcStatus::InvalidArgument,
    }
}

fn fail(status: CcStatus, msg: &str) -> CcStatus {
    set_last_error(msg);
    status
}

/// Runs `f`, mapping library errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), CcStatus>) -> CcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CcStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(CcStatus::Panic, "internal panic"),
    }
}

fn lib<T>(r: convexcert::Result<T>) -> Result<T, CcStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

fn norm_of(code: u32) -> Result<Norm, CcStatus> {
    match code {
        CC_NORM_L1 => Ok(Norm::L1),
        CC_NORM_L2 => Ok(Norm::L2),
        CC_NORM_LINF => Ok(Norm::Linf),
        other => Err(fail(CcStatus::UnsupportedNorm, &format!("unknown norm code {other}"))),
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, CcStatus> {
    if path.is_null() {
        return Err(fail(CcStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(CcStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn handle<'a>(h: *const CcClassifier) -> Result<&'a CcClassifier, CcStatus> {
    h.as_ref().ok_or_else(|| fail(CcStatus::NullPointer, "classifier handle is null"))
}

unsafe fn input(x: *const f32, len: usize) -> Result<Tensor, CcStatus> {
    if x.is_null() {
        return Err(fail(CcStatus::NullPointer, "input pointer is null"));
    }
    let data = std::slice::from_raw_parts(x, len).to_vec();
    lib(Tensor::vector(data))
}

fn out_ptr<T>(p: *mut T) -> Result<(), CcStatus> {
    if p.is_null() {
        Err(fail(CcStatus::NullPointer, "output pointer is null"))
    } else {
        Ok(())
    }
}

/// Message for the most recent failure on this thread; empty after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn cc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a saved classifier. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cc_classifier_load(path: *const c_char, out: *mut *mut CcClassifier) -> CcStatus {
    guard(|| {
        out_ptr(out)?;
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let inner = lib(model_io::load_classifier(path))?;
        *out = Box::into_raw(Box::new(CcClassifier { inner }));
        Ok(())
    })
}

/// Writes the classifier to `path`.
///
/// # Safety
/// `h` must come from `cc_classifier_load`; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cc_classifier_save(h: *const CcClassifier, path: *const c_char) -> CcStatus {
    guard(|| {
        let h = handle(h)?;
        let path = path_arg(path)?;
        lib(model_io::save_classifier(&h.inner, path))
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must be null or a live handle from `cc_classifier_load`, freed once.
#[no_mangle]
pub unsafe extern "C" fn cc_classifier_free(h: *mut CcClassifier) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cc_classifier_input_dim(h: *const CcClassifier, out: *mut usize) -> CcStatus {
    guard(|| {
        let h = handle(h)?;
        out_ptr(out)?;
        *out = h.inner.input_dim();
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cc_classifier_tau(h: *const CcClassifier, out: *mut f32) -> CcStatus {
    guard(|| {
        let h = handle(h)?;
        out_ptr(out)?;
        *out = h.inner.tau();
        Ok(())
    })
}

/// Replaces the threshold shift; it must be finite.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cc_classifier_set_tau(h: *mut CcClassifier, tau: f32) -> CcStatus {
    guard(|| {
        let h = h.as_mut().ok_or_else(|| fail(CcStatus::NullPointer, "classifier handle is null"))?;
        if !tau.is_finite() {
            return Err(fail(CcStatus::InvalidArgument, "tau must be finite"));
        }
        h.inner.set_tau(tau);
        Ok(())
    })
}

/// Predicted class (1 or 2) and shifted logit for `x[0..len]`. Either
/// output pointer may be null.
///
/// # Safety
/// `h` must be a live handle and `x` must point to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn cc_classifier_predict(
    h: *const CcClassifier,
    x: *const f32,
    len: usize,
    out_class: *mut u8,
    out_shifted_logit: *mut f32,
) -> CcStatus {
    guard(|| {
        let h = handle(h)?;
        let x = input(x, len)?;
        let s = lib(h.inner.shifted_logit(&x))?;
        if !out_class.is_null() {
            *out_class = convexcert::Class::from_shifted_logit(s).as_u8();
        }
        if !out_shifted_logit.is_null() {
            *out_shifted_logit = s;
        }
        Ok(())
    })
}

/// Certified radius of `x[0..len]` under the norm `norm` (`CC_NORM_*`).
/// Zero when the prediction is class 2, `+inf` for a flat network.
///
/// # Safety
/// `h` must be a live handle, `x` must point to `len` floats and
/// `out_radius` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_classifier_certify(
    h: *const CcClassifier,
    x: *const f32,
    len: usize,
    norm: u32,
    out_radius: *mut f64,
) -> CcStatus {
    guard(|| {
        let h = handle(h)?;
        let p = norm_of(norm)?;
        out_ptr(out_radius)?;
        let x = input(x, len)?;
        let cert = lib(h.inner.certify(&x, &[p]))?;
        *out_radius = cert.per_norm[0].radius;
        Ok(())
    })
}

/// Dual norm of `v[0..len]` for the primal norm `norm` (`CC_NORM_*`).
///
/// # Safety
/// `v` must point to `len` floats and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_dual_norm(v: *const f32, len: usize, norm: u32, out: *mut f64) -> CcStatus {
    guard(|| {
        let p = norm_of(norm)?;
        out_ptr(out)?;
        if v.is_null() && len > 0 {
            return Err(fail(CcStatus::NullPointer, "vector pointer is null"));
        }
        let v = if len == 0 { &[][..] } else { std::slice::from_raw_parts(v, len) };
        *out = p.dual_norm(v);
        Ok(())
    })
}

/// Lower bound on the probability that `m` and `n` random points in `d`
/// dimensions are convexly separable.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_separability_bound(m: usize, n: usize, d: usize, out: *mut f64) -> CcStatus {
    guard(|| {
        out_ptr(out)?;
        *out = lib(separability_bound(m, n, d))?;
        Ok(())
    })
}
