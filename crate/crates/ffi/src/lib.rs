//! C ABI over `alpha_pooling`.
//!
//! Every fallible function returns an [`AlphaPoolStatus`]. On failure a
//! message is stored per thread and can be read with
//! [`alpha_pool_last_error_message`]. Handles are opaque and must be released
//! with their matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use alpha_pooling::alphapool::PoolConfig;
use alpha_pooling::dualclf::DualClassifier;
use alpha_pooling::featio::{read_fmap, FeatureMap};
use alpha_pooling::kernelview::{descriptor, dot, GramBackend};
use alpha_pooling::sketch::{make_plan, SketchPlan};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaPoolStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Compute = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Pooling parameters; see `alpha_pool_default_config`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaPoolConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub signed_sqrt: bool,
    pub l2_normalize: bool,
}

impl From<AlphaPoolConfig> for PoolConfig {
    fn from(c: AlphaPoolConfig) -> Self {
        PoolConfig {
            alpha: c.alpha,
            epsilon: c.epsilon,
            signed_sqrt: c.signed_sqrt,
            l2_normalize: c.l2_normalize,
        }
    }
}

pub struct AlphaPoolFeatureMap {
    inner: FeatureMap,
}

pub struct AlphaPoolSketchPlan {
    inner: SketchPlan,
}

pub struct AlphaPoolClassifier {
    inner: DualClassifier,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type Failure = (AlphaPoolStatus, String);

fn fail<T>(status: AlphaPoolStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err((status, msg.into()))
}

fn compute(e: impl std::fmt::Display) -> Failure {
    (AlphaPoolStatus::Compute, e.to_string())
}

/// Runs `f`, records any failure and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AlphaPoolStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AlphaPoolStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AlphaPoolStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: caller passes either null or a live handle from this library
    unsafe { p.as_ref() }.ok_or_else(|| (AlphaPoolStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return fail(AlphaPoolStatus::NullPointer, "path is null");
    }
    // SAFETY: non-null, caller guarantees a NUL-terminated string
    let s = unsafe { CStr::from_ptr(p) };
    match s.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(AlphaPoolStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(AlphaPoolStatus::NullPointer, "output handle pointer is null");
    }
    // SAFETY: out is non-null and points to writable storage for a pointer
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn alpha_pool_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Alpha 1.5, epsilon 1e-4, signed square root and L2 normalization on.
#[no_mangle]
pub extern "C" fn alpha_pool_default_config() -> AlphaPoolConfig {
    let c = PoolConfig::default();
    AlphaPoolConfig {
        alpha: c.alpha,
        epsilon: c.epsilon,
        signed_sqrt: c.signed_sqrt,
        l2_normalize: c.l2_normalize,
    }
}

/// Reads an FMAP1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_fmap_read(path: *const c_char, out: *mut *mut AlphaPoolFeatureMap) -> AlphaPoolStatus {
    guard(|| {
        // SAFETY: forwarded from the caller's contract
        let p = unsafe { path_arg(path)? };
        let fm = read_fmap(&p).map_err(|e| match e {
            alpha_pooling::featio::FmapError::Io { .. } => (AlphaPoolStatus::Io, e.to_string()),
            other => (AlphaPoolStatus::Format, other.to_string()),
        })?;
        store(out, AlphaPoolFeatureMap { inner: fm })
    })
}

/// Parses FMAP1 bytes.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_fmap_from_buffer(bytes: *const u8, len: usize, out: *mut *mut AlphaPoolFeatureMap) -> AlphaPoolStatus {
    guard(|| {
        if bytes.is_null() {
            return fail(AlphaPoolStatus::NullPointer, "buffer is null");
        }
        // SAFETY: caller guarantees `len` readable bytes
        let data = unsafe { std::slice::from_raw_parts(bytes, len) };
        let fm = FeatureMap::from_bytes(data).map_err(|e| (AlphaPoolStatus::Format, e.to_string()))?;
        store(out, AlphaPoolFeatureMap { inner: fm })
    })
}

/// Builds a single-scale map from `height * width * dim` row-major values.
///
/// # Safety
/// `image_id` must be NUL-terminated (or NULL for an empty id), `values` must
/// hold `height * width * dim` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_fmap_from_values(
    image_id: *const c_char,
    height: usize,
    width: usize,
    dim: usize,
    values: *const f64,
    out: *mut *mut AlphaPoolFeatureMap,
) -> AlphaPoolStatus {
    guard(|| {
        let id = if image_id.is_null() {
            String::new()
        } else {
            // SAFETY: non-null, NUL-terminated per contract
            match unsafe { CStr::from_ptr(image_id) }.to_str() {
                Ok(s) => s.to_string(),
                Err(_) => return fail(AlphaPoolStatus::InvalidArgument, "image id is not valid UTF-8"),
            }
        };
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(dim))
            .ok_or((AlphaPoolStatus::InvalidArgument, "map size overflows".to_string()))?;
        if values.is_null() {
            return fail(AlphaPoolStatus::NullPointer, "values is null");
        }
        // SAFETY: caller guarantees n readable doubles
        let v = unsafe { std::slice::from_raw_parts(values, n) }.to_vec();
        let fm = FeatureMap::single(id, height, width, dim, v).map_err(|e| (AlphaPoolStatus::InvalidArgument, e.to_string()))?;
        store(out, AlphaPoolFeatureMap { inner: fm })
    })
}

/// Feature dimension D, or 0 for NULL.
///
/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_fmap_dim(map: *const AlphaPoolFeatureMap) -> usize {
    // SAFETY: NULL or live handle per contract
    unsafe { map.as_ref() }.map_or(0, |m| m.inner.dim())
}

/// Number of locations over all scales, or 0 for NULL.
///
/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_fmap_location_count(map: *const AlphaPoolFeatureMap) -> usize {
    // SAFETY: NULL or live handle per contract
    unsafe { map.as_ref() }.map_or(0, |m| m.inner.location_count())
}

/// # Safety
/// `map` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_fmap_free(map: *mut AlphaPoolFeatureMap) {
    if !map.is_null() {
        // SAFETY: created by Box::into_raw in this library, freed once
        drop(unsafe { Box::from_raw(map) });
    }
}

/// Tensor-sketch plan from `input_dim` to `sketch_dim` values.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_sketch_plan_new(input_dim: usize, sketch_dim: usize, seed: u64, out: *mut *mut AlphaPoolSketchPlan) -> AlphaPoolStatus {
    guard(|| {
        let plan = make_plan(input_dim, sketch_dim, seed).map_err(|e| (AlphaPoolStatus::InvalidArgument, e.to_string()))?;
        store(out, AlphaPoolSketchPlan { inner: plan })
    })
}

/// # Safety
/// `plan` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_sketch_plan_free(plan: *mut AlphaPoolSketchPlan) {
    if !plan.is_null() {
        // SAFETY: created by Box::into_raw in this library, freed once
        drop(unsafe { Box::from_raw(plan) });
    }
}

unsafe fn backend(plan: *const AlphaPoolSketchPlan) -> GramBackend {
    // SAFETY: NULL or live handle per caller contract
    match unsafe { plan.as_ref() } {
        Some(p) => GramBackend::Sketch(p.inner.clone()),
        None => GramBackend::Exact,
    }
}

/// Post-normalized descriptor of `map`: `D*D` values, or the sketch length
/// when `plan` is non-NULL. `*written` receives the length. With a NULL or too
/// short `out` the call only reports the length and returns
/// `ALPHA_POOL_STATUS_BUFFER_TOO_SMALL` (NULL `out` with `out_len` 0 is a size query).
///
/// # Safety
/// `map` must be a live handle, `plan` NULL or a live handle, `out` NULL or
/// `out_len` writable doubles, and `written` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_pool(
    map: *const AlphaPoolFeatureMap,
    config: AlphaPoolConfig,
    plan: *const AlphaPoolSketchPlan,
    out: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> AlphaPoolStatus {
    guard(|| {
        // SAFETY: forwarded from the caller's contract
        let m = unsafe { as_ref(map, "map")? };
        if written.is_null() {
            return fail(AlphaPoolStatus::NullPointer, "written is null");
        }
        let cfg: PoolConfig = config.into();
        cfg.validate().map_err(|e| (AlphaPoolStatus::InvalidArgument, e.to_string()))?;
        // SAFETY: forwarded from the caller's contract
        let v = descriptor(&m.inner, &cfg, &unsafe { backend(plan) }).map_err(compute)?;
        // SAFETY: written is non-null
        unsafe { *written = v.len() };
        if out.is_null() || out_len < v.len() {
            return fail(AlphaPoolStatus::BufferTooSmall, format!("descriptor needs {} values, buffer holds {out_len}", v.len()));
        }
        // SAFETY: out holds at least v.len() doubles
        unsafe { ptr::copy_nonoverlapping(v.as_ptr(), out, v.len()) };
        Ok(())
    })
}

/// Kernel between the post-normalized descriptors of two maps.
///
/// # Safety
/// `a` and `b` must be live handles, `plan` NULL or a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_kernel(
    a: *const AlphaPoolFeatureMap,
    b: *const AlphaPoolFeatureMap,
    config: AlphaPoolConfig,
    plan: *const AlphaPoolSketchPlan,
    out: *mut f64,
) -> AlphaPoolStatus {
    guard(|| {
        // SAFETY: forwarded from the caller's contract
        let (a, b) = unsafe { (as_ref(a, "a")?, as_ref(b, "b")?) };
        if out.is_null() {
            return fail(AlphaPoolStatus::NullPointer, "out is null");
        }
        if a.inner.dim() != b.inner.dim() {
            return fail(AlphaPoolStatus::InvalidArgument, format!("dimensions differ ({} vs {})", a.inner.dim(), b.inner.dim()));
        }
        let cfg: PoolConfig = config.into();
        cfg.validate().map_err(|e| (AlphaPoolStatus::InvalidArgument, e.to_string()))?;
        // SAFETY: forwarded from the caller's contract
        let be = unsafe { backend(plan) };
        let za = descriptor(&a.inner, &cfg, &be).map_err(compute)?;
        let zb = descriptor(&b.inner, &cfg, &be).map_err(compute)?;
        // SAFETY: out is non-null
        unsafe { *out = dot(&za, &zb) };
        Ok(())
    })
}

/// Loads a classifier artifact written by `alpha-pool train`.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_classifier_read(path: *const c_char, out: *mut *mut AlphaPoolClassifier) -> AlphaPoolStatus {
    guard(|| {
        // SAFETY: forwarded from the caller's contract
        let p = unsafe { path_arg(path)? };
        let clf = DualClassifier::read(&p).map_err(|e| match e {
            alpha_pooling::dualclf::DualError::Io(_) => (AlphaPoolStatus::Io, format!("{}: {e}", p.display())),
            other => (AlphaPoolStatus::Format, format!("{}: {other}", p.display())),
        })?;
        store(out, AlphaPoolClassifier { inner: clf })
    })
}

/// # Safety
/// `clf` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_classifier_class_count(clf: *const AlphaPoolClassifier) -> usize {
    // SAFETY: NULL or live handle per contract
    unsafe { clf.as_ref() }.map_or(0, |c| c.inner.class_count())
}

/// # Safety
/// `clf` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_classifier_train_count(clf: *const AlphaPoolClassifier) -> usize {
    // SAFETY: NULL or live handle per contract
    unsafe { clf.as_ref() }.map_or(0, |c| c.inner.train_count())
}

/// Class scores for one kernel row (kernel of the query against every
/// training image, in training order).
///
/// # Safety
/// `clf` must be a live handle, `kernel_row` hold `row_len` doubles and
/// `scores` have room for `scores_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_classifier_score(
    clf: *const AlphaPoolClassifier,
    kernel_row: *const f64,
    row_len: usize,
    scores: *mut f64,
    scores_len: usize,
) -> AlphaPoolStatus {
    guard(|| {
        // SAFETY: forwarded from the caller's contract
        let c = unsafe { as_ref(clf, "classifier")? };
        if kernel_row.is_null() || scores.is_null() {
            return fail(AlphaPoolStatus::NullPointer, "kernel row or scores is null");
        }
        // SAFETY: caller guarantees row_len readable doubles
        let row = unsafe { std::slice::from_raw_parts(kernel_row, row_len) };
        let s = c.inner.score(row).map_err(|e| (AlphaPoolStatus::InvalidArgument, e.to_string()))?;
        if scores_len < s.len() {
            return fail(AlphaPoolStatus::BufferTooSmall, format!("{} scores, buffer holds {scores_len}", s.len()));
        }
        // SAFETY: scores holds at least s.len() doubles
        unsafe { ptr::copy_nonoverlapping(s.as_ptr(), scores, s.len()) };
        Ok(())
    })
}

/// # Safety
/// `clf` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn alpha_pool_classifier_free(clf: *mut AlphaPoolClassifier) {
    if !clf.is_null() {
        // SAFETY: created by Box::into_raw in this library, freed once
        drop(unsafe { Box::from_raw(clf) });
    }
}
