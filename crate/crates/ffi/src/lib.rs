//! C ABI for the nestwave core: dataset ingestion, wavelet transforms, and
//! the inflated-binomial log-pmfs. Handles are opaque pointers owned by Rust;
//! every fallible call returns a status code and stores a message retrievable
//! with [`nw_last_error`]. The matching header lives in `include/nestwave.h`.

use libc::c_char;
use std::cell::RefCell;
use std::ffi::{CStr, CString};

use nestwave::counts::HaulDataset;
use nestwave::dist::{zani_logpmf, zi_logpmf};
use nestwave::wavelet::{build_basis, WaveletBasis};

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn store_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Outcome of an FFI call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NwStatus {
    /// Call succeeded; output parameters are valid.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A size or numeric argument was out of range.
    InvalidArgument = 3,
    /// The operation itself failed; see [`nw_last_error`].
    Failed = 4,
}

fn fail(status: NwStatus, msg: impl Into<String>) -> NwStatus {
    store_error(msg.into());
    status
}

/// Haul count dataset handle.
pub struct NwDataset {
    inner: HaulDataset,
}

/// Orthonormal wavelet basis handle.
pub struct NwBasis {
    inner: WaveletBasis,
}

/// Shape of a loaded dataset.
#[repr(C)]
pub struct NwDatasetSummary {
    /// Number of haul records.
    pub hauls: usize,
    /// Number of count categories per record.
    pub categories: usize,
    /// Largest trip identifier.
    pub trips: usize,
    /// Largest quarter index.
    pub quarters: usize,
}

/// Message describing the most recent failure on this thread, or null if no
/// call has failed yet. The pointer stays valid until the next failing call
/// on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn nw_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Read a haul CSV (`trip,obs,quarter,<cat1>,...,<catK>`) into a new dataset.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// storage for one pointer. On success `*out` owns the dataset and must be
/// released with [`nw_dataset_free`]; on failure `*out` is untouched.
#[no_mangle]
pub unsafe extern "C" fn nw_dataset_read(
    path: *const c_char,
    out: *mut *mut NwDataset,
) -> NwStatus {
    if path.is_null() || out.is_null() {
        return fail(NwStatus::NullArgument, "nw_dataset_read: null argument");
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => return fail(NwStatus::InvalidUtf8, "nw_dataset_read: path is not UTF-8"),
    };
    match HaulDataset::read_csv_path(std::path::Path::new(path)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(NwDataset { inner }));
            NwStatus::Ok
        }
        Err(e) => fail(NwStatus::Failed, e.to_string()),
    }
}

/// Fill `out` with the dataset's dimensions.
///
/// # Safety
/// `dataset` must be a live handle from [`nw_dataset_read`] and `out` must
/// point to writable storage for one `NwDatasetSummary`.
#[no_mangle]
pub unsafe extern "C" fn nw_dataset_summary(
    dataset: *const NwDataset,
    out: *mut NwDatasetSummary,
) -> NwStatus {
    if dataset.is_null() || out.is_null() {
        return fail(NwStatus::NullArgument, "nw_dataset_summary: null argument");
    }
    let d = &(*dataset).inner;
    *out = NwDatasetSummary {
        hauls: d.len(),
        categories: d.k,
        trips: d.j_max,
        quarters: d.t_max,
    };
    NwStatus::Ok
}

/// Release a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle from [`nw_dataset_read`] that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn nw_dataset_free(dataset: *mut NwDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Build the periodic symmlet basis with `depth` detail levels (grid size
/// `2^depth`, depth between 2 and 12).
///
/// # Safety
/// `out` must point to writable storage for one pointer. On success `*out`
/// owns the basis and must be released with [`nw_basis_free`].
#[no_mangle]
pub unsafe extern "C" fn nw_basis_build(depth: usize, out: *mut *mut NwBasis) -> NwStatus {
    if out.is_null() {
        return fail(NwStatus::NullArgument, "nw_basis_build: null output");
    }
    match build_basis(depth) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(NwBasis { inner }));
            NwStatus::Ok
        }
        Err(e) => fail(NwStatus::Failed, e.to_string()),
    }
}

/// Grid size L of a basis, or 0 for a null handle.
///
/// # Safety
/// `basis` must be null or a live handle from [`nw_basis_build`].
#[no_mangle]
pub unsafe extern "C" fn nw_basis_len(basis: *const NwBasis) -> usize {
    if basis.is_null() {
        0
    } else {
        (*basis).inner.l
    }
}

/// Release a basis handle. Null is ignored.
///
/// # Safety
/// `basis` must be null or a handle from [`nw_basis_build`] that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn nw_basis_free(basis: *mut NwBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

unsafe fn transform(
    basis: *const NwBasis,
    x: *const f64,
    len: usize,
    out: *mut f64,
    inverse: bool,
) -> NwStatus {
    let name = if inverse { "nw_idwt" } else { "nw_dwt" };
    if basis.is_null() || x.is_null() || out.is_null() {
        return fail(NwStatus::NullArgument, format!("{name}: null argument"));
    }
    let b = &(*basis).inner;
    if len != b.l {
        return fail(
            NwStatus::InvalidArgument,
            format!("{name}: length {len} does not match grid size {}", b.l),
        );
    }
    let input = std::slice::from_raw_parts(x, len);
    let result = if inverse { b.idwt(input) } else { b.dwt(input) };
    match result {
        Ok(v) => {
            std::ptr::copy_nonoverlapping(v.as_ptr(), out, len);
            NwStatus::Ok
        }
        Err(e) => fail(NwStatus::Failed, e.to_string()),
    }
}

/// Forward wavelet transform of `len` values into `len` coefficients.
/// `len` must equal the basis grid size.
///
/// # Safety
/// `basis` must be a live handle; `x` and `out` must be valid for `len`
/// doubles each. `x` and `out` may alias only if identical.
#[no_mangle]
pub unsafe extern "C" fn nw_dwt(
    basis: *const NwBasis,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> NwStatus {
    transform(basis, x, len, out, false)
}

/// Inverse wavelet transform of `len` coefficients into `len` values.
/// `len` must equal the basis grid size.
///
/// # Safety
/// `basis` must be a live handle; `x` and `out` must be valid for `len`
/// doubles each. `x` and `out` may alias only if identical.
#[no_mangle]
pub unsafe extern "C" fn nw_idwt(
    basis: *const NwBasis,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> NwStatus {
    transform(basis, x, len, out, true)
}

/// Log-pmf of the zero-and-N-inflated binomial at count `y` of `n`, success
/// probability `p`, and inflation weights `lambda0`, `lambda_n` on the
/// log-odds scale (`-INFINITY` disables a spike).
///
/// # Safety
/// `out` must point to writable storage for one double.
#[no_mangle]
pub unsafe extern "C" fn nw_zani_logpmf(
    y: u64,
    n: u64,
    p: f64,
    lambda0: f64,
    lambda_n: f64,
    out: *mut f64,
) -> NwStatus {
    if out.is_null() {
        return fail(NwStatus::NullArgument, "nw_zani_logpmf: null output");
    }
    match zani_logpmf(y, n, p, lambda0, lambda_n) {
        Ok(v) => {
            *out = v;
            NwStatus::Ok
        }
        Err(e) => fail(NwStatus::Failed, e.to_string()),
    }
}

/// Log-pmf of the zero-inflated binomial at count `y` of `n`, success
/// probability `p`, and zero-spike weight `lambda0` on the log-odds scale.
///
/// # Safety
/// `out` must point to writable storage for one double.
#[no_mangle]
pub unsafe extern "C" fn nw_zi_logpmf(
    y: u64,
    n: u64,
    p: f64,
    lambda0: f64,
    out: *mut f64,
) -> NwStatus {
    if out.is_null() {
        return fail(NwStatus::NullArgument, "nw_zi_logpmf: null output");
    }
    match zi_logpmf(y, n, p, lambda0) {
        Ok(v) => {
            *out = v;
            NwStatus::Ok
        }
        Err(e) => fail(NwStatus::Failed, e.to_string()),
    }
}
