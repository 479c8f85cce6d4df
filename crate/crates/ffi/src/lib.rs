//! C ABI over the conflab tables, validity oracles and the IID decomposition.
//!
//! Tables cross the boundary as opaque [`ConflabTable`] handles that the caller
//! releases with [`conflab_table_free`]. Every fallible call returns a
//! [`ConflabStatus`]; on failure a description is available from
//! [`conflab_last_error_message`] until the next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use conflab::oracle::{check_class, check_e_exchangeable, check_e_iid, ClassLabel};
use conflab::universality::decompose;
use conflab::{CheckReport, FnTable, LabError, ObservationSpace, Tolerances};

/// Result codes; zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Malformed = 3,
    Dimension = 4,
    BudgetExceeded = 5,
    InvalidArgument = 6,
    /// Input failed a precondition oracle (e.g. not an IID e-variable).
    CheckFailed = 7,
    Io = 8,
    Panic = 9,
}

/// Opaque table handle.
pub struct ConflabTable {
    inner: FnTable,
}

/// Oracle verdict, see the library's `CheckReport`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflabCheck {
    pub ok: bool,
    pub worst_value: f64,
    pub bound: f64,
    pub tolerance: f64,
    /// False when the IID search did not settle; `worst_value` is then a lower bound.
    pub converged: bool,
}

impl From<&CheckReport> for ConflabCheck {
    fn from(r: &CheckReport) -> Self {
        Self { ok: r.ok, worst_value: r.worst_value, bound: r.bound, tolerance: r.tolerance, converged: r.converged }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &LabError) -> ConflabStatus {
    match err {
        LabError::BudgetExceeded { .. } => ConflabStatus::BudgetExceeded,
        LabError::Dimension(_) | LabError::LengthMismatch { .. } => ConflabStatus::Dimension,
        LabError::Malformed(_) | LabError::Json(_) => ConflabStatus::Malformed,
        LabError::StageFailed { .. } => ConflabStatus::CheckFailed,
        LabError::Io(_) => ConflabStatus::Io,
        _ => ConflabStatus::InvalidArgument,
    }
}

struct Failure(ConflabStatus, String);

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(ConflabStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ConflabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ConflabStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside conflab".into());
            ConflabStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| Failure(ConflabStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn table_arg<'a>(t: *const ConflabTable) -> Result<&'a FnTable, Failure> {
    t.as_ref().map(|t| &t.inner).ok_or_else(|| null("table"))
}

fn into_handle(t: FnTable) -> *mut ConflabTable {
    Box::into_raw(Box::new(ConflabTable { inner: t }))
}

/// Parses a table from its JSON form (`{"space": .., "n": .., "values": [..]}`, `"inf"` for infinity).
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn conflab_table_from_json(json: *const c_char, out: *mut *mut ConflabTable) -> ConflabStatus {
    guard(|| {
        let s = str_arg(json, "json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = into_handle(FnTable::from_json(s)?);
        Ok(())
    })
}

/// Reads a table from a JSON file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn conflab_table_load(path: *const c_char, out: *mut *mut ConflabTable) -> ConflabStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = std::fs::read_to_string(p).map_err(LabError::from)?;
        *out = into_handle(FnTable::from_json(&text)?);
        Ok(())
    })
}

/// Builds a table over `x_card x y_card` with training length `n` from `len` values in
/// row-major order (position 0 most significant). `len` must equal `(x_card y_card)^(n+1)`.
///
/// # Safety
/// `values` must point to `len` readable doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn conflab_table_from_values(
    x_card: usize,
    y_card: usize,
    n: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut ConflabTable,
) -> ConflabStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let space = ObservationSpace::new(x_card, y_card)?;
        let v = std::slice::from_raw_parts(values, len).to_vec();
        *out = into_handle(FnTable::from_values(space, n, v)?);
        Ok(())
    })
}

/// Number of entries, or 0 for a null handle.
///
/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn conflab_table_len(table: *const ConflabTable) -> usize {
    table.as_ref().map_or(0, |t| t.inner.len())
}

/// Copies the entries into `buf`, which must hold `conflab_table_len` doubles.
///
/// # Safety
/// `table` must be a live handle and `buf` must point to `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn conflab_table_values(table: *const ConflabTable, buf: *mut f64, cap: usize) -> ConflabStatus {
    guard(|| {
        let t = table_arg(table)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if cap < t.len() {
            return Err(Failure(ConflabStatus::Dimension, format!("buffer holds {cap} values, table has {}", t.len())));
        }
        ptr::copy_nonoverlapping(t.values().as_ptr(), buf, t.len());
        Ok(())
    })
}

/// Serializes a table; release the string with [`conflab_string_free`].
///
/// # Safety
/// `table` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn conflab_table_to_json(table: *const ConflabTable, out: *mut *mut c_char) -> ConflabStatus {
    guard(|| {
        let t = table_arg(table)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = CString::new(t.to_json()?).expect("json has no nul");
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn conflab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `table` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn conflab_table_free(table: *mut ConflabTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// IID e-variable check: `sup_Q E_Q[table] <= 1 + tol`.
///
/// # Safety
/// `table` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn conflab_check_e_iid(table: *const ConflabTable, tol: f64, out: *mut ConflabCheck) -> ConflabStatus {
    guard(|| {
        let t = table_arg(table)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = (&check_e_iid(t, tol)).into();
        Ok(())
    })
}

/// Exchangeability e-variable check: every orbit mean at most `1 + tol`.
///
/// # Safety
/// `table` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn conflab_check_e_exchangeable(
    table: *const ConflabTable,
    tol: f64,
    out: *mut ConflabCheck,
) -> ConflabStatus {
    guard(|| {
        let t = table_arg(table)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = (&check_e_exchangeable(t, tol)).into();
        Ok(())
    })
}

/// Membership check for a class named as on the command line (`ER`, `PtX`, `TestCondEX`, ...).
///
/// # Safety
/// `table` must be a live handle, `class` a nul-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn conflab_check_class(
    table: *const ConflabTable,
    class: *const c_char,
    tol_exch: f64,
    tol_iid: f64,
    out: *mut ConflabCheck,
) -> ConflabStatus {
    guard(|| {
        let t = table_arg(table)?;
        let name = str_arg(class, "class")?;
        let class: ClassLabel = name.parse()?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = (&check_class(t, class, Tolerances { exch: tol_exch, iid: tol_iid })).into();
        Ok(())
    })
}

/// Splits an IID e-variable into an exchangeability factor and a fully invariant
/// IID factor. Fails with `CheckFailed` when the input is not an IID e-variable.
///
/// # Safety
/// `table` must be a live handle; `out_exch` and `out_invariant` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn conflab_decompose(
    table: *const ConflabTable,
    tol_iid: f64,
    out_exch: *mut *mut ConflabTable,
    out_invariant: *mut *mut ConflabTable,
) -> ConflabStatus {
    guard(|| {
        let t = table_arg(table)?;
        if out_exch.is_null() || out_invariant.is_null() {
            return Err(null("output"));
        }
        let d = decompose(t, Tolerances { iid: tol_iid, ..Tolerances::default() })?;
        *out_exch = into_handle(d.exch);
        *out_invariant = into_handle(d.invariant);
        Ok(())
    })
}

/// Message for the most recent failure on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn conflab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn conflab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
