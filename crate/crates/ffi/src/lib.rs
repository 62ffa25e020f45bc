//! C ABI over the `hdphmm` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style constructors and released with the matching `*_free`. Every fallible
//! call returns an [`HdphmmStatus`]; on failure the message is available from
//! [`hdphmm_last_error`] on the same thread until the next failing call.
//! Count and probability buffers are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hdphmm::cli::{fit_model, FitMethod, Fitted};
use hdphmm::data::{load_counts, CountFormat, CountMatrix};
use hdphmm::eval::{baseline_predictive_ll, baseline_rates, bits_per_spike};
use hdphmm::gibbs::GibbsConfig;
use hdphmm::rng::RngHandle;
use hdphmm::synth::{generate, Dataset, SimConfig};
use hdphmm::vb::VbConfig;
use hdphmm::Error;
use serde::Deserialize;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HdphmmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Invalid argument, configuration or data.
    Invalid = 2,
    /// Numerical failure during inference.
    Numerical = 3,
    /// File missing or unreadable.
    Io = 4,
    /// Caller buffer too small; the needed length was written to the length argument.
    BufferTooSmall = 5,
    /// Internal panic caught at the boundary.
    Panic = 6,
}

/// A spike-count matrix, cells by bins.
pub struct HdphmmCounts(CountMatrix);

/// A synthetic dataset with its generating path.
pub struct HdphmmDataset(Dataset);

/// A fitted model: posterior samples or variational factors.
pub struct HdphmmFit(Fitted);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HdphmmStatus {
    match e.exit_code() {
        3 => HdphmmStatus::Numerical,
        4 => HdphmmStatus::Io,
        _ => HdphmmStatus::Invalid,
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), HdphmmStatusError>) -> HdphmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HdphmmStatus::Ok,
        Ok(Err(HdphmmStatusError(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            HdphmmStatus::Panic
        }
    }
}

struct HdphmmStatusError(HdphmmStatus, String);

impl From<Error> for HdphmmStatusError {
    fn from(e: Error) -> Self {
        Self(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> HdphmmStatusError {
    HdphmmStatusError(HdphmmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> HdphmmStatusError {
    HdphmmStatusError(HdphmmStatus::Invalid, msg.into())
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, HdphmmStatusError> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, HdphmmStatusError> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), HdphmmStatusError> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copy `src` into a caller buffer of `*len` elements, or report the needed
/// length through `len`.
unsafe fn fill<T: Copy>(src: &[T], buf: *mut T, len: *mut usize) -> Result<(), HdphmmStatusError> {
    if len.is_null() {
        return Err(null("len"));
    }
    let cap = *len;
    *len = src.len();
    if cap < src.len() {
        return Err(HdphmmStatusError(
            HdphmmStatus::BufferTooSmall,
            format!("buffer holds {cap} values, {} needed", src.len()),
        ));
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Message of the last failing call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hdphmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hdphmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a count matrix from `n_cells * n_bins` row-major values.
///
/// # Safety
/// `data` must point to `n_cells * n_bins` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_counts_new(data: *const u64, n_cells: usize, n_bins: usize, out: *mut *mut HdphmmCounts) -> HdphmmStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = n_cells.checked_mul(n_bins).ok_or_else(|| invalid("matrix size overflows"))?;
        let values = std::slice::from_raw_parts(data, n);
        let rows = values.chunks(n_bins.max(1)).take(n_cells).map(<[u64]>::to_vec).collect();
        put(out, HdphmmCounts(CountMatrix::from_rows(rows)?), "out")
    })
}

/// Load a count matrix from a CSV file (`cell_id,t0,t1,...`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_counts_load_csv(path: *const c_char, out: *mut *mut HdphmmCounts) -> HdphmmStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        put(out, HdphmmCounts(load_counts(path, CountFormat::Csv)?), "out")
    })
}

/// Bins `[start, end)` as a new matrix.
///
/// # Safety
/// `counts` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_counts_slice(counts: *const HdphmmCounts, start: usize, end: usize, out: *mut *mut HdphmmCounts) -> HdphmmStatus {
    guard(|| {
        let c = borrow(counts, "counts")?;
        if start >= end || end > c.0.n_bins() {
            return Err(invalid(format!("bin range {start}..{end} invalid for {} bins", c.0.n_bins())));
        }
        put(out, HdphmmCounts(c.0.columns(start..end)?), "out")
    })
}

/// # Safety
/// `counts` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_counts_shape(counts: *const HdphmmCounts, n_cells: *mut usize, n_bins: *mut usize) -> HdphmmStatus {
    guard(|| {
        let c = borrow(counts, "counts")?;
        if n_cells.is_null() || n_bins.is_null() {
            return Err(null("shape output"));
        }
        *n_cells = c.0.n_cells();
        *n_bins = c.0.n_bins();
        Ok(())
    })
}

/// Copy the counts out, row-major. On entry `*len` is the buffer capacity.
///
/// # Safety
/// `buf` must hold `*len` values.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_counts_data(counts: *const HdphmmCounts, buf: *mut u64, len: *mut usize) -> HdphmmStatus {
    guard(|| {
        let c = borrow(counts, "counts")?;
        let flat: Vec<u64> = c.0.rows().flatten().copied().collect();
        fill(&flat, buf, len)
    })
}

/// # Safety
/// `counts` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_counts_free(counts: *mut HdphmmCounts) {
    if !counts.is_null() {
        drop(Box::from_raw(counts));
    }
}

/// Simulate a dataset from a JSON generator configuration; `"{}"` gives the
/// defaults.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_simulate(config_json: *const c_char, seed: u64, out: *mut *mut HdphmmDataset) -> HdphmmStatus {
    guard(|| {
        let mut config: SimConfig = serde_json::from_str(c_str(config_json, "config_json")?).map_err(|e| invalid(e.to_string()))?;
        config.seed = seed;
        config.validate()?;
        put(out, HdphmmDataset(generate(&config)?), "out")
    })
}

/// A copy of the dataset's counts as a new handle.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_dataset_counts(dataset: *const HdphmmDataset, out: *mut *mut HdphmmCounts) -> HdphmmStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        put(out, HdphmmCounts(d.0.counts.clone()), "out")
    })
}

/// The generating state path, one label per bin.
///
/// # Safety
/// `buf` must hold `*len` values.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_dataset_states(dataset: *const HdphmmDataset, buf: *mut usize, len: *mut usize) -> HdphmmStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        fill(d.0.truth.states.as_slice(), buf, len)
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_dataset_free(dataset: *mut HdphmmDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitOptions {
    gibbs: GibbsConfig,
    vb: VbConfig,
    n_keep: Option<usize>,
}

/// Fit `counts` with `method` (`mcmc-hmc`, `mcmc-eb`, `vb`, `hmm-mcmc` or
/// `hmm-vb`). `options_json` may be null or hold `gibbs`, `vb` and `n_keep`
/// settings.
///
/// # Safety
/// `counts` must be a live handle; strings must be NUL-terminated or null
/// where allowed; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_fit(
    counts: *const HdphmmCounts,
    method: *const c_char,
    options_json: *const c_char,
    seed: u64,
    out: *mut *mut HdphmmFit,
) -> HdphmmStatus {
    guard(|| {
        let c = borrow(counts, "counts")?;
        let name = c_str(method, "method")?;
        let method: FitMethod =
            serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| invalid(format!("unknown method {name:?}")))?;
        let options: FitOptions = if options_json.is_null() {
            FitOptions::default()
        } else {
            serde_json::from_str(c_str(options_json, "options_json")?).map_err(|e| invalid(e.to_string()))?
        };
        let fitted = fit_model(&c.0, method, &options.gibbs, &options.vb, options.n_keep.unwrap_or(50), seed)?;
        put(out, HdphmmFit(fitted), "out")
    })
}

/// Truncation level of the fitted model.
///
/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_fit_n_states(fit: *const HdphmmFit, out: *mut usize) -> HdphmmStatus {
    guard(|| {
        let f = borrow(fit, "fit")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = f.0.n_states();
        Ok(())
    })
}

/// Predictive log-likelihood of `test`, without the `ln y!` constants.
/// Variational fits average over `vb_draws` parameter draws seeded by `seed`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_fit_predictive_ll(
    fit: *const HdphmmFit,
    test: *const HdphmmCounts,
    vb_draws: usize,
    seed: u64,
    out: *mut f64,
) -> HdphmmStatus {
    guard(|| {
        let f = borrow(fit, "fit")?;
        let t = borrow(test, "test")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = f.0.predictive_ll(&t.0, vb_draws, &mut RngHandle::new(seed))?;
        Ok(())
    })
}

/// Posterior state probabilities of `counts`, bins by states, row-major.
///
/// # Safety
/// Handles must be live; `buf` must hold `*len` values.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_fit_state_marginals(fit: *const HdphmmFit, counts: *const HdphmmCounts, buf: *mut f64, len: *mut usize) -> HdphmmStatus {
    guard(|| {
        let f = borrow(fit, "fit")?;
        let c = borrow(counts, "counts")?;
        let m = f.0.marginals(&c.0)?;
        fill(m.as_slice(), buf, len)
    })
}

/// Predictive gain over a homogeneous Poisson fit to `train`, in bits per
/// test spike.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_bits_per_spike(train: *const HdphmmCounts, test: *const HdphmmCounts, model_ll: f64, out: *mut f64) -> HdphmmStatus {
    guard(|| {
        let tr = borrow(train, "train")?;
        let te = borrow(test, "test")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let base = baseline_predictive_ll(&te.0, &baseline_rates(&tr.0)?)?;
        *out = bits_per_spike(model_ll, base, &te.0)?;
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hdphmm_fit_free(fit: *mut HdphmmFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}
