//! C ABI over the laboratory: opaque handles, integer status codes,
//! and a thread-local last-error message.
//!
//! Every fallible function returns a `CcaStatus`; on any non-Ok status
//! the thread's error text is available through `cca_last_error` until
//! the next call on the same thread. Handles are created and destroyed
//! strictly through this interface, one `*_free` per successful
//! constructor output.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::c_char;

use cca_lab::config::parse_config_or_error;
use cca_lab::error::Error;
use cca_lab::eval::{evaluate_policy, model_policy};
use cca_lab::model::TabularArModel;
use cca_lab::oracle::{SpecFamily, TrueDistributionSpec};
use cca_lab::pipeline::{run_pipeline, Stage};
use cca_lab::rng::from_seed;
use cca_lab::space::{SequenceSpace, Token};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcaStatus {
    CcaOk = 0,
    /// A required pointer argument was null.
    CcaNullArgument = 1,
    /// An argument failed validation.
    CcaInvalidArgument = 2,
    /// The operation is undefined for these values.
    CcaDomainError = 3,
    /// A numeric invariant was violated.
    CcaNumericError = 4,
    /// The filesystem refused.
    CcaIoError = 5,
    /// A file exists but does not parse.
    CcaFormatError = 6,
    /// The request exceeds the enumeration budget.
    CcaBudgetExceeded = 7,
    /// The configuration is invalid.
    CcaConfigError = 8,
    /// An internal invariant failed; the handle set is unchanged.
    CcaPanicked = 9,
}

/// Opaque handle to a true distribution with its oracles.
pub struct CcaSpec {
    inner: TrueDistributionSpec,
}

/// Opaque handle to a tabular autoregressive model.
pub struct CcaModel {
    inner: TabularArModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|cell| *cell.borrow_mut() = text);
}

fn clear_error() {
    LAST_ERROR.with(|cell| *cell.borrow_mut() = CString::default());
}

fn status_of(error: &Error) -> CcaStatus {
    match error {
        Error::Config(_) => CcaStatus::CcaConfigError,
        Error::Input(_) => CcaStatus::CcaInvalidArgument,
        Error::Domain(_) => CcaStatus::CcaDomainError,
        Error::Numeric(_) => CcaStatus::CcaNumericError,
        Error::BudgetExceeded { .. } => CcaStatus::CcaBudgetExceeded,
        Error::Io { .. } => CcaStatus::CcaIoError,
        Error::Format { .. } => CcaStatus::CcaFormatError,
    }
}

/// Run a fallible body with panic containment and error capture.
fn guarded(body: impl FnOnce() -> Result<(), Error>) -> CcaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CcaStatus::CcaOk,
        Ok(Err(error)) => {
            let status = status_of(&error);
            set_error(error.to_string());
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {message}"));
            CcaStatus::CcaPanicked
        }
    }
}

fn null_argument(name: &str) -> CcaStatus {
    set_error(format!("{name} must not be null"));
    CcaStatus::CcaNullArgument
}

/// # Safety
/// `text` must be a valid NUL-terminated string.
unsafe fn utf8_argument(name: &str, text: *const c_char) -> Result<String, Error> {
    CStr::from_ptr(text)
        .to_str()
        .map(|s| s.to_string())
        .map_err(|_| Error::Input(format!("{name} is not valid UTF-8")))
}

/// Message describing the most recent failure on this thread. Valid
/// until the next call into this library from the same thread; empty
/// string when the last call succeeded.
#[no_mangle]
pub extern "C" fn cca_last_error() -> *const c_char {
    LAST_ERROR.with(|cell| cell.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Generate a true distribution. `family` is one of "random-dirichlet",
/// "needle", "independent". On success `*out_spec` owns the new handle.
///
/// # Safety
/// `family` must be NUL-terminated; `out_spec` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cca_spec_generate(
    family: *const c_char,
    vocab_size: usize,
    seq_len: usize,
    num_conditions: usize,
    concentration: f64,
    seed: u64,
    out_spec: *mut *mut CcaSpec,
) -> CcaStatus {
    if family.is_null() {
        return null_argument("family");
    }
    if out_spec.is_null() {
        return null_argument("out_spec");
    }
    guarded(|| {
        let family = SpecFamily::parse(&utf8_argument("family", family)?)?;
        let space = SequenceSpace::new(vocab_size, seq_len, num_conditions)?;
        let spec = TrueDistributionSpec::generate(family, space, concentration, seed)?;
        *out_spec = Box::into_raw(Box::new(CcaSpec { inner: spec }));
        Ok(())
    })
}

/// Load a spec from its text format.
///
/// # Safety
/// `path` must be NUL-terminated; `out_spec` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cca_spec_load(
    path: *const c_char,
    out_spec: *mut *mut CcaSpec,
) -> CcaStatus {
    if path.is_null() {
        return null_argument("path");
    }
    if out_spec.is_null() {
        return null_argument("out_spec");
    }
    guarded(|| {
        let path = utf8_argument("path", path)?;
        let spec = TrueDistributionSpec::load(Path::new(&path))?;
        *out_spec = Box::into_raw(Box::new(CcaSpec { inner: spec }));
        Ok(())
    })
}

/// Save a spec to its text format (atomic write).
///
/// # Safety
/// `spec` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cca_spec_save(spec: *const CcaSpec, path: *const c_char) -> CcaStatus {
    if spec.is_null() {
        return null_argument("spec");
    }
    if path.is_null() {
        return null_argument("path");
    }
    guarded(|| {
        let path = utf8_argument("path", path)?;
        (*spec).inner.save(Path::new(&path))
    })
}

/// Release a spec handle. Null is a no-op.
///
/// # Safety
/// `spec` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cca_spec_free(spec: *mut CcaSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Dimensions of the spec's sequence space. Null outputs are skipped.
///
/// # Safety
/// `spec` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn cca_spec_dims(
    spec: *const CcaSpec,
    out_vocab_size: *mut usize,
    out_seq_len: *mut usize,
    out_num_conditions: *mut usize,
) -> CcaStatus {
    if spec.is_null() {
        return null_argument("spec");
    }
    guarded(|| {
        let space = (*spec).inner.space();
        if !out_vocab_size.is_null() {
            *out_vocab_size = space.vocab_size();
        }
        if !out_seq_len.is_null() {
            *out_seq_len = space.seq_len();
        }
        if !out_num_conditions.is_null() {
            *out_num_conditions = space.num_conditions();
        }
        Ok(())
    })
}

/// Materialize the oracle-exact model of a spec: condition rows hold
/// the true conditionals, the mask row holds the true marginal.
///
/// # Safety
/// `spec` must be a live handle; `out_model` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cca_spec_exact_model(
    spec: *const CcaSpec,
    out_model: *mut *mut CcaModel,
) -> CcaStatus {
    if spec.is_null() {
        return null_argument("spec");
    }
    if out_model.is_null() {
        return null_argument("out_model");
    }
    guarded(|| {
        let model = (*spec).inner.exact_model()?;
        *out_model = Box::into_raw(Box::new(CcaModel { inner: model }));
        Ok(())
    })
}

/// Create a uniform model over the given space.
///
/// # Safety
/// `out_model` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cca_model_uniform(
    vocab_size: usize,
    seq_len: usize,
    num_conditions: usize,
    out_model: *mut *mut CcaModel,
) -> CcaStatus {
    if out_model.is_null() {
        return null_argument("out_model");
    }
    guarded(|| {
        let space = SequenceSpace::new(vocab_size, seq_len, num_conditions)?;
        *out_model = Box::into_raw(Box::new(CcaModel {
            inner: TabularArModel::uniform(space),
        }));
        Ok(())
    })
}

/// Load a model from its text format.
///
/// # Safety
/// `path` must be NUL-terminated; `out_model` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cca_model_load(
    path: *const c_char,
    out_model: *mut *mut CcaModel,
) -> CcaStatus {
    if path.is_null() {
        return null_argument("path");
    }
    if out_model.is_null() {
        return null_argument("out_model");
    }
    guarded(|| {
        let path = utf8_argument("path", path)?;
        let model = TabularArModel::load(Path::new(&path))?;
        *out_model = Box::into_raw(Box::new(CcaModel { inner: model }));
        Ok(())
    })
}

/// Save a model to its text format (atomic write).
///
/// # Safety
/// `model` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cca_model_save(
    model: *const CcaModel,
    path: *const c_char,
) -> CcaStatus {
    if model.is_null() {
        return null_argument("model");
    }
    if path.is_null() {
        return null_argument("path");
    }
    guarded(|| {
        let path = utf8_argument("path", path)?;
        (*model).inner.save(Path::new(&path))
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cca_model_free(model: *mut CcaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Log-probability of a token sequence under one condition row. Pass
/// the mask row index (num_conditions) for the unconditional model.
///
/// # Safety
/// `model` must be a live handle; `tokens` must point at `len` tokens;
/// `out_log_prob` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cca_model_log_prob(
    model: *const CcaModel,
    condition: usize,
    tokens: *const Token,
    len: usize,
    out_log_prob: *mut f64,
) -> CcaStatus {
    if model.is_null() {
        return null_argument("model");
    }
    if tokens.is_null() {
        return null_argument("tokens");
    }
    if out_log_prob.is_null() {
        return null_argument("out_log_prob");
    }
    guarded(|| {
        let tokens = std::slice::from_raw_parts(tokens, len);
        *out_log_prob = (*model).inner.log_prob(condition, tokens)?;
        Ok(())
    })
}

/// Draw one sequence from a condition row into `out_tokens`, which must
/// hold at least seq_len tokens. Identical seeds reproduce the draw.
///
/// # Safety
/// `model` must be a live handle; `out_tokens` must point at `capacity`
/// writable tokens.
#[no_mangle]
pub unsafe extern "C" fn cca_model_sample(
    model: *const CcaModel,
    condition: usize,
    seed: u64,
    out_tokens: *mut Token,
    capacity: usize,
) -> CcaStatus {
    if model.is_null() {
        return null_argument("model");
    }
    if out_tokens.is_null() {
        return null_argument("out_tokens");
    }
    guarded(|| {
        let seq_len = (*model).inner.space().seq_len();
        if capacity < seq_len {
            return Err(Error::Input(format!(
                "output buffer holds {capacity} tokens, sequence needs {seq_len}"
            )));
        }
        let mut rng = from_seed(seed);
        let tokens = (*model).inner.sample_sequence(condition, &mut rng)?;
        std::slice::from_raw_parts_mut(out_tokens, seq_len).copy_from_slice(&tokens);
        Ok(())
    })
}

/// Condition-averaged KL divergence from the model's conditional rows
/// to the spec's sharpened target at `scale`.
///
/// # Safety
/// `model` and `spec` must be live handles; `out_kl` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cca_model_kl_to_target(
    model: *const CcaModel,
    spec: *const CcaSpec,
    scale: f64,
    out_kl: *mut f64,
) -> CcaStatus {
    if model.is_null() {
        return null_argument("model");
    }
    if spec.is_null() {
        return null_argument("spec");
    }
    if out_kl.is_null() {
        return null_argument("out_kl");
    }
    guarded(|| {
        let policy = model_policy(&(*model).inner, &(*spec).inner)?;
        let evaluation = evaluate_policy(&policy, &(*spec).inner, scale)?;
        *out_kl = evaluation.kl_to_target;
        Ok(())
    })
}

/// Parse a config text and run the full pipeline it describes. Artifacts
/// land in the config's output directory; rerunning resumes.
///
/// # Safety
/// `config_text` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cca_run_pipeline(config_text: *const c_char) -> CcaStatus {
    if config_text.is_null() {
        return null_argument("config_text");
    }
    guarded(|| {
        let text = utf8_argument("config_text", config_text)?;
        let config = parse_config_or_error(&text)?;
        run_pipeline(&config, Stage::Sweep)?;
        Ok(())
    })
}
