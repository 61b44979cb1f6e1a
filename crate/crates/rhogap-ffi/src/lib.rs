//! C ABI for the rhogap pipeline: fit the benchmark model from a JSON
//! experiment config and query its posterior. Handles are opaque, every
//! fallible call returns an [`RgStatus`], and the most recent error message
//! is kept per thread for [`rg_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use rhogap::config::ExperimentConfig;
use rhogap::gp::MultiOutputGp;
use rhogap::sim::{generate_training_data, latent_prior_for, ReferenceTrajectory};
use rhogap::Error;

/// Status codes for every fallible entry point. Values 2–4 match the CLI's
/// exit codes for the same failure classes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// Config rejected: parse failure, unknown key, or invalid value.
    InvalidConfig = 2,
    /// Gram factorization failed even after jitter escalation.
    Numerical = 3,
    /// An operation needed more samples than the dataset provides.
    InsufficientData = 4,
    /// Any other argument or domain error.
    InvalidArgument = 5,
    /// The callee panicked; the handle is untouched.
    Panic = 6,
}

/// Fitted multi-output model handle (opaque).
pub struct RgModel {
    inner: Arc<MultiOutputGp>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).ok();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

fn status_of(e: &Error) -> RgStatus {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Csv(_) => RgStatus::InvalidConfig,
        Error::NumericalConditioning { .. } => RgStatus::Numerical,
        Error::InsufficientData { .. } => RgStatus::InsufficientData,
        Error::InvalidArgument(_) | Error::Domain(_) => RgStatus::InvalidArgument,
    }
}

/// Runs `body` behind a panic guard, routing errors into the thread-local
/// message slot.
fn guarded(body: impl FnOnce() -> Result<RgStatus, Error> + std::panic::UnwindSafe) -> RgStatus {
    clear_error();
    match catch_unwind(body) {
        Ok(Ok(status)) => status,
        Ok(Err(e)) => {
            let status = status_of(&e);
            set_error(e.to_string());
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in rhogap".into());
            set_error(msg);
            RgStatus::Panic
        }
    }
}

fn build_model(json: &str) -> Result<RgModel, Error> {
    let cfg = ExperimentConfig::from_json(json, &[])?;
    let kernel = cfg.kernel()?;
    let prior = latent_prior_for(kernel.a())?;
    let reference = ReferenceTrajectory {
        c1: cfg.selection.c1,
        c2: cfg.selection.c2,
    };
    let noise = cfg.noise_matrix();
    let data = generate_training_data(
        cfg.sim.seed,
        cfg.sim.n_train,
        cfg.sim.t_end,
        cfg.sim.dt,
        &noise,
        reference,
    )?;
    let model = MultiOutputGp::fit(data, kernel, noise, prior)?;
    Ok(RgModel {
        inner: Arc::new(model),
    })
}

/// Parses a JSON experiment config, generates its training data, and fits
/// the full multi-output model. On success `*out` receives an owned handle.
///
/// # Safety
/// `config_json` must point to a NUL-terminated UTF-8 string and `out` must
/// be a valid writable pointer. A handle returned here must be released with
/// [`rg_model_free`] exactly once.
#[no_mangle]
pub unsafe extern "C" fn rg_model_fit(
    config_json: *const c_char,
    out: *mut *mut RgModel,
) -> RgStatus {
    if config_json.is_null() || out.is_null() {
        set_error("config_json and out must be non-NULL".into());
        return RgStatus::NullArgument;
    }
    let raw = CStr::from_ptr(config_json);
    guarded(AssertUnwindSafe(|| {
        let json = raw
            .to_str()
            .map_err(|_| Error::Config("config_json is not valid UTF-8".into()))?;
        let model = build_model(json)?;
        *out = Box::into_raw(Box::new(model));
        Ok(RgStatus::Ok)
    }))
}

/// Writes the model's state dimension and latent component count.
///
/// # Safety
/// All pointers must be valid; `model` must come from [`rg_model_fit`].
#[no_mangle]
pub unsafe extern "C" fn rg_model_dims(
    model: *const RgModel,
    state_dim: *mut usize,
    component_dim: *mut usize,
) -> RgStatus {
    if model.is_null() || state_dim.is_null() || component_dim.is_null() {
        set_error("model, state_dim, and component_dim must be non-NULL".into());
        return RgStatus::NullArgument;
    }
    let gp = &(*model).inner;
    *state_dim = gp.data().x_dim();
    *component_dim = gp.component_dim();
    RgStatus::Ok
}

unsafe fn gather_query(
    model: *const RgModel,
    x: *const f64,
    x_len: usize,
    u: *const f64,
    u_len: usize,
) -> Result<Vec<f64>, Error> {
    let gp = &(*model).inner;
    let (dx, du) = (gp.data().x_dim(), gp.data().u_dim());
    if x_len != dx || u_len != du {
        return Err(Error::invalid(format!(
            "query dims ({x_len}, {u_len}) do not match the model ({dx}, {du})"
        )));
    }
    let mut z = Vec::with_capacity(dx + du);
    z.extend_from_slice(std::slice::from_raw_parts(x, x_len));
    z.extend_from_slice(std::slice::from_raw_parts(u, u_len));
    Ok(z)
}

/// Posterior mean of the dynamics g(x, u), written to `out_mean`
/// (`state_dim` entries).
///
/// # Safety
/// `x`, `u`, and `out_mean` must point to arrays of the stated lengths;
/// `out_mean` must hold `state_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn rg_model_predict(
    model: *const RgModel,
    x: *const f64,
    x_len: usize,
    u: *const f64,
    u_len: usize,
    out_mean: *mut f64,
) -> RgStatus {
    if model.is_null() || x.is_null() || u.is_null() || out_mean.is_null() {
        set_error("model, x, u, and out_mean must be non-NULL".into());
        return RgStatus::NullArgument;
    }
    guarded(AssertUnwindSafe(|| {
        let z = gather_query(model, x, x_len, u, u_len)?;
        let gp = &(*model).inner;
        let mean = gp.posterior_mean_g(&z)?;
        std::ptr::copy_nonoverlapping(mean.as_slice().as_ptr(), out_mean, mean.len());
        Ok(RgStatus::Ok)
    }))
}

/// Posterior standard deviation of each latent component at (x, u), written
/// to `out_sd` (`component_dim` entries).
///
/// # Safety
/// Same contract as [`rg_model_predict`], with `out_sd` holding
/// `component_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn rg_model_component_sd(
    model: *const RgModel,
    x: *const f64,
    x_len: usize,
    u: *const f64,
    u_len: usize,
    out_sd: *mut f64,
) -> RgStatus {
    if model.is_null() || x.is_null() || u.is_null() || out_sd.is_null() {
        set_error("model, x, u, and out_sd must be non-NULL".into());
        return RgStatus::NullArgument;
    }
    guarded(AssertUnwindSafe(|| {
        let z = gather_query(model, x, x_len, u, u_len)?;
        let gp = &(*model).inner;
        let comps = gp.posterior_components(&z)?;
        for (i, c) in comps.iter().enumerate() {
            *out_sd.add(i) = c.std_dev();
        }
        Ok(RgStatus::Ok)
    }))
}

/// Releases a model handle. NULL is a no-op.
///
/// # Safety
/// `model` must be a handle from [`rg_model_fit`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rg_model_free(model: *mut RgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copies the calling thread's most recent error message into `buf`
/// (truncated, always NUL-terminated) and returns the full message length in
/// bytes, or 0 when no error is pending. Passing a NULL or empty buffer just
/// queries the length.
///
/// # Safety
/// `buf`, when non-NULL, must hold at least `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn rg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(msg) = slot.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
