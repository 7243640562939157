//! C ABI over `latentlab`.
//!
//! Every fallible function returns an [`LlStatus`]; on failure a message is
//! kept per thread and can be read with [`ll_last_error`]. Strings returned
//! through out-pointers are owned by the caller and released with
//! [`ll_string_free`]. Handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use latentlab::flow::FlowStack;
use latentlab::geometry::{emd, EmbeddingBag};
use latentlab::metrics::{self, FactorDataset, MetricsConfig};
use latentlab::vae::VaeModel;
use latentlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Data = 4,
    Config = 5,
    Numeric = 6,
    Checkpoint = 7,
    Io = 8,
    Panic = 9,
}

/// Opaque VAE handle.
pub struct LlVae {
    model: VaeModel,
}

/// Opaque flow handle.
pub struct LlFlow {
    stack: FlowStack,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Data(_) | Error::Tensor(_) => LlStatus::Data,
            Error::Config { .. } => LlStatus::Config,
            Error::Numeric(_) => LlStatus::Numeric,
            Error::Checkpoint(_) | Error::Json(_) => LlStatus::Checkpoint,
            Error::Io(_) => LlStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(LlStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(LlStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure(LlStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure(LlStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(LlStatus::NullPointer, format!("`{name}` is null")))
}

fn check_len(got: usize, want: usize, name: &str) -> Result<(), Failure> {
    if got == want {
        Ok(())
    } else {
        Err(Failure(LlStatus::InvalidArgument, format!("`{name}` has length {got}, expected {want}")))
    }
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(LlStatus::NullPointer, "output pointer is null".into()));
    }
    let c = CString::new(s).map_err(|_| Failure(LlStatus::Data, "result contains a NUL byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ll_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the next
/// call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ll_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn ll_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ll_vae_load(path: *const c_char, out: *mut *mut LlVae) -> LlStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure(LlStatus::NullPointer, "`out` is null".into()));
        }
        let model = VaeModel::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(LlVae { model }));
        Ok(())
    })
}

/// # Safety
/// `vae` must be null or a handle from [`ll_vae_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ll_vae_free(vae: *mut LlVae) {
    if !vae.is_null() {
        drop(Box::from_raw(vae));
    }
}

/// Latent dimension, or 0 for a null handle.
///
/// # Safety
/// `vae` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ll_vae_latent_dim(vae: *const LlVae) -> usize {
    vae.as_ref().map_or(0, |v| v.model.latent_dim())
}

/// Posterior mean and log-variance of `text`; both buffers hold `len`
/// values, which must equal the latent dimension. `log_var` may be null.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ll_vae_encode(vae: *const LlVae, text: *const c_char, mu: *mut f64, log_var: *mut f64, len: usize) -> LlStatus {
    guard(|| {
        let vae = handle(vae, "vae")?;
        let text = str_arg(text, "text")?;
        check_len(len, vae.model.latent_dim(), "len")?;
        let post = vae.model.encode_text(text)?;
        out_slice(mu, len, "mu")?.copy_from_slice(&post.mu);
        if !log_var.is_null() {
            out_slice(log_var, len, "log_var")?.copy_from_slice(&post.log_var);
        }
        Ok(())
    })
}

/// Greedy decoding of latent `z` (`len` values).
///
/// # Safety
/// `z` must hold `len` values; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ll_vae_decode(vae: *const LlVae, z: *const f64, len: usize, out: *mut *mut c_char) -> LlStatus {
    guard(|| {
        let vae = handle(vae, "vae")?;
        let z = slice_arg(z, len, "z")?;
        check_len(len, vae.model.latent_dim(), "len")?;
        write_string(out, vae.model.generate_text(z)?)
    })
}

/// Encode then decode `text`.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ll_vae_reconstruct(vae: *const LlVae, text: *const c_char, out: *mut *mut c_char) -> LlStatus {
    guard(|| {
        let vae = handle(vae, "vae")?;
        let text = str_arg(text, "text")?;
        write_string(out, vae.model.reconstruct(text)?)
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ll_flow_load(path: *const c_char, out: *mut *mut LlFlow) -> LlStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure(LlStatus::NullPointer, "`out` is null".into()));
        }
        let stack = FlowStack::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(LlFlow { stack }));
        Ok(())
    })
}

/// # Safety
/// `flow` must be null or a handle from [`ll_flow_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ll_flow_free(flow: *mut LlFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

/// Dimension of the flow, or 0 for a null handle.
///
/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ll_flow_dim(flow: *const LlFlow) -> usize {
    flow.as_ref().map_or(0, |f| f.stack.dim())
}

/// `z = f(x)` and `log|det ∂f/∂x|`; `logdet` may be null.
///
/// # Safety
/// `x` and `z` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ll_flow_forward(flow: *const LlFlow, x: *const f64, z: *mut f64, len: usize, logdet: *mut f64) -> LlStatus {
    guard(|| {
        let flow = handle(flow, "flow")?;
        check_len(len, flow.stack.dim(), "len")?;
        let (y, ld) = flow.stack.forward(slice_arg(x, len, "x")?)?;
        out_slice(z, len, "z")?.copy_from_slice(&y);
        if !logdet.is_null() {
            *logdet = ld;
        }
        Ok(())
    })
}

/// `x = f⁻¹(z)`.
///
/// # Safety
/// `z` and `x` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ll_flow_inverse(flow: *const LlFlow, z: *const f64, x: *mut f64, len: usize) -> LlStatus {
    guard(|| {
        let flow = handle(flow, "flow")?;
        check_len(len, flow.stack.dim(), "len")?;
        let back = flow.stack.inverse(slice_arg(z, len, "z")?)?;
        out_slice(x, len, "x")?.copy_from_slice(&back);
        Ok(())
    })
}

unsafe fn bag(points: *const f64, weights: *const f64, n: usize, dim: usize, name: &str) -> Result<EmbeddingBag, Failure> {
    let flat = slice_arg(points, n * dim, name)?;
    let w = slice_arg(weights, n, name)?;
    Ok(EmbeddingBag::new(flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect(), w.to_vec())?)
}

/// Exact earth mover's distance between two weighted point sets with
/// Euclidean ground cost. Points are row-major `[n, dim]`.
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn ll_emd(
    points_a: *const f64,
    weights_a: *const f64,
    n: usize,
    points_b: *const f64,
    weights_b: *const f64,
    m: usize,
    dim: usize,
    out: *mut f64,
) -> LlStatus {
    guard(|| {
        if dim == 0 {
            return Err(Failure(LlStatus::InvalidArgument, "`dim` must be positive".into()));
        }
        let a = bag(points_a, weights_a, n, dim, "a")?;
        let b = bag(points_b, weights_b, m, dim, "b")?;
        let d = emd(&a, &b)?;
        *out_slice(out, 1, "out")?.first_mut().unwrap() = d;
        Ok(())
    })
}

/// Sentence BLEU (orders up to 4) over whitespace tokens.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ll_bleu(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> LlStatus {
    guard(|| {
        let c = str_arg(candidate, "candidate")?;
        let r = str_arg(reference, "reference")?;
        *out_slice(out, 1, "out")?.first_mut().unwrap() = latentlab::eval::bleu_text(c, r);
        Ok(())
    })
}

/// Every disentanglement metric on a TSV dataset (`z*` and `f*` columns)
/// with default settings and the given seed; the report is JSON.
///
/// # Safety
/// `tsv` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ll_metrics_tsv(tsv: *const c_char, seed: u64, out: *mut *mut c_char) -> LlStatus {
    guard(|| {
        let data = FactorDataset::from_tsv(str_arg(tsv, "tsv")?)?;
        let config = MetricsConfig { seed, ..MetricsConfig::default() };
        let report = metrics::evaluate(&data, &config, metrics::threads_from_env()?)?;
        let json = serde_json::to_string(&report).map_err(|e| Failure(LlStatus::Data, e.to_string()))?;
        write_string(out, json)
    })
}
