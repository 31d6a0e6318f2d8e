//! C ABI over `circumplex-rl`.
//!
//! Every function returns a [`CrlStatus`]; results go through out-pointers.
//! On failure the message is available from [`crl_last_error_message`] on
//! the same thread. Models are opaque [`CrlModel`] handles released with
//! [`crl_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use circumplex_rl::affect::circumplex_reward_checked;
use circumplex_rl::checkpoint::load_checkpoint;
use circumplex_rl::lm::{PolicyModel, SampleOptions};
use circumplex_rl::ppo::{adapt_beta, shaped_reward};
use circumplex_rl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    NonFinite = 4,
    MissingFile = 5,
    Io = 6,
    Checkpoint = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

/// A loaded policy model.
pub struct CrlModel {
    model: PolicyModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let msg = CString::new(msg).unwrap_or_else(|_| CString::from(c"error message contained NUL"));
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> CrlStatus {
    match e {
        Error::InvalidArgument(_)
        | Error::EmptyPrompt
        | Error::EmptyResponse
        | Error::UnknownTokenId { .. }
        | Error::SequenceTooLong { .. } => CrlStatus::InvalidArgument,
        Error::OutOfRange(_) => CrlStatus::OutOfRange,
        Error::NonFinite(_) => CrlStatus::NonFinite,
        Error::MissingFile(_) => CrlStatus::MissingFile,
        Error::Io(_) => CrlStatus::Io,
        Error::Checkpoint(_) | Error::Config(_) => CrlStatus::Checkpoint,
        _ => CrlStatus::Internal,
    }
}

struct Failure(CrlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CrlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside circumplex-rl");
            CrlStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CrlStatus::NullPointer, format!("{what} is null"))
}

fn finite(name: &str, x: f64) -> Result<f64, Failure> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Failure(CrlStatus::NonFinite, format!("{name} is {x}")))
    }
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

unsafe fn tokens<'a>(ptr: *const usize, len: usize, what: &str) -> Result<&'a [usize], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn model<'a>(handle: *const CrlModel) -> Result<&'a PolicyModel, Failure> {
    handle
        .as_ref()
        .map(|h| &h.model)
        .ok_or_else(|| null("model handle"))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn crl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Signed distance of an affect point from neutral: the sign of the valence
/// times the point's norm. Both coordinates must lie in [-1, 1].
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn crl_circumplex_reward(
    arousal: f64,
    valence: f64,
    out: *mut f64,
) -> CrlStatus {
    guard(|| {
        let r =
            circumplex_reward_checked(finite("arousal", arousal)?, finite("valence", valence)?)?;
        write(out, r)
    })
}

/// Reward minus `beta` times the log-probability ratio of policy to reference.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn crl_shaped_reward(
    reward: f64,
    logp_policy: f64,
    logp_ref: f64,
    beta: f64,
    out: *mut f64,
) -> CrlStatus {
    guard(|| {
        let r = shaped_reward(
            finite("reward", reward)?,
            logp_policy,
            logp_ref,
            finite("beta", beta)?,
        )?;
        write(out, r)
    })
}

/// Next KL coefficient: halved below the target band, doubled above it.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn crl_adapt_beta(
    beta: f64,
    measured_kl: f64,
    kl_target: f64,
    out: *mut f64,
) -> CrlStatus {
    guard(|| {
        let beta = finite("beta", beta)?;
        let kl = finite("measured_kl", measured_kl)?;
        let target = finite("kl_target", kl_target)?;
        if beta <= 0.0 || target <= 0.0 {
            return Err(Failure(
                CrlStatus::InvalidArgument,
                format!("beta and kl_target must be positive, got {beta} and {target}"),
            ));
        }
        write(out, adapt_beta(beta, kl, target))
    })
}

/// Load a model checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crl_model_load(path: *const c_char, out: *mut *mut CrlModel) -> CrlStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(CrlStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
        let model = load_checkpoint(Path::new(path))?;
        out.write(Box::into_raw(Box::new(CrlModel { model })));
        Ok(())
    })
}

/// Release a handle from [`crl_model_load`]. NULL is ignored.
///
/// # Safety
/// `handle` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crl_model_free(handle: *mut CrlModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crl_model_vocab_size(
    handle: *const CrlModel,
    out: *mut usize,
) -> CrlStatus {
    guard(|| write(out, model(handle)?.config().vocab_size))
}

/// # Safety
/// `handle` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crl_model_max_seq_len(
    handle: *const CrlModel,
    out: *mut usize,
) -> CrlStatus {
    guard(|| write(out, model(handle)?.config().max_seq_len))
}

/// Log-probability of `response` following `prompt`.
///
/// # Safety
/// `handle` must be a live handle, the token arrays must hold the given
/// number of elements and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crl_model_sequence_log_prob(
    handle: *const CrlModel,
    prompt: *const usize,
    prompt_len: usize,
    response: *const usize,
    response_len: usize,
    out: *mut f64,
) -> CrlStatus {
    guard(|| {
        let m = model(handle)?;
        let lp = m.sequence_log_prob(
            tokens(prompt, prompt_len, "prompt")?,
            tokens(response, response_len, "response")?,
        )?;
        write(out, lp)
    })
}

/// Sample up to `max_new` tokens after `prompt`. A temperature of 0 decodes
/// greedily. Writes the response into `out_tokens` and its length into
/// `out_len`; if `capacity` is too small, only `out_len` is written and
/// `CRL_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `handle` must be a live handle, `prompt` must hold `prompt_len`
/// elements, `out_tokens` must hold `capacity` elements and `out_len` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crl_model_generate(
    handle: *const CrlModel,
    prompt: *const usize,
    prompt_len: usize,
    max_new: usize,
    temperature: f64,
    seed: u64,
    out_tokens: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> CrlStatus {
    guard(|| {
        let m = model(handle)?;
        let opts = SampleOptions {
            max_new,
            temperature,
            top_k: m.config().vocab_size,
        };
        let response = m.generate(tokens(prompt, prompt_len, "prompt")?, &opts, seed)?;
        write(out_len, response.len())?;
        if response.len() > capacity {
            return Err(Failure(
                CrlStatus::BufferTooSmall,
                format!(
                    "response has {} tokens, buffer holds {capacity}",
                    response.len()
                ),
            ));
        }
        if !response.is_empty() {
            if out_tokens.is_null() {
                return Err(null("output buffer"));
            }
            ptr::copy_nonoverlapping(response.as_ptr(), out_tokens, response.len());
        }
        Ok(())
    })
}
