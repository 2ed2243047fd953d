//! C interface to the dialogue service and the reference-based metrics.
//!
//! Every fallible function returns an [`AvemoStatus`]; on failure the message is available
//! from [`avemo_last_error`] on the same thread. Strings handed out by this library must be
//! released with [`avemo_string_free`]. Handles are not tied to a thread: an engine may be
//! used from several threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use avemo_core::eval::{bleu_n, meteor, rouge_l, tokenize, Matcher};
use avemo_core::service::{truncate_history, DialogueService, ServiceConfig, SessionOptions, TurnInput};
use avemo_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvemoStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Checkpoint = 4,
    InvalidMedia = 5,
    UnknownSession = 6,
    NotReady = 7,
    TurnTooLarge = 8,
    Timeout = 9,
    Internal = 10,
    Panic = 11,
}

/// Which metric [`avemo_metric`] computes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvemoMetric {
    Bleu1 = 0,
    Bleu2 = 1,
    Bleu3 = 2,
    Bleu4 = 3,
    RougeL = 4,
    Meteor = 5,
}

/// Opaque engine: one loaded checkpoint and its sessions.
pub struct AvemoEngine {
    service: DialogueService,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> AvemoStatus {
    match err {
        Error::Config(_) => AvemoStatus::Config,
        Error::Checkpoint(_) => AvemoStatus::Checkpoint,
        Error::UnknownSession(_) => AvemoStatus::UnknownSession,
        Error::ServerNotReady => AvemoStatus::NotReady,
        Error::TurnTooLarge { .. } => AvemoStatus::TurnTooLarge,
        Error::GenerationTimeout => AvemoStatus::Timeout,
        e if e.is_data_error() => AvemoStatus::InvalidMedia,
        _ => AvemoStatus::Internal,
    }
}

enum Failure {
    Status(AvemoStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AvemoStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvemoStatus::Ok,
        Ok(Err(Failure::Status(status, message))) => {
            set_last_error(message);
            status
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("panic inside avemo");
            AvemoStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(AvemoStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(AvemoStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn engine_ref<'a>(engine: *const AvemoEngine) -> Result<&'a AvemoEngine, Failure> {
    engine.as_ref().ok_or_else(|| null("engine"))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], Failure> {
    if p.is_null() {
        if len == 0 {
            return Ok(&[]);
        }
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure::Status(AvemoStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

fn json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string(value).map_err(|e| Failure::Core(e.into()))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn avemo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn avemo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn avemo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint directory. `config_json` holds service settings and may be null for
/// defaults.
///
/// # Safety
/// Pointer arguments must be valid; `out` receives a handle for [`avemo_engine_free`].
#[no_mangle]
pub unsafe extern "C" fn avemo_engine_open(
    checkpoint_dir: *const c_char,
    config_json: *const c_char,
    out: *mut *mut AvemoEngine,
) -> AvemoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = str_arg(checkpoint_dir, "checkpoint_dir")?;
        let config = match opt_str_arg(config_json, "config_json")? {
            Some(text) => serde_json::from_str::<ServiceConfig>(text)
                .map_err(|e| Failure::Status(AvemoStatus::Config, format!("service config: {e}")))?,
            None => ServiceConfig::default(),
        };
        let service = DialogueService::new(config)?;
        service.load_checkpoint(Path::new(dir))?;
        *out = Box::into_raw(Box::new(AvemoEngine { service }));
        Ok(())
    })
}

/// Releases an engine and all of its sessions. Null is ignored.
///
/// # Safety
/// `engine` must come from [`avemo_engine_open`] and no other thread may still use it.
#[no_mangle]
pub unsafe extern "C" fn avemo_engine_free(engine: *mut AvemoEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Health record as JSON: status and the checkpoint and prompt-set hashes.
///
/// # Safety
/// Pointer arguments must be valid.
#[no_mangle]
pub unsafe extern "C" fn avemo_engine_health(engine: *const AvemoEngine, out_json: *mut *mut c_char) -> AvemoStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        write_string(out_json, json(&e.service.health())?)
    })
}

/// Opens a session. `options_json` may be null for greedy decoding.
///
/// # Safety
/// Pointer arguments must be valid; the id in `out_id` is freed with [`avemo_string_free`].
#[no_mangle]
pub unsafe extern "C" fn avemo_session_create(
    engine: *const AvemoEngine,
    options_json: *const c_char,
    out_id: *mut *mut c_char,
) -> AvemoStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        if out_id.is_null() {
            return Err(null("out_id"));
        }
        let options = match opt_str_arg(options_json, "options_json")? {
            Some(text) => serde_json::from_str::<SessionOptions>(text)
                .map_err(|err| Failure::Status(AvemoStatus::Config, format!("session options: {err}")))?,
            None => SessionOptions::default(),
        };
        write_string(out_id, e.service.create_session(options)?)
    })
}

/// # Safety
/// Pointer arguments must be valid.
#[no_mangle]
pub unsafe extern "C" fn avemo_session_delete(engine: *const AvemoEngine, session_id: *const c_char) -> AvemoStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        e.service.delete_session(str_arg(session_id, "session_id")?)?;
        Ok(())
    })
}

/// Runs one turn. `wav` is 16-bit PCM WAV; `frames_tar` is a tar of PNG frames and may be
/// null for audio only; `transcript` may be null. On success `out_json` holds the reply
/// (emotion, text, round index, warnings). On failure the session is unchanged.
///
/// # Safety
/// Buffers must be readable for the given lengths; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn avemo_session_post_turn(
    engine: *const AvemoEngine,
    session_id: *const c_char,
    wav: *const u8,
    wav_len: usize,
    frames_tar: *const u8,
    frames_tar_len: usize,
    transcript: *const c_char,
    out_json: *mut *mut c_char,
) -> AvemoStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let id = str_arg(session_id, "session_id")?;
        let input = TurnInput {
            audio_wav: bytes_arg(wav, wav_len, "wav")?.to_vec(),
            video_archive: if frames_tar.is_null() {
                None
            } else {
                Some(bytes_arg(frames_tar, frames_tar_len, "frames_tar")?.to_vec())
            },
            transcript: opt_str_arg(transcript, "transcript")?.map(str::to_string),
        };
        let reply = e.service.post_turn(id, &input)?;
        write_string(out_json, json(&reply)?)
    })
}

/// Session history as JSON.
///
/// # Safety
/// Pointer arguments must be valid.
#[no_mangle]
pub unsafe extern "C" fn avemo_session_transcript(
    engine: *const AvemoEngine,
    session_id: *const c_char,
    out_json: *mut *mut c_char,
) -> AvemoStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let t = e.service.transcript(str_arg(session_id, "session_id")?)?;
        write_string(out_json, json(&t)?)
    })
}

/// Number of newest rounds kept under the context budget. The last entry of `round_tokens`
/// is the current round.
///
/// # Safety
/// `round_tokens` must be readable for `n` entries.
#[no_mangle]
pub unsafe extern "C" fn avemo_truncate_history(
    round_tokens: *const usize,
    n: usize,
    overhead: usize,
    reserve: usize,
    limit: usize,
    out_kept: *mut usize,
) -> AvemoStatus {
    guard(|| {
        if out_kept.is_null() {
            return Err(null("out_kept"));
        }
        let rounds = if n == 0 {
            &[][..]
        } else if round_tokens.is_null() {
            return Err(null("round_tokens"));
        } else {
            std::slice::from_raw_parts(round_tokens, n)
        };
        *out_kept = truncate_history(rounds, overhead, reserve, limit)?;
        Ok(())
    })
}

/// Scores one candidate against one reference after the shared metric tokenization.
///
/// # Safety
/// Pointer arguments must be valid.
#[no_mangle]
pub unsafe extern "C" fn avemo_metric(
    metric: AvemoMetric,
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> AvemoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c = tokenize(str_arg(candidate, "candidate")?);
        let r = tokenize(str_arg(reference, "reference")?);
        *out = match metric {
            AvemoMetric::Bleu1 => bleu_n(&c, std::slice::from_ref(&r), 1),
            AvemoMetric::Bleu2 => bleu_n(&c, std::slice::from_ref(&r), 2),
            AvemoMetric::Bleu3 => bleu_n(&c, std::slice::from_ref(&r), 3),
            AvemoMetric::Bleu4 => bleu_n(&c, std::slice::from_ref(&r), 4),
            AvemoMetric::RougeL => rouge_l(&c, &r),
            AvemoMetric::Meteor => meteor(&c, &r, Matcher::Exact),
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_reported() {
        let mut out = ptr::null_mut();
        let s = unsafe { avemo_engine_open(ptr::null(), ptr::null(), &mut out) };
        assert_eq!(s, AvemoStatus::NullArgument);
        assert!(out.is_null());
        let msg = unsafe { CStr::from_ptr(avemo_last_error()) }.to_str().unwrap();
        assert!(msg.contains("checkpoint_dir"));
    }

    #[test]
    fn success_clears_last_error() {
        let _ = unsafe { avemo_session_delete(ptr::null(), ptr::null()) };
        assert!(!avemo_last_error().is_null());
        let mut kept = 0usize;
        let sizes = [1200usize; 5];
        let s = unsafe { avemo_truncate_history(sizes.as_ptr(), 5, 0, 256, 4096, &mut kept) };
        assert_eq!(s, AvemoStatus::Ok);
        assert_eq!(kept, 3);
        assert!(avemo_last_error().is_null());
    }

    #[test]
    fn oversized_turn_maps_to_status() {
        let mut kept = 0usize;
        let sizes = [5000usize];
        let s = unsafe { avemo_truncate_history(sizes.as_ptr(), 1, 0, 256, 4096, &mut kept) };
        assert_eq!(s, AvemoStatus::TurnTooLarge);
    }

    #[test]
    fn metric_hand_values() {
        let c = CString::new("the cat sat on the mat").unwrap();
        let mut v = 0.0;
        let s = unsafe { avemo_metric(AvemoMetric::Bleu1, c.as_ptr(), c.as_ptr(), &mut v) };
        assert_eq!(s, AvemoStatus::Ok);
        assert_eq!(v, 1.0);
        let bad = [0xffu8, 0];
        let s = unsafe { avemo_metric(AvemoMetric::RougeL, bad.as_ptr().cast(), c.as_ptr(), &mut v) };
        assert_eq!(s, AvemoStatus::InvalidUtf8);
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(avemo_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
