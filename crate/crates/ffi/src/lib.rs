// SPDX-License-Identifier: Apache-2.0

//! C ABI over a single in-process [`Engine`].
//!
//! Every fallible function returns an [`MsStatus`]. On failure the message is
//! kept per thread and can be fetched with [`ms_last_error_message`].
//! Strings returned to the caller are owned by the caller and must be
//! released with [`ms_string_free`]. Engines are opaque: create them with
//! [`ms_engine_new`] and release them with [`ms_engine_free`].
//!
//! Structured requests (`prep_recv`, `remote_send`) and responses travel as
//! JSON with the same schema as the HTTP API. Tokens, step reports and send
//! completions use plain C structs.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use microserve::engine::api::{ApiError, ErrorCode, FinishStatus, PrepRecvRequest, RemoteSendRequest, StartGenerateRequest};
use microserve::engine::{Engine, EngineConfig, EngineEvent, OutgoingFrame};
use microserve::toymodel::{ModelConfig, ToyModel, Token};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    BufferTooSmall = 4,
    OutOfPages = 10,
    MissingKv = 11,
    AddrMismatch = 12,
    PeerUnreachable = 13,
    BadRequest = 14,
    DuplicateRequest = 15,
    UnknownRequest = 16,
    TransferFailed = 17,
    Aborted = 18,
    Internal = 19,
    Panic = 99,
}

impl From<ErrorCode> for MsStatus {
    fn from(code: ErrorCode) -> Self {
        match code {
            ErrorCode::OutOfPages => MsStatus::OutOfPages,
            ErrorCode::MissingKv => MsStatus::MissingKv,
            ErrorCode::AddrMismatch => MsStatus::AddrMismatch,
            ErrorCode::PeerUnreachable => MsStatus::PeerUnreachable,
            ErrorCode::BadRequest => MsStatus::BadRequest,
            ErrorCode::DuplicateRequest => MsStatus::DuplicateRequest,
            ErrorCode::UnknownRequest => MsStatus::UnknownRequest,
            ErrorCode::TransferFailed => MsStatus::TransferFailed,
            ErrorCode::Aborted => MsStatus::Aborted,
            ErrorCode::Internal => MsStatus::Internal,
        }
    }
}

/// One generated token. `finished` is set on the last event of a stream;
/// `status` is nonzero when the stream ended with an error.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsTokenEvent {
    pub request_id: u64,
    pub index: usize,
    pub token: u32,
    pub t_ms: f64,
    pub finished: bool,
    pub aborted: bool,
    pub status: MsStatus,
}

/// Completion of a `remote_send`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsSendDone {
    pub request_id: u64,
    pub t_ms: f64,
    pub status: MsStatus,
}

/// Summary of one engine step.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MsStepReport {
    pub start_ms: f64,
    pub end_ms: f64,
    pub layer_ms: f64,
    pub prefill_tokens: usize,
    pub decode_seqs: usize,
}

/// Opaque engine handle.
pub struct MsEngine {
    engine: Engine,
    tokens: VecDeque<MsTokenEvent>,
    sends: VecDeque<MsSendDone>,
    outbox: Vec<OutgoingFrame>,
}

impl MsEngine {
    fn absorb(&mut self) {
        for ev in self.engine.take_events() {
            match ev {
                EngineEvent::Token(t) => self.tokens.push_back(MsTokenEvent {
                    request_id: t.request_id,
                    index: t.index,
                    token: t.token,
                    t_ms: t.t_ms,
                    finished: t.finish.is_some(),
                    aborted: t.finish == Some(FinishStatus::Aborted),
                    status: t.error.map_or(MsStatus::Ok, |e| e.code.into()),
                }),
                EngineEvent::SendDone { request_id, t_ms, result } => self.sends.push_back(MsSendDone {
                    request_id,
                    t_ms,
                    status: result.err().map_or(MsStatus::Ok, |e| e.code.into()),
                }),
                EngineEvent::ContextReady { .. } => {}
            }
        }
        self.outbox.extend(self.engine.take_outgoing());
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(MsStatus, String);

impl From<ApiError> for Fail {
    fn from(e: ApiError) -> Self {
        Fail(e.code.into(), e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(MsStatus::InvalidJson, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside microserve");
            MsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MsStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(MsStatus::InvalidUtf8, format!("{what}: {e}")))
}

/// # Safety
/// `p` is null or valid for `len` reads.
unsafe fn tokens<'a>(p: *const u32, len: usize) -> Result<&'a [Token], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null("prompt"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `e` is null or a live handle from [`ms_engine_new`].
unsafe fn engine<'a>(e: *mut MsEngine) -> Result<&'a mut MsEngine, Fail> {
    e.as_mut().ok_or_else(|| null("engine"))
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|e| Fail(MsStatus::Internal, e.to_string()))?;
    // SAFETY: checked non-null above; the caller provides writable storage.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ms_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread, or returns NULL when the
/// last call succeeded. Free the result with [`ms_string_free`].
#[no_mangle]
pub extern "C" fn ms_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().clone().map_or(ptr::null_mut(), CString::into_raw))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` is NULL or a string returned by this library that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an engine from a JSON [`EngineConfig`]; missing fields take
/// their defaults, so `"{}"` is valid. Writes the handle to `*out`.
///
/// # Safety
/// `config_json` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_new(config_json: *const c_char, out: *mut *mut MsEngine) -> MsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut config: EngineConfig = serde_json::from_str(text(config_json, "config_json")?)?;
        config.any_peer = true;
        let handle = Box::new(MsEngine {
            engine: Engine::new(config)?,
            tokens: VecDeque::new(),
            sends: VecDeque::new(),
            outbox: Vec::new(),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Destroys an engine. Passing NULL is a no-op.
///
/// # Safety
/// `e` is NULL or a handle from [`ms_engine_new`] that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_free(e: *mut MsEngine) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Reserves receive slots. `request_json` is a `prep_recv` request and the
/// response JSON (with `kv_addr_info`) is written to `*response_json`.
///
/// # Safety
/// `e` is a live handle, `request_json` a NUL-terminated string and
/// `response_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_prep_recv(
    e: *mut MsEngine,
    request_json: *const c_char,
    now_ms: f64,
    response_json: *mut *mut c_char,
) -> MsStatus {
    guard(|| {
        let e = engine(e)?;
        let req: PrepRecvRequest = serde_json::from_str(text(request_json, "request_json")?)?;
        let resp = e.engine.prep_recv(req, now_ms);
        e.absorb();
        give_string(serde_json::to_string(&resp?)?, response_json)
    })
}

/// Queues a `remote_send`. Its completion is reported by
/// [`ms_engine_poll_sends`] once every layer write was delivered with
/// [`ms_engine_deliver`].
///
/// # Safety
/// `e` is a live handle, `request_json` a NUL-terminated string and
/// `request_id` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_remote_send(
    e: *mut MsEngine,
    request_json: *const c_char,
    now_ms: f64,
    request_id: *mut u64,
) -> MsStatus {
    guard(|| {
        let e = engine(e)?;
        let req: RemoteSendRequest = serde_json::from_str(text(request_json, "request_json")?)?;
        let id = e.engine.remote_send(req, now_ms);
        e.absorb();
        let id = id?;
        if !request_id.is_null() {
            *request_id = id;
        }
        Ok(())
    })
}

/// Starts a generation over `prompt[0..len]`. `begin` is 0 to prefill from
/// the local cache, or -1 when the prompt KV was received with
/// `prep_recv`. `request_id` is an input when `*request_id` is nonzero and
/// receives the assigned id.
///
/// # Safety
/// `e` is a live handle, `prompt` valid for `len` reads and `request_id`
/// NULL or readable and writable.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_start_generate(
    e: *mut MsEngine,
    prompt: *const u32,
    len: usize,
    begin: i64,
    max_tokens: usize,
    now_ms: f64,
    request_id: *mut u64,
) -> MsStatus {
    guard(|| {
        let e = engine(e)?;
        let given = request_id.as_ref().copied().filter(|&id| id != 0);
        let req = StartGenerateRequest {
            request_id: given,
            prompt: tokens(prompt, len)?.to_vec(),
            begin,
            max_tokens,
        };
        let id = e.engine.start_generate(req, now_ms);
        e.absorb();
        let id = id?;
        if !request_id.is_null() {
            *request_id = id;
        }
        Ok(())
    })
}

/// Runs one batch step at `now_ms`. Sets `*stepped` to false when the
/// engine had nothing to do; otherwise fills `*report`.
///
/// # Safety
/// `e` is a live handle; `report` and `stepped` are writable.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_step(
    e: *mut MsEngine,
    now_ms: f64,
    report: *mut MsStepReport,
    stepped: *mut bool,
) -> MsStatus {
    guard(|| {
        let e = engine(e)?;
        if report.is_null() || stepped.is_null() {
            return Err(null("report"));
        }
        let r = e.engine.step(now_ms);
        e.absorb();
        *stepped = r.is_some();
        if let Some(r) = r {
            *report = MsStepReport {
                start_ms: r.start_ms,
                end_ms: r.end_ms,
                layer_ms: r.layer_ms,
                prefill_tokens: r.prefill_tokens,
                decode_seqs: r.decode_seqs,
            };
        }
        Ok(())
    })
}

/// True when queued or running work remains.
///
/// # Safety
/// `e` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_has_work(e: *const MsEngine) -> bool {
    e.as_ref().is_some_and(|e| e.engine.has_work())
}

/// Moves up to `cap` buffered token events into `buf` and returns how many
/// were written.
///
/// # Safety
/// `e` is a live handle and `buf` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_poll_tokens(e: *mut MsEngine, buf: *mut MsTokenEvent, cap: usize) -> usize {
    let Some(e) = e.as_mut() else { return 0 };
    if buf.is_null() {
        return 0;
    }
    let n = cap.min(e.tokens.len());
    for (i, ev) in e.tokens.drain(..n).enumerate() {
        buf.add(i).write(ev);
    }
    n
}

/// Moves up to `cap` send completions into `buf` and returns how many were
/// written.
///
/// # Safety
/// `e` is a live handle and `buf` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_poll_sends(e: *mut MsEngine, buf: *mut MsSendDone, cap: usize) -> usize {
    let Some(e) = e.as_mut() else { return 0 };
    if buf.is_null() {
        return 0;
    }
    let n = cap.min(e.sends.len());
    for (i, ev) in e.sends.drain(..n).enumerate() {
        buf.add(i).write(ev);
    }
    n
}

/// Delivers every layer write of `from` whose KV is ready by `now_ms` into
/// `to`, acknowledges it on `from` and returns the number delivered in
/// `*delivered`. Writes that are not ready yet stay queued.
///
/// # Safety
/// `from` and `to` are distinct live handles; `delivered` is NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_deliver(
    from: *mut MsEngine,
    to: *mut MsEngine,
    now_ms: f64,
    delivered: *mut usize,
) -> MsStatus {
    guard(|| {
        if ptr::eq(from, to) {
            return Err(Fail(MsStatus::BadRequest, "sender and receiver are the same engine".into()));
        }
        let (src, dst) = (engine(from)?, engine(to)?);
        src.absorb();
        let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut src.outbox)
            .into_iter()
            .partition(|f| f.ready_ms.0 <= now_ms);
        src.outbox = waiting;
        let n = ready.len();
        for f in ready {
            let w = &f.write;
            let ok = dst.engine.apply_frame(w.tag, w.layer, &w.addr.ranges, &w.words).is_ok();
            src.engine.on_ack(w.tag, w.layer, ok, now_ms);
        }
        dst.engine.poll(now_ms);
        src.absorb();
        dst.absorb();
        if !delivered.is_null() {
            *delivered = n;
        }
        Ok(())
    })
}

/// Drops a request and releases its slots. Returns true if it existed.
///
/// # Safety
/// `e` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_cancel(e: *mut MsEngine, request_id: u64) -> bool {
    let Some(e) = e.as_mut() else { return false };
    let found = e.engine.cancel(request_id);
    e.absorb();
    found
}

/// Writes the engine's statistics as JSON to `*stats_json`.
///
/// # Safety
/// `e` is a live handle and `stats_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ms_engine_stats(e: *mut MsEngine, now_ms: f64, stats_json: *mut *mut c_char) -> MsStatus {
    guard(|| {
        let e = engine(e)?;
        give_string(serde_json::to_string(&e.engine.stats(now_ms))?, stats_json)
    })
}

/// Reference output of the model described by `model_json` for a prompt:
/// writes `max_tokens` tokens to `out`.
///
/// # Safety
/// `model_json` is a NUL-terminated string, `prompt` valid for `len` reads
/// and `out` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn ms_reference_generate(
    model_json: *const c_char,
    prompt: *const u32,
    len: usize,
    max_tokens: usize,
    out: *mut u32,
    cap: usize,
) -> MsStatus {
    guard(|| {
        if cap < max_tokens {
            return Err(Fail(MsStatus::BufferTooSmall, format!("need {max_tokens} slots, have {cap}")));
        }
        if out.is_null() && max_tokens > 0 {
            return Err(null("out"));
        }
        let config: ModelConfig = serde_json::from_str(text(model_json, "model_json")?)?;
        let model = ToyModel::new(config).map_err(|e| Fail(MsStatus::BadRequest, e.to_string()))?;
        let generated = model.generate(tokens(prompt, len)?, max_tokens);
        ptr::copy_nonoverlapping(generated.as_ptr(), out, generated.len());
        Ok(())
    })
}
