// SPDX-License-Identifier: Apache-2.0

//! JSON bodies of the engine HTTP surface.
//!
//! | endpoint               | request                 | response                 |
//! |------------------------|-------------------------|--------------------------|
//! | `POST /prep_recv`      | [`PrepRecvRequest`]     | [`PrepRecvResponse`]     |
//! | `POST /remote_send`    | [`RemoteSendRequest`]   | [`RemoteSendResponse`]   |
//! | `POST /start_generate` | [`StartGenerateRequest`]| ndjson of [`TokenEvent`] |
//! | `GET /stats`           |                         | [`EngineStats`]          |
//! | `POST /pin`            | [`PinRequest`]          | [`PinResponse`]          |
//!
//! Failures use [`ApiError`]. Token lists are arrays of integers.

use serde::{Deserialize, Serialize};

use crate::kvcache::{KvAddrInfo, KvCacheError, Rank};
use crate::toymodel::Token;

pub type RequestId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepRecvRequest {
    #[serde(default)]
    pub request_id: Option<RequestId>,
    pub prompt: Vec<Token>,
    pub end: i64,
    /// Publish the received range into the context cache once complete
    /// instead of waiting for a `start_generate`.
    #[serde(default)]
    pub context_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepRecvResponse {
    pub request_id: RequestId,
    pub match_len: usize,
    pub kv_addr_info: KvAddrInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteSendRequest {
    #[serde(default)]
    pub request_id: Option<RequestId>,
    pub prompt: Vec<Token>,
    pub begin: i64,
    pub end: i64,
    pub recv_rank: Rank,
    pub recv_addr: KvAddrInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteSendResponse {
    pub request_id: RequestId,
    /// Sender-side cached prefix length the plan was built from.
    pub local_match: usize,
    pub sent_tokens: usize,
    pub prefilled_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartGenerateRequest {
    #[serde(default)]
    pub request_id: Option<RequestId>,
    pub prompt: Vec<Token>,
    pub begin: i64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishStatus {
    Completed,
    Aborted,
}

/// One line of the `start_generate` stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub request_id: RequestId,
    pub index: usize,
    pub token: Token,
    /// Engine clock in ms at emission.
    pub t_ms: f64,
    /// Set on the final event of a stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish: Option<FinishStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub rank: Rank,
    pub clock_ms: f64,
    pub prefill_queue: usize,
    /// Tokens awaiting prefill across queued jobs.
    pub prefill_queue_tokens: usize,
    pub decoding: usize,
    pub awaiting_transfer: usize,
    pub inflight_sends: usize,
    pub total_slots: usize,
    pub free_slots: usize,
    pub cached_nodes: usize,
    pub steps: u64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub frames_applied: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinRequest {
    pub prefix: Vec<Token>,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinResponse {
    pub nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    OutOfPages,
    MissingKv,
    AddrMismatch,
    PeerUnreachable,
    BadRequest,
    DuplicateRequest,
    UnknownRequest,
    TransferFailed,
    Aborted,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {detail}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub retryable: bool,
    pub detail: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            retryable: matches!(code, ErrorCode::OutOfPages | ErrorCode::PeerUnreachable),
            detail: detail.into(),
        }
    }
}

impl From<KvCacheError> for ApiError {
    fn from(e: KvCacheError) -> Self {
        let code = match &e {
            KvCacheError::OutOfPages { .. } | KvCacheError::CannotEvict { .. } => ErrorCode::OutOfPages,
            KvCacheError::MissingKv { .. } => ErrorCode::MissingKv,
            KvCacheError::AddrMismatch { .. } => ErrorCode::AddrMismatch,
            KvCacheError::DuplicateSequence(_) => ErrorCode::DuplicateRequest,
            KvCacheError::UnknownSequence(_) => ErrorCode::UnknownRequest,
            KvCacheError::BadRange { .. }
            | KvCacheError::BadAddress(_)
            | KvCacheError::UnknownAddress { .. }
            | KvCacheError::PayloadSize { .. } => ErrorCode::BadRequest,
            _ => ErrorCode::Internal,
        };
        ApiError::new(code, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json() {
        let r: PrepRecvRequest = serde_json::from_str(r#"{"prompt":[1,2,3],"end":-1}"#).unwrap();
        assert_eq!(r.end, -1);
        assert!(!r.context_only);
        let e = ApiError::new(ErrorCode::OutOfPages, "full");
        assert_eq!(
            serde_json::to_value(&e).unwrap(),
            serde_json::json!({"code":"out_of_pages","retryable":true,"detail":"full"})
        );
        let t = TokenEvent {
            request_id: 3,
            index: 0,
            token: 9,
            t_ms: 1.5,
            finish: None,
            error: None,
        };
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"request_id":3,"index":0,"token":9,"t_ms":1.5}"#
        );
    }
}
