// SPDX-License-Identifier: Apache-2.0

//! Call graphs produced by strategies and the state machine that walks them.

use serde::{Deserialize, Serialize};

use super::RouterError;
use crate::engine::api::{
    PinRequest, PrepRecvRequest, PrepRecvResponse, RemoteSendRequest, RemoteSendResponse, RequestId,
    StartGenerateRequest,
};
use crate::kvcache::{resolve_index, Rank};
use crate::toymodel::Token;

/// Where a `begin` index comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Begin {
    At(i64),
    /// The `match_len` returned by the `prep_recv` at this call index.
    MatchOf(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "api", rename_all = "snake_case")]
pub enum Call {
    PrepRecv {
        engine: Rank,
        end: i64,
        context_only: bool,
    },
    RemoteSend {
        engine: Rank,
        recv: Rank,
        begin: Begin,
        end: i64,
        /// Index of the `prep_recv` whose address receives the KV.
        addr_of: usize,
    },
    StartGenerate {
        engine: Rank,
        begin: Begin,
        max_tokens: usize,
    },
    Pin {
        engine: Rank,
        len: usize,
    },
}

impl Call {
    pub fn engine(&self) -> Rank {
        match *self {
            Call::PrepRecv { engine, .. }
            | Call::RemoteSend { engine, .. }
            | Call::StartGenerate { engine, .. }
            | Call::Pin { engine, .. } => engine,
        }
    }

    pub fn api(&self) -> &'static str {
        match self {
            Call::PrepRecv { .. } => "prep_recv",
            Call::RemoteSend { .. } => "remote_send",
            Call::StartGenerate { .. } => "start_generate",
            Call::Pin { .. } => "pin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptKind {
    Generate,
    Migration { category: usize, target: Rank },
    Warmup { category: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub request_id: RequestId,
    pub strategy: String,
    pub kind: ScriptKind,
    pub prompt: Vec<Token>,
    pub calls: Vec<Call>,
}

impl Script {
    /// Engine that streams tokens back, if any.
    pub fn generator(&self) -> Option<Rank> {
        self.calls.iter().find_map(|c| match c {
            Call::StartGenerate { engine, .. } => Some(*engine),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CallOutcome {
    Prepared(PrepRecvResponse),
    Sent(RemoteSendResponse),
    Generated,
    Pinned,
    Skipped,
}

/// A concrete API call ready to send.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    PrepRecv(Rank, PrepRecvRequest),
    RemoteSend(Rank, RemoteSendRequest),
    StartGenerate(Rank, StartGenerateRequest),
    Pin(Rank, PinRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub request_id: RequestId,
    pub index: usize,
    pub api: String,
    pub engine: Rank,
    pub start_ms: f64,
    pub end_ms: Option<f64>,
    pub skipped: bool,
}

/// Walks a script one call at a time; each call is issued only after the
/// previous one completed, using its outputs.
#[derive(Debug, Clone)]
pub struct ScriptExec {
    pub script: Script,
    next: usize,
    outcomes: Vec<Option<CallOutcome>>,
    in_flight: bool,
    pub log: Vec<CallRecord>,
}

impl ScriptExec {
    pub fn new(script: Script) -> Self {
        let n = script.calls.len();
        Self {
            script,
            next: 0,
            outcomes: vec![None; n],
            in_flight: false,
            log: Vec::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.script.calls.len()
    }

    pub fn outcome(&self, i: usize) -> Option<&CallOutcome> {
        self.outcomes.get(i).and_then(|o| o.as_ref())
    }

    fn match_of(&self, i: usize) -> Result<usize, RouterError> {
        match self.outcome(i) {
            Some(CallOutcome::Prepared(p)) => Ok(p.match_len),
            _ => Err(RouterError::Protocol(format!("call {i} has no prep_recv result"))),
        }
    }

    fn begin(&self, b: Begin) -> Result<i64, RouterError> {
        match b {
            Begin::At(v) => Ok(v),
            Begin::MatchOf(i) => Ok(self.match_of(i)? as i64),
        }
    }

    fn record(&mut self, skipped: bool, now: f64) {
        let call = &self.script.calls[self.next];
        self.log.push(CallRecord {
            request_id: self.script.request_id,
            index: self.next,
            api: call.api().to_string(),
            engine: call.engine(),
            start_ms: now,
            end_ms: skipped.then_some(now),
            skipped,
        });
    }

    /// The next call to issue, skipping sends with nothing to transfer.
    /// Returns `None` when the script is finished or a call is in flight.
    pub fn next_action(&mut self, now: f64) -> Option<Result<Action, RouterError>> {
        if self.in_flight {
            return None;
        }
        while !self.is_done() {
            let call = self.script.calls[self.next].clone();
            let rid = Some(self.script.request_id);
            let prompt = self.script.prompt.clone();
            let action = match call {
                Call::PrepRecv { engine, end, context_only } => Action::PrepRecv(
                    engine,
                    PrepRecvRequest {
                        request_id: rid,
                        prompt,
                        end,
                        context_only,
                    },
                ),
                Call::RemoteSend {
                    engine,
                    recv,
                    begin,
                    end,
                    addr_of,
                } => {
                    let b = match self.begin(begin) {
                        Ok(b) => b,
                        Err(e) => return Some(Err(e)),
                    };
                    let len = prompt.len();
                    let eb = resolve_index(b, len).unwrap_or(len);
                    let ee = resolve_index(end, len).unwrap_or(0);
                    let addr = match self.outcome(addr_of) {
                        Some(CallOutcome::Prepared(p)) => p.kv_addr_info.clone(),
                        _ => return Some(Err(RouterError::Protocol("remote_send before prep_recv".into()))),
                    };
                    if eb >= ee || addr.token_count == 0 {
                        self.record(true, now);
                        self.outcomes[self.next] = Some(CallOutcome::Skipped);
                        self.next += 1;
                        continue;
                    }
                    Action::RemoteSend(
                        engine,
                        RemoteSendRequest {
                            request_id: rid,
                            prompt,
                            begin: b,
                            end,
                            recv_rank: recv,
                            recv_addr: addr,
                        },
                    )
                }
                Call::StartGenerate { engine, begin, max_tokens } => {
                    let b = match self.begin(begin) {
                        Ok(b) => b,
                        Err(e) => return Some(Err(e)),
                    };
                    Action::StartGenerate(
                        engine,
                        StartGenerateRequest {
                            request_id: rid,
                            prompt,
                            begin: b,
                            max_tokens,
                        },
                    )
                }
                Call::Pin { engine, len } => Action::Pin(
                    engine,
                    PinRequest {
                        prefix: prompt[..len.min(prompt.len())].to_vec(),
                        flag: true,
                    },
                ),
            };
            self.record(false, now);
            self.in_flight = true;
            return Some(Ok(action));
        }
        None
    }

    /// Forgets the in-flight call so that the next `next_action` reissues it.
    pub fn retry_in_flight(&mut self) {
        if self.in_flight {
            self.log.pop();
            self.in_flight = false;
        }
    }

    /// Index of the next call to issue, or of the call in flight.
    pub fn position(&self) -> usize {
        self.next
    }

    /// Completes the in-flight call.
    pub fn complete(&mut self, outcome: CallOutcome, now: f64) {
        assert!(self.in_flight, "no call in flight");
        if let Some(r) = self.log.last_mut() {
            r.end_ms = Some(now);
        }
        self.outcomes[self.next] = Some(outcome);
        self.next += 1;
        self.in_flight = false;
    }
}
