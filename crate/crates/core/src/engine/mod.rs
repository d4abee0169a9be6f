// SPDX-License-Identifier: Apache-2.0

//! The serving engine: three sub-request APIs over the paged cache and a
//! continuous-batching step loop.
//!
//! The engine is a synchronous state machine. Every method takes the current
//! time in ms, so the same code runs under the virtual clock of the simulator
//! and under the wall clock of the HTTP service. A step mutates state when it
//! starts and reports what happens during it: layer writes carry the time
//! their layer finishes, token events carry the step end time.

pub mod api;
pub mod plan;
pub mod service;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::kvcache::{
    resolve_index, BatchItem, BatchKind, CacheConfig, KvAddrInfo, KvCache, LayerWrite, Rank,
    SendTag, SeqId, SlotRange, WriteApplied,
};
use crate::toymodel::cost::CostModel;
use crate::transport::{JobState, TransferJob};
use crate::toymodel::{ModelConfig, Token, ToyModel};
use api::{
    ApiError, EngineStats, ErrorCode, FinishStatus, PinRequest, PinResponse, PrepRecvRequest,
    PrepRecvResponse, RemoteSendRequest, RemoteSendResponse, RequestId, StartGenerateRequest,
    TokenEvent,
};
pub use plan::{compute_transfer_plan, Segment, SegmentKind, TransferPlan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerAddr {
    pub rank: Rank,
    /// `host:port` of the peer's transfer listener.
    pub transfer: String,
    /// `host:port` of the peer's HTTP API.
    #[serde(default)]
    pub api: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub rank: Rank,
    pub model: ModelConfig,
    pub cost: CostModel,
    pub cache: CacheConfig,
    /// Prefill token budget per step. A single job larger than the budget
    /// still runs alone.
    pub max_batch_tokens: usize,
    pub api_addr: Option<String>,
    pub transfer_addr: Option<String>,
    pub peers: Vec<PeerAddr>,
    /// Accept sends to any rank; used by the in-process simulator.
    pub any_peer: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            rank: 0,
            model: ModelConfig::default(),
            cost: CostModel::default(),
            cache: CacheConfig::default(),
            max_batch_tokens: 4096,
            api_addr: None,
            transfer_addr: None,
            peers: Vec::new(),
            any_peer: false,
        }
    }
}

/// Something the engine reports back to its caller.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineEvent {
    Token(TokenEvent),
    /// A `remote_send` finished: every layer write was acknowledged.
    SendDone {
        request_id: RequestId,
        t_ms: f64,
        result: Result<RemoteSendResponse, ApiError>,
    },
    /// A context-only receive was published into the context cache.
    ContextReady { request_id: RequestId, t_ms: f64 },
}

/// A layer write leaving this engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutgoingFrame {
    pub src: Rank,
    /// Ms at which the layer's KV is complete and may leave.
    pub ready_ms: OrderedMs,
    pub write: LayerWrite,
}

/// A ms timestamp with a total order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderedMs(pub f64);

impl Eq for OrderedMs {}

impl PartialOrd for OrderedMs {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedMs {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub start_ms: f64,
    pub end_ms: f64,
    /// Ms per layer for this batch.
    pub layer_ms: f64,
    pub prefill_tokens: usize,
    pub decode_seqs: usize,
    pub entries: usize,
}

#[derive(Debug, Clone, Copy)]
enum JobKind {
    Generate { max_tokens: usize },
    Send { tag: SendTag },
}

#[derive(Debug, Clone)]
struct PrefillJob {
    request: RequestId,
    seq: SeqId,
    begin: usize,
    end: usize,
    kind: JobKind,
}

#[derive(Debug, Clone)]
struct Decoding {
    request: RequestId,
    seq: SeqId,
    produced: usize,
    max_tokens: usize,
}

#[derive(Debug, Clone)]
struct Receiving {
    seq: SeqId,
    end: usize,
    context_only: bool,
}

#[derive(Debug, Clone)]
struct SendJob {
    request: RequestId,
    response: RemoteSendResponse,
    job: TransferJob,
}

enum Slot {
    Job(PrefillJob),
    Decode(usize),
}

pub struct Engine {
    config: EngineConfig,
    cache: KvCache,
    busy_until: f64,
    next_seq: u64,
    next_request: RequestId,
    prefill_queue: VecDeque<PrefillJob>,
    decoding: Vec<Decoding>,
    receiving: BTreeMap<RequestId, Receiving>,
    sends: BTreeMap<SendTag, SendJob>,
    outgoing: Vec<OutgoingFrame>,
    events: Vec<EngineEvent>,
    steps: u64,
    prefill_tokens: u64,
    decode_tokens: u64,
    frames_applied: u64,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("rank", &self.config.rank)
            .field("busy_until", &self.busy_until)
            .field("prefill_queue", &self.prefill_queue.len())
            .field("decoding", &self.decoding.len())
            .field("cache", &self.cache)
            .finish()
    }
}

fn bad_request(detail: impl Into<String>) -> ApiError {
    ApiError::new(ErrorCode::BadRequest, detail)
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, ApiError> {
        let model = ToyModel::new(config.model).map_err(|e| bad_request(e.to_string()))?;
        if !config.cost.is_valid() {
            return Err(bad_request("cost model constants must be finite and >= 0"));
        }
        let mut cache = KvCache::new(model, config.cache)?;
        // Tags carry the sender rank in their high bits.
        cache.set_tag_base((config.rank as u64) << 40);
        Ok(Self {
            config,
            cache,
            busy_until: 0.0,
            next_seq: 1,
            next_request: 1 << 48,
            prefill_queue: VecDeque::new(),
            decoding: Vec::new(),
            receiving: BTreeMap::new(),
            sends: BTreeMap::new(),
            outgoing: Vec::new(),
            events: Vec::new(),
            steps: 0,
            prefill_tokens: 0,
            decode_tokens: 0,
            frames_applied: 0,
        })
    }

    pub fn rank(&self) -> Rank {
        self.config.rank
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut KvCache {
        &mut self.cache
    }

    pub fn model(&self) -> &ToyModel {
        self.cache.model()
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    /// True if a step would do any work.
    pub fn has_work(&self) -> bool {
        !self.prefill_queue.is_empty() || !self.decoding.is_empty()
    }

    pub fn take_events(&mut self) -> Vec<EngineEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn take_outgoing(&mut self) -> Vec<OutgoingFrame> {
        std::mem::take(&mut self.outgoing)
    }

    fn fresh_seq(&mut self) -> SeqId {
        let s = SeqId(self.next_seq);
        self.next_seq += 1;
        s
    }

    fn request_id(&mut self, given: Option<RequestId>) -> RequestId {
        given.unwrap_or_else(|| {
            self.next_request += 1;
            self.next_request
        })
    }

    fn knows_peer(&self, rank: Rank) -> bool {
        self.config.any_peer
            || rank == self.config.rank
            || self.config.peers.iter().any(|p| p.rank == rank)
    }

    // ---- sub-request APIs ----------------------------------------------

    /// Allocates receive slots for the uncached part of `prompt[..end]`.
    pub fn prep_recv(&mut self, req: PrepRecvRequest, now: f64) -> Result<PrepRecvResponse, ApiError> {
        let id = self.request_id(req.request_id);
        if req.prompt.is_empty() {
            return Err(bad_request("prompt must be non-empty"));
        }
        if self.receiving.contains_key(&id) {
            return Err(ApiError::new(
                ErrorCode::DuplicateRequest,
                format!("request {id} already awaiting transfer"),
            ));
        }
        let len = req.prompt.len();
        let end = resolve_index(req.end, len).ok_or_else(|| {
            bad_request(format!("end {} out of range for {len} tokens", req.end))
        })?;
        if end == 0 {
            // A one-token prompt with end=-1: nothing to receive.
            if req.context_only {
                self.events.push(EngineEvent::ContextReady { request_id: id, t_ms: now });
            }
            return Ok(PrepRecvResponse {
                request_id: id,
                match_len: 0,
                kv_addr_info: KvAddrInfo::empty(0),
            });
        }
        let seq = self.fresh_seq();
        let (match_len, kv_addr_info) = self.cache.prep_recv(seq, &req.prompt, req.end)?;
        self.receiving.insert(
            id,
            Receiving {
                seq,
                end,
                context_only: req.context_only,
            },
        );
        if req.context_only {
            self.poll(now);
        }
        Ok(PrepRecvResponse {
            request_id: id,
            match_len,
            kv_addr_info,
        })
    }

    /// Sends the KV of `prompt[begin..end]` to `recv_rank`, computing what is
    /// not cached. Completion is reported by [`EngineEvent::SendDone`].
    pub fn remote_send(&mut self, req: RemoteSendRequest, now: f64) -> Result<RequestId, ApiError> {
        let id = self.request_id(req.request_id);
        let len = req.prompt.len();
        let (begin, end) = match (resolve_index(req.begin, len), resolve_index(req.end, len)) {
            (Some(b), Some(e)) if b <= e => (b, e),
            _ => {
                return Err(bad_request(format!(
                    "range [{}, {}) invalid for {len} tokens",
                    req.begin, req.end
                )))
            }
        };
        if req.recv_addr.token_count != end - begin {
            return Err(ApiError::new(
                ErrorCode::AddrMismatch,
                format!(
                    "recv_addr covers {} tokens, range has {}",
                    req.recv_addr.token_count,
                    end - begin
                ),
            ));
        }
        req.recv_addr.validate(self.cache.page_size())?;
        if !self.knows_peer(req.recv_rank) {
            return Err(ApiError::new(
                ErrorCode::PeerUnreachable,
                format!("no transfer route to rank {}", req.recv_rank),
            ));
        }
        if begin == end {
            self.events.push(EngineEvent::SendDone {
                request_id: id,
                t_ms: now,
                result: Ok(RemoteSendResponse {
                    request_id: id,
                    local_match: self.cache.peek_prefix(&req.prompt[..end]),
                    sent_tokens: 0,
                    prefilled_tokens: 0,
                }),
            });
            return Ok(id);
        }
        let seq = self.fresh_seq();
        let m = self.cache.open_sequence(seq, &req.prompt[..end], end)?;
        let plan = compute_transfer_plan(m, begin, end);
        let prefilled = plan.prefill_range().map_or(0, |(b, e)| e - b);
        let response = RemoteSendResponse {
            request_id: id,
            local_match: m,
            sent_tokens: plan.sent_tokens(),
            prefilled_tokens: prefilled,
        };
        let layers = self.cache.model().layers();
        let dest = req.recv_rank;
        let job = |response, tag| SendJob {
            request: id,
            response,
            job: TransferJob::new(dest, tag, layers),
        };
        if plan.is_direct_only() {
            let tag = self.cache.allocate_tag();
            let writes = self.cache.cached_writes(seq, begin, end, req.recv_rank, &req.recv_addr, tag);
            self.cache.release(seq)?;
            let mut send = job(response, tag);
            for write in writes? {
                send.job.enqueue(write.layer, now).expect("layers in order");
                self.outgoing.push(OutgoingFrame {
                    src: self.config.rank,
                    ready_ms: OrderedMs(now),
                    write,
                });
            }
            self.sends.insert(tag, send);
        } else {
            let tag = match self.cache.mark_send(seq, (begin, end), req.recv_rank, req.recv_addr) {
                Ok(t) => t,
                Err(e) => {
                    self.cache.release(seq)?;
                    return Err(e.into());
                }
            };
            self.prefill_queue.push_back(PrefillJob {
                request: id,
                seq,
                begin: m,
                end,
                kind: JobKind::Send { tag },
            });
            self.sends.insert(tag, job(response, tag));
        }
        Ok(id)
    }

    /// Queues generation of `prompt` given that KV of `prompt[..begin]`
    /// already exists here. Tokens are reported as [`EngineEvent::Token`].
    pub fn start_generate(&mut self, req: StartGenerateRequest, now: f64) -> Result<RequestId, ApiError> {
        self.poll(now);
        let id = self.request_id(req.request_id);
        let len = req.prompt.len();
        if len == 0 || req.max_tokens == 0 {
            return Err(bad_request("prompt and max_tokens must be non-empty"));
        }
        let begin = resolve_index(req.begin, len)
            .filter(|&b| b < len)
            .ok_or_else(|| bad_request(format!("begin {} out of range for {len} tokens", req.begin)))?;
        if self.decoding.iter().any(|d| d.request == id)
            || self.prefill_queue.iter().any(|j| j.request == id && matches!(j.kind, JobKind::Generate { .. }))
        {
            return Err(ApiError::new(
                ErrorCode::DuplicateRequest,
                format!("request {id} already generating"),
            ));
        }
        let recv = self.receiving.get(&id).filter(|r| !r.context_only).cloned();
        let (seq, start) = if let Some(r) = recv {
            let rec = self.cache.sequence(r.seq).expect("receiving sequence");
            if rec.token_ids != req.prompt {
                return Err(bad_request("prompt differs from the one passed to prep_recv"));
            }
            let committed = self.cache.committed_len(r.seq)?;
            if committed < begin {
                return Err(ApiError::new(
                    ErrorCode::MissingKv,
                    format!("KV of prompt[..{begin}] not present: only {committed} positions filled"),
                ));
            }
            self.receiving.remove(&id);
            if committed >= len {
                // The last position must be computed to sample; recompute it
                // in a child that shares everything before it.
                let child = self.fresh_seq();
                self.cache.fork_sequence(r.seq, child, len - 1)?;
                self.cache.extend_tokens(child, &req.prompt[len - 1..])?;
                self.cache.release(r.seq)?;
                (child, len - 1)
            } else {
                (r.seq, committed)
            }
        } else {
            let seq = self.fresh_seq();
            let m = self.cache.open_sequence(seq, &req.prompt, len - 1)?;
            if m < begin {
                self.cache.release(seq)?;
                return Err(ApiError::new(
                    ErrorCode::MissingKv,
                    format!("KV of prompt[..{begin}] not present: cached prefix is {m}"),
                ));
            }
            (seq, m)
        };
        self.prefill_queue.push_back(PrefillJob {
            request: id,
            seq,
            begin: start,
            end: len,
            kind: JobKind::Generate {
                max_tokens: req.max_tokens,
            },
        });
        Ok(id)
    }

    /// Sequence holding a prepared receive, for inspection.
    pub fn receiving_seq(&self, request_id: RequestId) -> Option<SeqId> {
        self.receiving.get(&request_id).map(|r| r.seq)
    }

    /// Drops a prepared receive that will never be used.
    pub fn cancel(&mut self, request_id: RequestId) -> bool {
        match self.receiving.remove(&request_id) {
            Some(r) => {
                let _ = self.cache.release(r.seq);
                true
            }
            None => false,
        }
    }

    pub fn pin(&mut self, req: &PinRequest, now: f64) -> PinResponse {
        self.poll(now);
        PinResponse {
            nodes: self.cache.pin(&req.prefix, req.flag),
        }
    }

    pub fn match_prefix(&mut self, tokens: &[Token]) -> usize {
        self.cache.match_prefix(tokens)
    }

    // ---- transfer plane --------------------------------------------------

    /// Receiver-side agent: applies one layer write. Touches only slots
    /// prepared by `prep_recv`.
    pub fn apply_frame(
        &mut self,
        tag: SendTag,
        layer: u32,
        ranges: &[SlotRange],
        words: &[u64],
    ) -> Result<WriteApplied, ApiError> {
        let applied = self.cache.apply_write(tag, layer as usize, ranges, words)?;
        if !applied.duplicate {
            self.frames_applied += 1;
        }
        Ok(applied)
    }

    /// Sender side: a layer write was acknowledged (or finally rejected).
    pub fn on_ack(&mut self, tag: SendTag, layer: u32, ok: bool, now: f64) {
        let Some(send) = self.sends.get_mut(&tag) else { return };
        match send.job.ack(layer, ok) {
            JobState::Failed => {
                let send = self.sends.remove(&tag).expect("present");
                self.events.push(EngineEvent::SendDone {
                    request_id: send.request,
                    t_ms: now,
                    result: Err(ApiError::new(
                        ErrorCode::TransferFailed,
                        format!("layer {layer} write rejected by receiver"),
                    )),
                });
            }
            JobState::Acked => {
                let send = self.sends.remove(&tag).expect("present");
                self.events.push(EngineEvent::SendDone {
                    request_id: send.request,
                    t_ms: now,
                    result: Ok(send.response),
                });
            }
            JobState::Queued | JobState::Streaming => {}
        }
    }

    /// Publishes completed context-only receives.
    pub fn poll(&mut self, now: f64) {
        let done: Vec<RequestId> = self
            .receiving
            .iter()
            .filter(|(_, r)| r.context_only)
            .filter(|(_, r)| self.cache.committed_len(r.seq).is_ok_and(|c| c >= r.end))
            .map(|(id, _)| *id)
            .collect();
        for id in done {
            let r = self.receiving.remove(&id).expect("present");
            let _ = self.cache.insert_into_tree(r.seq, r.end);
            let _ = self.cache.release(r.seq);
            self.events.push(EngineEvent::ContextReady { request_id: id, t_ms: now });
        }
    }

    pub fn stats(&self, now: f64) -> EngineStats {
        EngineStats {
            rank: self.config.rank,
            clock_ms: now.max(self.busy_until),
            prefill_queue: self.prefill_queue.len(),
            prefill_queue_tokens: self.prefill_queue.iter().map(|j| j.end - j.begin).sum(),
            decoding: self.decoding.len(),
            awaiting_transfer: self.receiving.len(),
            inflight_sends: self.sends.len(),
            total_slots: self.cache.total_slots(),
            free_slots: self.cache.free_slots(),
            cached_nodes: self.cache.tree_nodes(),
            steps: self.steps,
            prefill_tokens: self.prefill_tokens,
            decode_tokens: self.decode_tokens,
            frames_applied: self.frames_applied,
        }
    }

    // ---- step loop ---------------------------------------------------------

    fn abort(&mut self, request: RequestId, seq: SeqId, index: usize, err: ApiError, t: f64) {
        let _ = self.cache.release(seq);
        self.events.push(EngineEvent::Token(TokenEvent {
            request_id: request,
            index,
            token: 0,
            t_ms: t,
            finish: Some(FinishStatus::Aborted),
            error: Some(err),
        }));
    }

    fn fail_job(&mut self, job: PrefillJob, err: ApiError, t: f64) {
        match job.kind {
            JobKind::Generate { .. } => self.abort(job.request, job.seq, 0, err, t),
            JobKind::Send { tag } => {
                let _ = self.cache.release(job.seq);
                self.sends.remove(&tag);
                self.events.push(EngineEvent::SendDone {
                    request_id: job.request,
                    t_ms: t,
                    result: Err(err),
                });
            }
        }
    }

    fn finish_sequence(&mut self, seq: SeqId) {
        if let Ok(c) = self.cache.committed_len(seq) {
            let _ = self.cache.insert_into_tree(seq, c);
        }
        let _ = self.cache.release(seq);
    }

    /// Runs one batched forward pass starting at `max(now, busy_until)`.
    /// Returns `None` when there is nothing to do.
    pub fn step(&mut self, now: f64) -> Option<StepReport> {
        self.poll(now);
        if !self.has_work() {
            return None;
        }
        let start = now.max(self.busy_until);
        let mut slots: Vec<Slot> = Vec::new();
        let mut items: Vec<BatchItem> = Vec::new();

        // Decodes first: every active sequence advances one position.
        let mut aborted = Vec::new();
        for (i, d) in self.decoding.iter().enumerate() {
            let len = self.cache.sequence(d.seq).map_or(0, |s| s.token_ids.len());
            match self.cache.reserve(d.seq, len) {
                Ok(()) => {
                    slots.push(Slot::Decode(i));
                    items.push(BatchItem {
                        seq: d.seq,
                        kind: BatchKind::Decode,
                    });
                }
                Err(e) => aborted.push((i, ApiError::from(e))),
            }
        }

        let mut budget = self.config.max_batch_tokens.saturating_sub(items.len());
        let mut admitted = 0;
        while let Some(job) = self.prefill_queue.front() {
            let n = job.end - job.begin;
            if admitted > 0 && n > budget {
                break;
            }
            let job = self.prefill_queue.pop_front().expect("front");
            if let Err(e) = self.cache.reserve(job.seq, job.end) {
                if items.is_empty() && self.decoding.is_empty() {
                    self.fail_job(job, e.into(), start);
                    continue;
                }
                self.prefill_queue.push_front(job);
                break;
            }
            budget = budget.saturating_sub(n);
            admitted += 1;
            items.push(BatchItem {
                seq: job.seq,
                kind: BatchKind::Prefill {
                    begin: job.begin,
                    end: job.end,
                },
            });
            slots.push(Slot::Job(job));
        }

        if items.is_empty() {
            self.drop_aborted(aborted, start);
            return if self.has_work() { self.step(now) } else { None };
        }

        let cost = self.config.cost;
        let mut layer_ms = 0.0;
        let mut decode_lens = Vec::new();
        let mut prefill_tokens = 0;
        for item in &items {
            match item.kind {
                BatchKind::Prefill { begin, end } => {
                    layer_ms += cost.prefill_time(end - begin, end);
                    prefill_tokens += end - begin;
                }
                BatchKind::Decode => {
                    decode_lens.push(self.cache.sequence(item.seq).map_or(0, |s| s.token_ids.len()));
                }
            }
        }
        layer_ms += cost.decode_time(&decode_lens);
        let overhead = if prefill_tokens > 0 { cost.prefill_step_overhead } else { 0.0 };
        let layers = self.cache.model().layers();
        let end_ms = start + overhead + layers as f64 * layer_ms;

        let outputs = match self.forward(&items, start + overhead, layer_ms) {
            Ok(o) => o,
            Err(e) => {
                let err = ApiError::from(e);
                for slot in slots {
                    match slot {
                        Slot::Job(job) => self.fail_job(job, err.clone(), end_ms),
                        Slot::Decode(i) => aborted.push((i, err.clone())),
                    }
                }
                self.drop_aborted(aborted, end_ms);
                self.busy_until = end_ms;
                return None;
            }
        };

        let model = *self.cache.model();
        for (slot, last_hidden) in slots.into_iter().zip(outputs) {
            match slot {
                Slot::Job(job) => match job.kind {
                    JobKind::Send { .. } => {
                        let _ = self.cache.insert_into_tree(job.seq, job.end);
                        let _ = self.cache.release(job.seq);
                    }
                    JobKind::Generate { max_tokens } => {
                        let token = model.sample(last_hidden);
                        let done = max_tokens == 1;
                        self.emit_token(job.request, 0, token, end_ms, done);
                        if done {
                            self.finish_sequence(job.seq);
                        } else {
                            let _ = self.cache.extend_tokens(job.seq, &[token]);
                            self.decoding.push(Decoding {
                                request: job.request,
                                seq: job.seq,
                                produced: 1,
                                max_tokens,
                            });
                        }
                    }
                },
                Slot::Decode(i) => {
                    let token = model.sample(last_hidden);
                    let d = &mut self.decoding[i];
                    let index = d.produced;
                    d.produced += 1;
                    let done = d.produced == d.max_tokens;
                    let (request, seq) = (d.request, d.seq);
                    self.emit_token(request, index, token, end_ms, done);
                    if done {
                        self.finish_sequence(seq);
                    } else {
                        let _ = self.cache.extend_tokens(seq, &[token]);
                    }
                }
            }
        }
        self.decode_tokens += decode_lens.len() as u64;
        self.prefill_tokens += prefill_tokens as u64;
        self.steps += 1;
        self.drop_aborted(aborted, end_ms);
        // Sequences that finished this step leave the decode set.
        let cache = &self.cache;
        self.decoding.retain(|d| d.produced < d.max_tokens && cache.sequence(d.seq).is_some());
        self.busy_until = end_ms;
        Some(StepReport {
            start_ms: start,
            end_ms,
            layer_ms,
            prefill_tokens,
            decode_seqs: decode_lens.len(),
            entries: items.len(),
        })
    }

    fn drop_aborted(&mut self, aborted: Vec<(usize, ApiError)>, t: f64) {
        let mut gone = Vec::new();
        for (i, err) in aborted {
            let d = self.decoding[i].clone();
            gone.push(d.request);
            self.abort(d.request, d.seq, d.produced, err, t);
        }
        self.decoding.retain(|d| !gone.contains(&d.request));
    }

    fn emit_token(&mut self, request: RequestId, index: usize, token: Token, t: f64, done: bool) {
        self.events.push(EngineEvent::Token(TokenEvent {
            request_id: request,
            index,
            token,
            t_ms: t,
            finish: done.then_some(FinishStatus::Completed),
            error: None,
        }));
    }

    /// Executes the layers of one batch, queueing layer writes with their
    /// completion times. Returns the last hidden word of every entry.
    fn forward(
        &mut self,
        items: &[BatchItem],
        compute_start: f64,
        layer_ms: f64,
    ) -> Result<Vec<u64>, crate::kvcache::KvCacheError> {
        let mut plan = self.cache.begin_forward(items)?;
        let model = *self.cache.model();
        let mut x = Vec::with_capacity(plan.positions());
        for e in &plan.entries {
            let tokens = &self.cache.sequence(e.seq).expect("planned").token_ids;
            x.extend((e.begin..e.end).map(|i| model.embed(tokens[i], i)));
        }
        for layer in 0..model.layers() {
            x = self.cache.attention(layer, &mut plan, &x)?;
            let ready = OrderedMs(compute_start + (layer + 1) as f64 * layer_ms);
            for write in plan.take_writes() {
                if let Some(send) = self.sends.get_mut(&write.tag) {
                    send.job.enqueue(write.layer, ready.0).expect("layers in order");
                }
                self.outgoing.push(OutgoingFrame {
                    src: self.config.rank,
                    ready_ms: ready,
                    write,
                });
            }
        }
        let mut last = Vec::with_capacity(plan.entries.len());
        let mut off = 0;
        for e in &plan.entries {
            off += e.end - e.begin;
            last.push(x[off - 1]);
        }
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(rank: Rank) -> Engine {
        Engine::new(EngineConfig {
            rank,
            any_peer: true,
            ..Default::default()
        })
        .unwrap()
    }

    fn run_to_idle(e: &mut Engine) -> Vec<TokenEvent> {
        let mut now = 0.0;
        while let Some(r) = e.step(now) {
            now = r.end_ms;
        }
        e.take_events()
            .into_iter()
            .filter_map(|ev| match ev {
                EngineEvent::Token(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn whole_prompt_generation_matches_reference() {
        let mut e = engine(0);
        let prompt: Vec<Token> = (0..50).map(|i| (i * 7) % 256).collect();
        e.start_generate(
            StartGenerateRequest {
                request_id: Some(1),
                prompt: prompt.clone(),
                begin: 0,
                max_tokens: 8,
            },
            0.0,
        )
        .unwrap();
        let toks: Vec<Token> = run_to_idle(&mut e).iter().map(|t| t.token).collect();
        assert_eq!(toks, e.model().generate(&prompt, 8));
        assert!(e.cache().check_accounting());
    }

    #[test]
    fn empty_step_is_a_noop() {
        let mut e = engine(0);
        assert!(e.step(5.0).is_none());
        assert_eq!(e.busy_until(), 0.0);
    }

    #[test]
    fn step_cost_matches_cost_model() {
        let mut e = engine(0);
        let prompt: Vec<Token> = (0..64).collect();
        e.start_generate(
            StartGenerateRequest {
                request_id: Some(1),
                prompt,
                begin: 0,
                max_tokens: 3,
            },
            0.0,
        )
        .unwrap();
        let c = CostModel::default();
        let l = 4.0;
        let r = e.step(0.0).unwrap();
        assert!((r.end_ms - l * c.prefill_time(64, 64)).abs() < 1e-9);
        let r2 = e.step(r.end_ms).unwrap();
        assert!((r2.end_ms - r.end_ms - l * c.decode_time(&[65])).abs() < 1e-9);
    }

    #[test]
    fn start_generate_before_transfer_is_missing_kv() {
        let mut d = engine(1);
        let prompt: Vec<Token> = (0..20).collect();
        d.prep_recv(
            PrepRecvRequest {
                request_id: Some(5),
                prompt: prompt.clone(),
                end: -1,
                context_only: false,
            },
            0.0,
        )
        .unwrap();
        let err = d
            .start_generate(
                StartGenerateRequest {
                    request_id: Some(5),
                    prompt,
                    begin: 19,
                    max_tokens: 2,
                },
                0.0,
            )
            .unwrap_err();
        assert_eq!(err.code, ErrorCode::MissingKv);
        assert!(d.cancel(5));
        assert!(d.cache().check_accounting());
        assert_eq!(d.cache().allocated_slots(), 0);
    }

    #[test]
    fn one_token_prompt_end_minus_one_is_empty() {
        let mut d = engine(1);
        let r = d
            .prep_recv(
                PrepRecvRequest {
                    request_id: None,
                    prompt: vec![4],
                    end: -1,
                    context_only: false,
                },
                0.0,
            )
            .unwrap();
        assert_eq!((r.match_len, r.kv_addr_info.token_count), (0, 0));
    }
}
