// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event executor for the router + engines +
//! transport stack in virtual time.
//!
//! Each event is processed at its timestamp in `(time, insertion order)`
//! order. Engines run real forward steps on the toy model; the clock only
//! advances by the cost model. KV moves through the in-memory transport as
//! encoded frames, so checksum faults and retransmission follow the same
//! code path as the TCP backend.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::metrics::{RequestMetrics, RequestStatus};
use super::workload::TraceRequest;
use super::BenchError;
use crate::engine::api::{ApiError, ErrorCode, RequestId};
use crate::engine::{Engine, EngineConfig, EngineEvent, OrderedMs, StepReport};
use crate::kvcache::{CacheConfig, Rank, SendTag};
use crate::router::{Action, CallOutcome, CallRecord, EngineEntry, Role, Router, Script, ScriptExec, ScriptKind, StrategySpec};
use crate::toymodel::cost::CostModel;
use crate::toymodel::ModelConfig;
use crate::transport::mem::{receive, FaultInjector, InFlight, TransferRecord, VirtualNetwork};
use crate::transport::{AckStatus, WriteFrame};

/// Delay before a call that failed with a retryable error is reissued.
pub const RETRY_MS: f64 = 5.0;
const MAX_RETRIES: u32 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub engines: Vec<EngineEntry>,
    #[serde(default = "bench_model")]
    pub model: ModelConfig,
    #[serde(default = "bench_cost")]
    pub cost: CostModel,
    #[serde(default = "bench_cache")]
    pub cache: CacheConfig,
    #[serde(default = "default_batch_tokens")]
    pub max_batch_tokens: usize,
}

/// 32 layers, matching the depth the cost table was measured on; two words
/// per entry keep memory small.
pub fn bench_model() -> ModelConfig {
    ModelConfig {
        layers: 32,
        dim: 2,
        ..ModelConfig::default()
    }
}

/// Fitted prefill/transfer constants plus decode and step-overhead values
/// chosen for the benchmark topologies.
pub fn bench_cost() -> CostModel {
    CostModel {
        c0: 0.25,
        c1: 2e-6,
        c2: 3e-3,
        prefill_step_overhead: super::calibrate::STEP_OVERHEAD_MS,
        ..CostModel::default()
    }
}

pub fn bench_cache() -> CacheConfig {
    CacheConfig {
        pages: 16_384,
        page_size: 16,
    }
}

fn default_batch_tokens() -> usize {
    4096
}

impl Topology {
    fn with_roles(name: String, roles: &[Role]) -> Self {
        Self {
            name,
            engines: roles
                .iter()
                .enumerate()
                .map(|(i, &role)| EngineEntry {
                    rank: i as Rank,
                    role,
                    api: None,
                })
                .collect(),
            model: bench_model(),
            cost: bench_cost(),
            cache: bench_cache(),
            max_batch_tokens: default_batch_tokens(),
        }
    }

    pub fn data_parallel(n: usize) -> Self {
        Self::with_roles(format!("dp{n}"), &vec![Role::Mixed; n])
    }

    pub fn disaggregated(prefill: usize, decode: usize) -> Self {
        let mut roles = vec![Role::Prefill; prefill];
        roles.extend(std::iter::repeat_n(Role::Decode, decode));
        Self::with_roles(format!("{prefill}p{decode}d"), &roles)
    }

    /// `dp<N>` or `<P>p<D>d`, e.g. `dp2` or `1p1d`.
    pub fn by_name(name: &str) -> Option<Self> {
        if let Some(n) = name.strip_prefix("dp") {
            return n.parse().ok().filter(|&n| n > 0).map(Self::data_parallel);
        }
        let (p, d) = name.strip_suffix('d')?.split_once('p')?;
        let (p, d) = (p.parse().ok()?, d.parse().ok()?);
        (p > 0 && d > 0).then(|| Self::disaggregated(p, d))
    }

    pub fn with_cost(mut self, cost: CostModel) -> Self {
        self.cost = cost;
        self
    }

    pub fn engine_config(&self, rank: Rank) -> EngineConfig {
        EngineConfig {
            rank,
            model: self.model,
            cost: self.cost,
            cache: self.cache,
            max_batch_tokens: self.max_batch_tokens,
            any_peer: true,
            ..EngineConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Event {
    Arrival(usize),
    Advance(RequestId),
    Wake(Rank),
    Engine(Rank, EngineEvent),
    Deliver(InFlight),
    Ack {
        src: Rank,
        dst: Rank,
        tag: SendTag,
        layer: u32,
        attempt: u8,
        status: AckStatus,
    },
    SetStrategy(StrategySpec),
}

#[derive(Debug)]
struct Queued {
    t: OrderedMs,
    seq: u64,
    ev: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.t, self.seq).cmp(&(other.t, other.seq))
    }
}

#[derive(Debug)]
struct Running {
    exec: ScriptExec,
    started_ms: f64,
    retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub rank: Rank,
    pub start_ms: f64,
    pub end_ms: f64,
    pub prefill_tokens: usize,
    pub decode_seqs: usize,
}

impl StepRecord {
    fn new(rank: Rank, r: &StepReport) -> Self {
        Self {
            rank,
            start_ms: r.start_ms,
            end_ms: r.end_ms,
            prefill_tokens: r.prefill_tokens,
            decode_seqs: r.decode_seqs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub request_id: RequestId,
    pub kind: ScriptKind,
    pub strategy: String,
    pub start_ms: f64,
    pub end_ms: f64,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub strategy: String,
    pub metrics: Vec<RequestMetrics>,
    pub steps: Vec<StepRecord>,
    pub calls: Vec<CallRecord>,
    pub scripts: Vec<ScriptRecord>,
    pub transfers: Vec<TransferRecord>,
    pub strategy_changes: Vec<(f64, String)>,
    pub end_ms: f64,
    /// Events scheduled earlier than the event that caused them.
    pub causality_violations: usize,
    /// Engine instances constructed over the run.
    pub engine_starts: usize,
    pub saturated: bool,
}

impl SimResult {
    pub fn count(&self, status: RequestStatus) -> usize {
        self.metrics.iter().filter(|m| m.status == status).count()
    }

    pub fn migrations(&self) -> Vec<&ScriptRecord> {
        self.scripts
            .iter()
            .filter(|s| matches!(s.kind, ScriptKind::Migration { .. }))
            .collect()
    }
}

/// Load is judged unsustainable when late arrivals wait much longer than
/// early ones: mean JCT of the last quarter of arrivals exceeds
/// `SATURATION_GROWTH` times that of the second quarter.
pub const SATURATION_GROWTH: f64 = 1.5;

pub fn is_saturated(metrics: &[RequestMetrics]) -> bool {
    if metrics.iter().any(|m| m.status == RequestStatus::InFlight) {
        return true;
    }
    let arrivals = metrics.iter().map(|m| m.arrival_ms);
    let (Some(first), Some(last)) = (arrivals.clone().min_by(f64::total_cmp), arrivals.max_by(f64::total_cmp)) else {
        return false;
    };
    let span = last - first;
    let quarter = |q: f64| {
        let (lo, hi) = (first + span * (q - 1.0) / 4.0, first + span * q / 4.0);
        let v: Vec<f64> = metrics
            .iter()
            .filter(|m| m.arrival_ms >= lo && m.arrival_ms <= hi)
            .filter_map(|m| m.jct())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    match (quarter(2.0), quarter(4.0)) {
        (Some(q2), Some(q4)) => q4 > SATURATION_GROWTH * q2,
        _ => false,
    }
}

pub struct Simulator {
    topology: Topology,
    engines: BTreeMap<Rank, Engine>,
    router: Router,
    net: VirtualNetwork,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    now: f64,
    wake_at: BTreeMap<Rank, f64>,
    running: BTreeMap<RequestId, Running>,
    metrics: BTreeMap<RequestId, RequestMetrics>,
    unacked: HashMap<(Rank, SendTag, u32), (Rank, WriteFrame)>,
    trace: Vec<TraceRequest>,
    steps: Vec<StepRecord>,
    calls: Vec<CallRecord>,
    scripts: Vec<ScriptRecord>,
    strategy_changes: Vec<(f64, String)>,
    causality_violations: usize,
    engine_starts: usize,
    initial_strategy: String,
    /// Ask the router for a migration after every arrival.
    pub auto_migrate: bool,
}

impl Simulator {
    pub fn new(topology: &Topology, strategy: StrategySpec) -> Result<Self, BenchError> {
        let mut engines = BTreeMap::new();
        for e in &topology.engines {
            engines.insert(e.rank, Engine::new(topology.engine_config(e.rank))?);
        }
        let initial_strategy = strategy.label();
        let router = Router::new(topology.engines.clone(), strategy)?;
        Ok(Self {
            engine_starts: engines.len(),
            topology: topology.clone(),
            engines,
            router,
            net: VirtualNetwork::new(topology.cost),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            wake_at: BTreeMap::new(),
            running: BTreeMap::new(),
            metrics: BTreeMap::new(),
            unacked: HashMap::new(),
            trace: Vec::new(),
            steps: Vec::new(),
            calls: Vec::new(),
            scripts: Vec::new(),
            strategy_changes: Vec::new(),
            causality_violations: 0,
            initial_strategy,
            auto_migrate: true,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut Router {
        &mut self.router
    }

    pub fn engine(&self, rank: Rank) -> Option<&Engine> {
        self.engines.get(&rank)
    }

    pub fn engine_mut(&mut self, rank: Rank) -> Option<&mut Engine> {
        self.engines.get_mut(&rank)
    }

    pub fn set_faults(&mut self, faults: FaultInjector) {
        self.net.faults = faults;
    }

    /// Switches the router strategy at virtual time `t_ms`.
    pub fn schedule_strategy(&mut self, t_ms: f64, spec: StrategySpec) {
        self.schedule(t_ms, Event::SetStrategy(spec));
    }

    fn schedule(&mut self, t: f64, ev: Event) {
        if t < self.now - 1e-9 {
            self.causality_violations += 1;
        }
        let t = t.max(self.now);
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            t: OrderedMs(t),
            seq: self.seq,
            ev,
        }));
    }

    /// Appends requests to the arrival schedule. Arrival times are relative
    /// to the current clock.
    pub fn submit(&mut self, trace: Vec<TraceRequest>) {
        let base = self.now;
        for mut r in trace {
            r.arrival_ms += base;
            let i = self.trace.len();
            self.schedule(r.arrival_ms, Event::Arrival(i));
            self.trace.push(r);
        }
    }

    /// Runs the router's warmup scripts to completion before any traffic.
    pub fn warmup(&mut self) {
        for s in self.router.warmup_scripts() {
            self.start_script(s);
        }
        self.run_until_idle();
    }

    /// Starts an arbitrary script, such as a hand-built migration.
    pub fn start_script(&mut self, script: Script) {
        let rid = script.request_id;
        self.running.insert(
            rid,
            Running {
                exec: ScriptExec::new(script),
                started_ms: self.now,
                retries: 0,
            },
        );
        self.advance(rid);
    }

    pub fn run_until_idle(&mut self) {
        while let Some(Reverse(q)) = self.queue.pop() {
            self.now = q.t.0;
            self.handle(q.ev);
        }
    }

    /// Processes every event with timestamp <= `t_ms`.
    pub fn run_until(&mut self, t_ms: f64) {
        while self.queue.peek().is_some_and(|Reverse(q)| q.t.0 <= t_ms) {
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.now = q.t.0;
            self.handle(q.ev);
        }
        self.now = self.now.max(t_ms);
    }

    /// Submits `trace`, runs to quiescence and collects the results.
    pub fn run(mut self, trace: Vec<TraceRequest>) -> SimResult {
        self.submit(trace);
        self.run_until_idle();
        self.finish()
    }

    pub fn finish(self) -> SimResult {
        let mut metrics: Vec<RequestMetrics> = self.metrics.into_values().collect();
        metrics.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.request_id.cmp(&b.request_id)));
        let saturated = is_saturated(&metrics);
        SimResult {
            strategy: self.initial_strategy,
            metrics,
            steps: self.steps,
            calls: self.calls,
            scripts: self.scripts,
            transfers: self.net.log().to_vec(),
            strategy_changes: self.strategy_changes,
            end_ms: self.now,
            causality_violations: self.causality_violations,
            engine_starts: self.engine_starts,
            saturated,
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Arrival(i) => self.on_arrival(i),
            Event::Advance(rid) => self.advance(rid),
            Event::Wake(rank) => {
                self.wake_at.remove(&rank);
                if let Some(e) = self.engines.get_mut(&rank) {
                    if let Some(r) = e.step(self.now) {
                        self.steps.push(StepRecord::new(rank, &r));
                    }
                }
                self.pump(rank);
            }
            Event::Engine(rank, ev) => self.on_engine_event(rank, ev),
            Event::Deliver(f) => self.on_deliver(f),
            Event::Ack {
                src,
                dst,
                tag,
                layer,
                attempt,
                status,
            } => self.on_ack(src, dst, tag, layer, attempt, status),
            Event::SetStrategy(spec) => {
                let label = spec.label();
                if self.router.set_strategy(spec).is_ok() {
                    self.strategy_changes.push((self.now, label));
                }
            }
        }
    }

    fn on_arrival(&mut self, i: usize) {
        let r = self.trace[i].clone();
        let input_len = r.prompt.len();
        match self.router.route(r.prompt, r.max_tokens, None) {
            Ok(script) => {
                self.metrics.insert(
                    script.request_id,
                    RequestMetrics {
                        request_id: script.request_id,
                        strategy: script.strategy.clone(),
                        engine: script.generator(),
                        input_len,
                        arrival_ms: self.now,
                        first_token_ms: None,
                        completion_ms: None,
                        status: RequestStatus::InFlight,
                        tokens: Vec::new(),
                    },
                );
                self.start_script(script);
            }
            Err(_) => {
                let id = (1 << 62) | i as RequestId;
                self.metrics.insert(
                    id,
                    RequestMetrics {
                        request_id: id,
                        strategy: self.router.strategy().label(),
                        engine: None,
                        input_len,
                        arrival_ms: self.now,
                        first_token_ms: None,
                        completion_ms: None,
                        status: RequestStatus::Aborted,
                        tokens: Vec::new(),
                    },
                );
            }
        }
        if self.auto_migrate {
            if let Some(m) = self.router.maybe_migrate() {
                self.start_script(m);
            }
        }
    }

    fn advance(&mut self, rid: RequestId) {
        loop {
            let now = self.now;
            let Some(run) = self.running.get_mut(&rid) else { return };
            let action = match run.exec.next_action(now) {
                None => {
                    if run.exec.is_done() {
                        self.end_script(rid, None);
                    }
                    return;
                }
                Some(Err(e)) => return self.end_script(rid, Some(e.to_string())),
                Some(Ok(a)) => a,
            };
            match self.dispatch(action) {
                Ok(Some(outcome)) => {
                    let run = self.running.get_mut(&rid).expect("running");
                    run.exec.complete(outcome, now);
                }
                Ok(None) => return,
                Err(e) => {
                    let run = self.running.get_mut(&rid).expect("running");
                    if e.retryable && run.retries < MAX_RETRIES {
                        run.retries += 1;
                        run.exec.retry_in_flight();
                        self.schedule(now + RETRY_MS, Event::Advance(rid));
                        return;
                    }
                    return self.end_script(rid, Some(e.to_string()));
                }
            }
        }
    }

    /// Issues one call. `Ok(Some)` completes immediately; `Ok(None)` waits
    /// for an engine event.
    fn dispatch(&mut self, action: Action) -> Result<Option<CallOutcome>, ApiError> {
        let now = self.now;
        let rank = match &action {
            Action::PrepRecv(r, _) | Action::RemoteSend(r, _) | Action::StartGenerate(r, _) | Action::Pin(r, _) => *r,
        };
        let engine = self
            .engines
            .get_mut(&rank)
            .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, format!("no engine {rank}")))?;
        let out = match action {
            Action::PrepRecv(_, req) => engine.prep_recv(req, now).map(|r| Some(CallOutcome::Prepared(r))),
            Action::RemoteSend(_, req) => engine.remote_send(req, now).map(|_| None),
            Action::StartGenerate(_, req) => engine.start_generate(req, now).map(|_| None),
            Action::Pin(_, req) => {
                engine.pin(&req, now);
                Ok(Some(CallOutcome::Pinned))
            }
        };
        self.pump(rank);
        out
    }

    /// Moves an engine's events and outgoing frames into the event queue
    /// and makes sure it wakes when it has work.
    fn pump(&mut self, rank: Rank) {
        let Some(e) = self.engines.get_mut(&rank) else { return };
        let events = e.take_events();
        let outgoing = e.take_outgoing();
        let dim = e.model().dim();
        let wake = e.has_work().then(|| e.busy_until().max(self.now));
        for ev in events {
            let t = match &ev {
                EngineEvent::Token(t) => t.t_ms,
                EngineEvent::SendDone { t_ms, .. } | EngineEvent::ContextReady { t_ms, .. } => *t_ms,
            };
            self.schedule(t, Event::Engine(rank, ev));
        }
        for f in outgoing {
            let wf = WriteFrame::from_layer_write(&f.write, dim);
            let dst = f.write.dest;
            let inflight = self.net.submit(rank, dst, f.ready_ms.0, &wf, 0);
            self.unacked.insert((rank, wf.tag, wf.layer), (dst, wf));
            self.schedule(inflight.delivered_ms, Event::Deliver(inflight));
        }
        if let Some(t) = wake {
            if let std::collections::btree_map::Entry::Vacant(slot) = self.wake_at.entry(rank) {
                slot.insert(t);
                self.schedule(t, Event::Wake(rank));
            }
        }
    }

    fn on_deliver(&mut self, f: InFlight) {
        let status = match self.engines.get_mut(&f.dst) {
            Some(e) => {
                let mut sink = |w: &WriteFrame| {
                    e.apply_frame(w.tag, w.layer, &w.addr.ranges, &w.words)
                        .map(|a| a.duplicate)
                        .map_err(|err| err.to_string())
                };
                receive(&f.bytes, &mut sink).map_or(AckStatus::ChecksumMismatch, |a| a.status)
            }
            None => AckStatus::Rejected,
        };
        self.pump(f.dst);
        self.schedule(
            self.now,
            Event::Ack {
                src: f.src,
                dst: f.dst,
                tag: f.tag,
                layer: f.layer,
                attempt: f.attempt,
                status,
            },
        );
    }

    fn on_ack(&mut self, src: Rank, dst: Rank, tag: SendTag, layer: u32, attempt: u8, status: AckStatus) {
        let key = (src, tag, layer);
        if status == AckStatus::ChecksumMismatch && attempt == 0 {
            if let Some((_, wf)) = self.unacked.get(&key).cloned() {
                let inflight = self.net.submit(src, dst, self.now, &wf, 1);
                self.schedule(inflight.delivered_ms, Event::Deliver(inflight));
                return;
            }
        }
        self.unacked.remove(&key);
        if let Some(e) = self.engines.get_mut(&src) {
            e.on_ack(tag, layer, status == AckStatus::Ok, self.now);
        }
        self.pump(src);
    }

    fn on_engine_event(&mut self, _rank: Rank, ev: EngineEvent) {
        match ev {
            EngineEvent::Token(t) => {
                let rid = t.request_id;
                if let Some(m) = self.metrics.get_mut(&rid) {
                    if t.error.is_none() {
                        if t.index == 0 {
                            m.first_token_ms = Some(t.t_ms);
                        }
                        m.tokens.push(t.token);
                    }
                    if t.finish.is_some() {
                        m.completion_ms = Some(t.t_ms);
                    }
                }
                if t.finish.is_none() {
                    return;
                }
                if let Some(err) = t.error {
                    return self.end_script(rid, Some(err.to_string()));
                }
                if let Some(run) = self.running.get_mut(&rid) {
                    run.exec.complete(CallOutcome::Generated, self.now);
                    self.advance(rid);
                }
            }
            EngineEvent::SendDone { request_id, result, .. } => match result {
                Ok(resp) => {
                    if let Some(run) = self.running.get_mut(&request_id) {
                        run.exec.complete(CallOutcome::Sent(resp), self.now);
                        self.advance(request_id);
                    }
                }
                Err(e) => self.end_script(request_id, Some(e.to_string())),
            },
            EngineEvent::ContextReady { .. } => {}
        }
    }

    fn end_script(&mut self, rid: RequestId, error: Option<String>) {
        let Some(run) = self.running.remove(&rid) else { return };
        let ok = error.is_none();
        if !ok {
            // Free receive slots prepared for this script.
            for (i, call) in run.exec.script.calls.iter().enumerate() {
                if let Some(CallOutcome::Prepared(_)) = run.exec.outcome(i) {
                    if let Some(e) = self.engines.get_mut(&call.engine()) {
                        e.cancel(rid);
                    }
                }
            }
        }
        if let Some(m) = self.metrics.get_mut(&rid) {
            m.status = if ok { RequestStatus::Completed } else { RequestStatus::Aborted };
        }
        self.router.on_script_done(&run.exec.script, ok);
        self.scripts.push(ScriptRecord {
            request_id: rid,
            kind: run.exec.script.kind.clone(),
            strategy: run.exec.script.strategy.clone(),
            start_ms: run.started_ms,
            end_ms: self.now,
            ok,
            error,
        });
        self.calls.extend(run.exec.log);
    }
}

/// Runs `trace` on a fresh simulator.
pub fn run(trace: &[TraceRequest], topology: &Topology, strategy: StrategySpec) -> Result<SimResult, BenchError> {
    let mut sim = Simulator::new(topology, strategy)?;
    sim.warmup();
    Ok(sim.run(trace.to_vec()))
}
