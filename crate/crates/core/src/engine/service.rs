// SPDX-License-Identifier: Apache-2.0

//! HTTP front end of one engine process, plus the client the router uses
//! to call it.
//!
//! A dedicated thread owns the step loop. It runs each batch, sleeps for the
//! batch's modeled duration on the wall clock, then releases the batch's
//! token events. A second thread streams outgoing layer writes over TCP and
//! feeds acks back. HTTP handlers only enqueue work and await completions.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use futures::StreamExt;
use serde::de::DeserializeOwned;
use tokio::sync::{mpsc as tmpsc, oneshot};

use super::api::{
    ApiError, EngineStats, ErrorCode, PinRequest, PinResponse, PrepRecvRequest, PrepRecvResponse,
    RemoteSendRequest, RemoteSendResponse, RequestId, StartGenerateRequest, TokenEvent,
};
use super::{Engine, EngineConfig, EngineEvent, OutgoingFrame};
use crate::transport::frame::WriteFrame;
use crate::transport::tcp::{SharedSink, TcpReceiver, TcpSender};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config {path}: {detail}")]
    Config { path: String, detail: String },
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error("{0}")]
    Other(String),
}

/// Reads a TOML or JSON (by `.json` extension) config file.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, ServiceError> {
    let text = std::fs::read_to_string(path)?;
    let err = |detail: String| ServiceError::Config {
        path: path.display().to_string(),
        detail,
    };
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

fn status_of(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::BadRequest | ErrorCode::AddrMismatch | ErrorCode::MissingKv => StatusCode::BAD_REQUEST,
        ErrorCode::UnknownRequest => StatusCode::NOT_FOUND,
        ErrorCode::DuplicateRequest => StatusCode::CONFLICT,
        ErrorCode::OutOfPages => StatusCode::SERVICE_UNAVAILABLE,
        ErrorCode::PeerUnreachable => StatusCode::BAD_GATEWAY,
        ErrorCode::TransferFailed | ErrorCode::Aborted | ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_of(self.code), Json(self)).into_response()
    }
}

#[derive(Default)]
struct Routes {
    streams: HashMap<RequestId, tmpsc::UnboundedSender<TokenEvent>>,
    sends: HashMap<RequestId, oneshot::Sender<Result<RemoteSendResponse, ApiError>>>,
}

struct Shared {
    engine: Mutex<Engine>,
    wake: Condvar,
    routes: Mutex<Routes>,
    outbox: Mutex<mpsc::Sender<OutgoingFrame>>,
    clock: Instant,
    stop: AtomicBool,
}

impl Shared {
    fn now(&self) -> f64 {
        self.clock.elapsed().as_secs_f64() * 1e3
    }

    fn sleep_until(&self, t_ms: f64) {
        let dt = t_ms - self.now();
        if dt > 0.0 {
            thread::sleep(Duration::from_secs_f64(dt / 1e3));
        }
    }

    /// Drains the engine's outputs; must be called with the engine locked.
    fn drain(&self, engine: &mut Engine) -> Vec<EngineEvent> {
        let outbox = self.outbox.lock().unwrap();
        for f in engine.take_outgoing() {
            let _ = outbox.send(f);
        }
        self.wake.notify_all();
        engine.take_events()
    }

    fn dispatch(&self, events: Vec<EngineEvent>) {
        let mut routes = self.routes.lock().unwrap();
        for ev in events {
            match ev {
                EngineEvent::Token(t) => {
                    let id = t.request_id;
                    let last = t.finish.is_some();
                    if let Some(tx) = routes.streams.get(&id) {
                        let _ = tx.send(t);
                    }
                    if last {
                        routes.streams.remove(&id);
                    }
                }
                EngineEvent::SendDone { request_id, result, .. } => {
                    if let Some(tx) = routes.sends.remove(&request_id) {
                        let _ = tx.send(result);
                    }
                }
                EngineEvent::ContextReady { .. } => {}
            }
        }
    }

    fn step_loop(&self) {
        while !self.stop.load(Ordering::Relaxed) {
            let mut engine = self.engine.lock().unwrap();
            if !engine.has_work() {
                let (guard, _) = self.wake.wait_timeout(engine, Duration::from_millis(20)).unwrap();
                engine = guard;
                if !engine.has_work() {
                    continue;
                }
            }
            let report = engine.step(self.now());
            let events = self.drain(&mut engine);
            drop(engine);
            if let Some(r) = report {
                self.sleep_until(r.end_ms);
            }
            self.dispatch(events);
        }
    }

    fn send_loop(&self, rx: mpsc::Receiver<OutgoingFrame>, sender: TcpSender, dim: usize) {
        for f in rx {
            self.sleep_until(f.ready_ms.0);
            let wf = WriteFrame::from_layer_write(&f.write, dim);
            let ok = sender.send(f.write.dest, &wf).is_ok();
            let mut engine = self.engine.lock().unwrap();
            engine.on_ack(wf.tag, wf.layer, ok, self.now());
            let events = self.drain(&mut engine);
            drop(engine);
            self.dispatch(events);
        }
    }

    fn apply(&self, w: &WriteFrame) -> Result<bool, String> {
        let mut engine = self.engine.lock().unwrap();
        let applied = engine
            .apply_frame(w.tag, w.layer, &w.addr.ranges, &w.words)
            .map_err(|e| e.to_string())?;
        engine.poll(self.now());
        let events = self.drain(&mut engine);
        drop(engine);
        self.dispatch(events);
        Ok(applied.duplicate)
    }
}

/// A running engine: step loop, transfer threads and HTTP surface.
#[derive(Clone)]
pub struct EngineService {
    shared: Arc<Shared>,
    transfer_addr: SocketAddr,
}

impl EngineService {
    /// Builds the engine, binds the transfer listener and starts the step
    /// and send threads.
    pub fn start(config: EngineConfig) -> Result<Self, ServiceError> {
        let transfer = config.transfer_addr.clone().unwrap_or_else(|| "127.0.0.1:0".into());
        let peers = config
            .peers
            .iter()
            .map(|p| (p.rank, p.transfer.clone()))
            .collect::<HashMap<_, _>>();
        let engine = Engine::new(config)?;
        let dim = engine.model().dim();
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            engine: Mutex::new(engine),
            wake: Condvar::new(),
            routes: Mutex::new(Routes::default()),
            outbox: Mutex::new(tx),
            clock: Instant::now(),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let sink: SharedSink = Arc::new(move |w: &WriteFrame| s.apply(w));
        let receiver = TcpReceiver::bind(transfer, sink)?;
        let s = shared.clone();
        thread::Builder::new().name("engine-step".into()).spawn(move || s.step_loop())?;
        let s = shared.clone();
        let sender = TcpSender::new(peers);
        thread::Builder::new()
            .name("engine-send".into())
            .spawn(move || s.send_loop(rx, sender, dim))?;
        Ok(Self {
            shared,
            transfer_addr: receiver.local_addr(),
        })
    }

    pub fn transfer_addr(&self) -> SocketAddr {
        self.transfer_addr
    }

    /// Stops the step loop; the service must not be used afterwards.
    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::Relaxed);
    }

    fn call<T>(&self, f: impl FnOnce(&mut Engine, f64) -> T) -> T {
        let mut engine = self.shared.engine.lock().unwrap();
        let out = f(&mut engine, self.shared.now());
        let events = self.shared.drain(&mut engine);
        drop(engine);
        self.shared.dispatch(events);
        out
    }

    pub fn prep_recv(&self, req: PrepRecvRequest) -> Result<PrepRecvResponse, ApiError> {
        self.call(|e, now| e.prep_recv(req, now))
    }

    pub async fn remote_send(&self, req: RemoteSendRequest) -> Result<RemoteSendResponse, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.call(|e, now| {
            let id = e.remote_send(req, now)?;
            self.shared.routes.lock().unwrap().sends.insert(id, tx);
            Ok::<_, ApiError>(())
        })?;
        rx.await
            .unwrap_or_else(|_| Err(ApiError::new(ErrorCode::Internal, "send abandoned")))
    }

    pub fn start_generate(&self, req: StartGenerateRequest) -> Result<tmpsc::UnboundedReceiver<TokenEvent>, ApiError> {
        let (tx, rx) = tmpsc::unbounded_channel();
        self.call(|e, now| {
            let id = e.start_generate(req, now)?;
            self.shared.routes.lock().unwrap().streams.insert(id, tx);
            Ok::<_, ApiError>(())
        })?;
        Ok(rx)
    }

    pub fn stats(&self) -> EngineStats {
        self.call(|e, now| e.stats(now))
    }

    pub fn pin(&self, req: PinRequest) -> PinResponse {
        self.call(|e, now| e.pin(&req, now))
    }

    pub fn router(&self) -> axum::Router {
        axum::Router::new()
            .route("/prep_recv", post(h_prep_recv))
            .route("/remote_send", post(h_remote_send))
            .route("/start_generate", post(h_start_generate))
            .route("/stats", get(h_stats))
            .route("/pin", post(h_pin))
            .with_state(self.clone())
    }
}

async fn h_prep_recv(State(s): State<EngineService>, Json(req): Json<PrepRecvRequest>) -> Result<Json<PrepRecvResponse>, ApiError> {
    s.prep_recv(req).map(Json)
}

async fn h_remote_send(State(s): State<EngineService>, Json(req): Json<RemoteSendRequest>) -> Result<Json<RemoteSendResponse>, ApiError> {
    s.remote_send(req).await.map(Json)
}

async fn h_start_generate(State(s): State<EngineService>, Json(req): Json<StartGenerateRequest>) -> Result<Response, ApiError> {
    let rx = s.start_generate(req)?;
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let ev = rx.recv().await?;
        let mut line = serde_json::to_vec(&ev).expect("token event serializes");
        line.push(b'\n');
        Some((Ok::<_, std::convert::Infallible>(Bytes::from(line)), rx))
    });
    Ok(([("content-type", "application/x-ndjson")], Body::from_stream(stream)).into_response())
}

async fn h_stats(State(s): State<EngineService>) -> Json<EngineStats> {
    Json(s.stats())
}

async fn h_pin(State(s): State<EngineService>, Json(req): Json<PinRequest>) -> Json<PinResponse> {
    Json(s.pin(req))
}

/// Runs an engine process until the listener fails.
pub async fn serve(config: EngineConfig) -> Result<(), ServiceError> {
    let api = config.api_addr.clone().unwrap_or_else(|| "127.0.0.1:0".into());
    let rank = config.rank;
    let svc = EngineService::start(config)?;
    let listener = tokio::net::TcpListener::bind(&api).await?;
    println!(
        "engine {rank} api={} transfer={}",
        listener.local_addr()?,
        svc.transfer_addr()
    );
    axum::serve(listener, svc.router()).await?;
    Ok(())
}

/// HTTP client for one engine.
#[derive(Debug, Clone)]
pub struct EngineClient {
    base: String,
    http: reqwest::Client,
}

fn unreachable(e: reqwest::Error) -> ApiError {
    ApiError::new(ErrorCode::PeerUnreachable, e.to_string())
}

impl EngineClient {
    pub fn new(addr: &str, http: reqwest::Client) -> Self {
        let base = if addr.starts_with("http") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{addr}")
        };
        Self { base, http }
    }

    async fn post(&self, path: &str, body: &impl serde::Serialize) -> Result<reqwest::Response, ApiError> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .map_err(unreachable)?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(unreachable)?;
        Err(serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| ApiError::new(ErrorCode::Internal, format!("http {status}"))))
    }

    pub async fn prep_recv(&self, req: &PrepRecvRequest) -> Result<PrepRecvResponse, ApiError> {
        self.post("/prep_recv", req).await?.json().await.map_err(unreachable)
    }

    pub async fn remote_send(&self, req: &RemoteSendRequest) -> Result<RemoteSendResponse, ApiError> {
        self.post("/remote_send", req).await?.json().await.map_err(unreachable)
    }

    /// Runs a generation to completion and returns every event of the
    /// stream with its local arrival instant. A stream that ends with an
    /// error event yields that error.
    pub async fn start_generate(&self, req: &StartGenerateRequest) -> Result<Vec<(TokenEvent, Instant)>, ApiError> {
        let resp = self.post("/start_generate", req).await?;
        let mut body = resp.bytes_stream();
        let mut buf = Vec::new();
        let mut events = Vec::new();
        while let Some(chunk) = body.next().await {
            buf.extend_from_slice(&chunk.map_err(unreachable)?);
            while let Some(nl) = buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = buf.drain(..=nl).collect();
                let ev: TokenEvent = serde_json::from_slice(&line)
                    .map_err(|e| ApiError::new(ErrorCode::Internal, format!("bad token event: {e}")))?;
                events.push((ev, Instant::now()));
            }
        }
        match events.last().map(|(e, _)| e) {
            Some(TokenEvent { error: Some(e), .. }) => Err(e.clone()),
            Some(TokenEvent { finish: Some(_), .. }) => Ok(events),
            _ => Err(ApiError::new(ErrorCode::PeerUnreachable, "stream ended early")),
        }
    }

    pub async fn stats(&self) -> Result<EngineStats, ApiError> {
        self.http
            .get(format!("{}/stats", self.base))
            .send()
            .await
            .map_err(unreachable)?
            .json()
            .await
            .map_err(unreachable)
    }

    pub async fn pin(&self, req: &PinRequest) -> Result<PinResponse, ApiError> {
        self.post("/pin", req).await?.json().await.map_err(unreachable)
    }
}
