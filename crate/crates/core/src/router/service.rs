// SPDX-License-Identifier: Apache-2.0

//! HTTP gateway: turns generate requests into scripts and drives them
//! against engine processes.
//!
//! | endpoint              | body                       | response              |
//! |-----------------------|----------------------------|-----------------------|
//! | `POST /v1/generate`   | [`GenerateRequest`]        | [`GenerateResponse`]  |
//! | `POST /admin/strategy`| `{"name": .., "params": ..}` | [`ClusterView`]     |
//! | `GET /admin/cluster`  |                            | [`ClusterView`]       |
//! | `POST /admin/warmup`  |                            | [`WarmupResponse`]    |

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use serde::{Deserialize, Serialize};

use super::{Action, CallOutcome, ClusterView, EngineEntry, Router, RouterError, Script, ScriptExec, StrategySpec};
use crate::engine::api::{RequestId, TokenEvent};
use crate::engine::service::{EngineClient, ServiceError};
use crate::kvcache::Rank;
use crate::toymodel::Token;

const RETRY: Duration = Duration::from_millis(5);
const MAX_RETRIES: u32 = 2000;

/// Router process configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// `host:port` to listen on.
    pub listen: String,
    /// Engines with their roles and `api` addresses.
    pub engines: Vec<EngineEntry>,
    pub strategy: StrategySpec,
    /// Start migration scripts automatically when demand is imbalanced.
    #[serde(default = "yes")]
    pub auto_migrate: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: Vec<Token>,
    pub max_tokens: usize,
    #[serde(default)]
    pub request_id: Option<RequestId>,
}

/// Times are wall-clock ms measured at the router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub request_id: RequestId,
    pub strategy: String,
    pub engine: Option<Rank>,
    pub tokens: Vec<Token>,
    pub token_times_ms: Vec<f64>,
    pub ttft: f64,
    pub tpot: f64,
    pub jct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupResponse {
    pub scripts: usize,
    pub failed: usize,
}

impl IntoResponse for RouterError {
    fn into_response(self) -> Response {
        let status = match &self {
            RouterError::UnknownStrategy(_) | RouterError::InvalidParams(_) | RouterError::Protocol(_) => {
                StatusCode::BAD_REQUEST
            }
            RouterError::RoleMissing(_) | RouterError::NoOwner | RouterError::NoEngines => StatusCode::CONFLICT,
            RouterError::Engine(_) => StatusCode::BAD_GATEWAY,
        };
        let body = match self {
            RouterError::Engine(e) => serde_json::json!({ "error": e.to_string(), "engine_error": e }),
            other => serde_json::json!({ "error": other.to_string() }),
        };
        (status, Json(body)).into_response()
    }
}

struct Inner {
    router: Mutex<Router>,
    clients: HashMap<Rank, EngineClient>,
    auto_migrate: bool,
    clock: Instant,
}

#[derive(Clone)]
pub struct RouterService {
    inner: Arc<Inner>,
}

impl RouterService {
    pub fn new(config: &RouterConfig) -> Result<Self, ServiceError> {
        let router = Router::new(config.engines.clone(), config.strategy.clone())
            .map_err(|e| ServiceError::Other(e.to_string()))?;
        let http = reqwest::Client::new();
        let clients = config
            .engines
            .iter()
            .filter_map(|e| Some((e.rank, EngineClient::new(e.api.as_deref()?, http.clone()))))
            .collect();
        Ok(Self {
            inner: Arc::new(Inner {
                router: Mutex::new(router),
                clients,
                auto_migrate: config.auto_migrate,
                clock: Instant::now(),
            }),
        })
    }

    fn now(&self) -> f64 {
        self.inner.clock.elapsed().as_secs_f64() * 1e3
    }

    fn client(&self, rank: Rank) -> Result<&EngineClient, RouterError> {
        self.inner
            .clients
            .get(&rank)
            .ok_or_else(|| RouterError::Protocol(format!("no api address for engine {rank}")))
    }

    fn ms(&self, t: Instant) -> f64 {
        t.duration_since(self.inner.clock).as_secs_f64() * 1e3
    }

    async fn issue(&self, action: &Action, events: &mut Vec<(TokenEvent, f64)>) -> Result<CallOutcome, RouterError> {
        Ok(match action {
            Action::PrepRecv(r, req) => CallOutcome::Prepared(self.client(*r)?.prep_recv(req).await?),
            Action::RemoteSend(r, req) => CallOutcome::Sent(self.client(*r)?.remote_send(req).await?),
            Action::StartGenerate(r, req) => {
                let stream = self.client(*r)?.start_generate(req).await?;
                events.extend(stream.into_iter().map(|(e, t)| (e, self.ms(t))));
                CallOutcome::Generated
            }
            Action::Pin(r, req) => {
                self.client(*r)?.pin(req).await?;
                CallOutcome::Pinned
            }
        })
    }

    /// Runs a script call by call, retrying retryable engine errors, and
    /// returns the token events of its generation call.
    pub async fn execute(&self, script: Script) -> Result<Vec<(TokenEvent, f64)>, RouterError> {
        let mut exec = ScriptExec::new(script);
        let mut out = Vec::new();
        let mut retries = 0;
        let result = loop {
            let action = match exec.next_action(self.now()) {
                None => break Ok(()),
                Some(Err(e)) => break Err(e),
                Some(Ok(a)) => a,
            };
            let mut events = Vec::new();
            match self.issue(&action, &mut events).await {
                Ok(outcome) => {
                    out.extend(events);
                    exec.complete(outcome, self.now());
                }
                Err(RouterError::Engine(e)) if e.retryable && retries < MAX_RETRIES => {
                    retries += 1;
                    exec.retry_in_flight();
                    tokio::time::sleep(RETRY).await;
                }
                Err(e) => break Err(e),
            }
        };
        self.inner.router.lock().unwrap().on_script_done(&exec.script, result.is_ok());
        result.map(|_| out)
    }

    fn spawn_migration(&self) {
        if !self.inner.auto_migrate {
            return;
        }
        let Some(script) = self.inner.router.lock().unwrap().maybe_migrate() else { return };
        let svc = self.clone();
        tokio::spawn(async move {
            let _ = svc.execute(script).await;
        });
    }

    pub async fn generate(&self, req: GenerateRequest) -> Result<GenerateResponse, RouterError> {
        let arrival = self.now();
        let script = self.inner.router.lock().unwrap().route(req.prompt, req.max_tokens, req.request_id)?;
        self.spawn_migration();
        let (id, strategy, engine) = (script.request_id, script.strategy.clone(), script.generator());
        let events = self.execute(script).await?;
        let tokens: Vec<Token> = events.iter().map(|(e, _)| e.token).collect();
        let token_times_ms: Vec<f64> = events.iter().map(|(_, t)| *t).collect();
        let done = token_times_ms.last().copied().unwrap_or(arrival);
        let first = token_times_ms.first().copied().unwrap_or(done);
        let n = tokens.len();
        Ok(GenerateResponse {
            request_id: id,
            strategy,
            engine,
            tokens,
            ttft: first - arrival,
            tpot: if n > 1 { (done - first) / (n - 1) as f64 } else { 0.0 },
            jct: done - arrival,
            token_times_ms,
        })
    }

    pub fn set_strategy(&self, spec: StrategySpec) -> Result<ClusterView, RouterError> {
        let mut r = self.inner.router.lock().unwrap();
        r.set_strategy(spec)?;
        Ok(r.view())
    }

    pub fn view(&self) -> ClusterView {
        self.inner.router.lock().unwrap().view()
    }

    /// Computes and pins every category context on its owners.
    pub async fn warmup(&self) -> WarmupResponse {
        let scripts = self.inner.router.lock().unwrap().warmup_scripts();
        let n = scripts.len();
        let mut failed = 0;
        for s in scripts {
            failed += usize::from(self.execute(s).await.is_err());
        }
        WarmupResponse { scripts: n, failed }
    }

    pub fn router(&self) -> axum::Router {
        axum::Router::new()
            .route("/v1/generate", post(h_generate))
            .route("/admin/strategy", post(h_strategy))
            .route("/admin/cluster", get(h_cluster))
            .route("/admin/warmup", post(h_warmup))
            .with_state(self.clone())
    }
}

async fn h_generate(State(s): State<RouterService>, Json(req): Json<GenerateRequest>) -> Result<Json<GenerateResponse>, RouterError> {
    s.generate(req).await.map(Json)
}

async fn h_strategy(State(s): State<RouterService>, Json(body): Json<serde_json::Value>) -> Result<Json<ClusterView>, RouterError> {
    s.set_strategy(StrategySpec::from_json(body)?).map(Json)
}

async fn h_cluster(State(s): State<RouterService>) -> Json<ClusterView> {
    Json(s.view())
}

async fn h_warmup(State(s): State<RouterService>) -> Json<WarmupResponse> {
    Json(s.warmup().await)
}

/// Runs a router process until the listener fails.
pub async fn serve(config: RouterConfig) -> Result<(), ServiceError> {
    let svc = RouterService::new(&config)?;
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    println!("router api={}", listener.local_addr()?);
    axum::serve(listener, svc.router()).await?;
    Ok(())
}
