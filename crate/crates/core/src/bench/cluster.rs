// SPDX-License-Identifier: Apache-2.0

//! Runs over the TCP backend: frame-level differential checks against the
//! in-memory backend, and a three-process cluster (two engines plus the
//! router) driven over HTTP and compared with the simulator.

use std::collections::HashMap;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::metrics::RequestStatus;
use super::sim::{run, Simulator, Topology};
use super::verify::{migration_setup, random_prompt, reference_model};
use super::workload::TraceRequest;
use super::BenchError;
use crate::engine::api::{PrepRecvRequest, RemoteSendRequest, StartGenerateRequest};
use crate::engine::{Engine, OutgoingFrame, PeerAddr};
use crate::kvcache::{CacheConfig, Rank};
use crate::router::service::{GenerateRequest, GenerateResponse, RouterConfig};
use crate::router::{ClusterView, EngineEntry, Role, StrategySpec};
use crate::toymodel::Token;
use crate::transport::frame::{self, WriteFrame};
use crate::transport::mem::{receive, VirtualNetwork};
use crate::transport::tcp::{SharedSink, TcpReceiver, TcpSender};

type Verdict = Result<(bool, String), BenchError>;

fn scenario(e: impl std::fmt::Display) -> BenchError {
    BenchError::Scenario(e.to_string())
}

fn service_cache() -> CacheConfig {
    CacheConfig {
        pages: 4096,
        page_size: 16,
    }
}

/// Steps `e` until idle, collecting outgoing frames.
fn drive(e: &mut Engine, t: &mut f64, out: &mut Vec<OutgoingFrame>) {
    loop {
        out.extend(e.take_outgoing());
        match e.step(*t) {
            Some(r) => *t = r.end_ms,
            None => break,
        }
    }
    out.extend(e.take_outgoing());
    e.take_events();
}

fn warm(e: &mut Engine, prefix: &[Token], t: &mut f64) -> Result<(), BenchError> {
    if prefix.is_empty() {
        return Ok(());
    }
    e.start_generate(
        StartGenerateRequest {
            request_id: None,
            prompt: prefix.to_vec(),
            begin: 0,
            max_tokens: 1,
        },
        *t,
    )?;
    drive(e, t, &mut Vec::new());
    Ok(())
}

/// Sends the same transfers through both backends and compares the bytes
/// each receiver got, then the resulting receiver caches.
fn differential(transfers: usize) -> Result<(usize, usize, usize), BenchError> {
    let topo = Topology::disaggregated(1, 1);
    let config = |rank| {
        let mut c = topo.engine_config(rank);
        c.cache = service_cache();
        c
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut frames, mut differing, mut state_mismatch) = (0, 0, 0);
    for _ in 0..transfers {
        let len = rng.random_range(2..=300);
        let prompt = random_prompt(&mut rng, len);
        let s = rng.random_range(0..len);
        let r = rng.random_range(0..len);
        let mut t = 0.0;
        let mut sender = Engine::new(config(0))?;
        let mut mem_rx = Engine::new(config(1))?;
        let mut tcp_rx = Engine::new(config(1))?;
        warm(&mut sender, &prompt[..s], &mut t)?;
        warm(&mut mem_rx, &prompt[..r], &mut t)?;
        let mut t2 = 0.0;
        warm(&mut tcp_rx, &prompt[..r], &mut t2)?;
        let prep = PrepRecvRequest {
            request_id: Some(7),
            prompt: prompt.clone(),
            end: -1,
            context_only: false,
        };
        let a = mem_rx.prep_recv(prep.clone(), t)?;
        let b = tcp_rx.prep_recv(prep, t)?;
        if a != b {
            return Err(scenario("receivers prepared different addresses"));
        }
        if a.kv_addr_info.token_count == 0 {
            continue;
        }
        sender.remote_send(
            RemoteSendRequest {
                request_id: Some(7),
                prompt: prompt.clone(),
                begin: a.match_len as i64,
                end: -1,
                recv_rank: 1,
                recv_addr: a.kv_addr_info,
            },
            t,
        )?;
        let mut out = Vec::new();
        drive(&mut sender, &mut t, &mut out);

        let tcp_rx = Arc::new(Mutex::new(tcp_rx));
        let got: Arc<Mutex<Vec<Vec<u8>>>> = Arc::default();
        let (g, rx) = (got.clone(), tcp_rx.clone());
        let sink: SharedSink = Arc::new(move |w: &WriteFrame| {
            g.lock().unwrap().push(frame::encode_write(w));
            rx.lock()
                .unwrap()
                .apply_frame(w.tag, w.layer, &w.addr.ranges, &w.words)
                .map(|a| a.duplicate)
                .map_err(|e| e.to_string())
        });
        let listener = TcpReceiver::bind("127.0.0.1:0", sink)?;
        let tx = TcpSender::new(HashMap::from([(1, listener.local_addr().to_string())]));
        let mut net = VirtualNetwork::new(topo.cost);
        let mut mem_bytes = Vec::new();
        for f in &out {
            let wf = WriteFrame::from_layer_write(&f.write, topo.model.dim);
            let inflight = net.submit(0, 1, f.ready_ms.0, &wf, 0);
            let mut sink = |w: &WriteFrame| {
                mem_rx
                    .apply_frame(w.tag, w.layer, &w.addr.ranges, &w.words)
                    .map(|a| a.duplicate)
                    .map_err(|e| e.to_string())
            };
            receive(&inflight.bytes, &mut sink);
            mem_bytes.push(inflight.bytes);
            tx.send(1, &wf).map_err(scenario)?;
        }
        let got = got.lock().unwrap();
        frames += mem_bytes.len();
        differing += mem_bytes.len().abs_diff(got.len());
        differing += mem_bytes.iter().zip(got.iter()).filter(|(a, b)| a != b).count();
        let tcp_rx = tcp_rx.lock().unwrap();
        let (Some(sa), Some(sb)) = (mem_rx.receiving_seq(7), tcp_rx.receiving_seq(7)) else {
            return Err(scenario("receive disappeared"));
        };
        for pos in 0..len - 1 {
            for layer in 0..topo.model.layers {
                if mem_rx.cache().entry(sa, pos, layer) != tcp_rx.cache().entry(sb, pos, layer) {
                    state_mismatch += 1;
                }
            }
        }
    }
    Ok((frames, differing, state_mismatch))
}

fn free_port() -> Result<u16, BenchError> {
    Ok(TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

/// Child processes killed on drop.
struct Cluster {
    children: Vec<Child>,
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for c in &mut self.children {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

struct Addrs {
    api: [String; 2],
    transfer: [String; 2],
    router: String,
}

fn spawn(bin: &Path, dir: &Path, addrs: &Addrs, strategy: &StrategySpec) -> Result<Cluster, BenchError> {
    let topo = Topology::disaggregated(1, 1);
    let mut cluster = Cluster { children: Vec::new() };
    let start = |cluster: &mut Cluster, kind: &str, path: &Path| -> Result<(), BenchError> {
        let log = std::fs::File::create(path.with_extension("log"))?;
        let child = Command::new(bin)
            .args([kind, "--config"])
            .arg(path)
            .stdout(Stdio::null())
            .stderr(log)
            .spawn()?;
        cluster.children.push(child);
        Ok(())
    };
    for rank in 0..2u32 {
        let other = 1 - rank as usize;
        let mut c = topo.engine_config(rank);
        c.cache = service_cache();
        c.any_peer = false;
        c.api_addr = Some(addrs.api[rank as usize].clone());
        c.transfer_addr = Some(addrs.transfer[rank as usize].clone());
        c.peers = vec![PeerAddr {
            rank: other as Rank,
            transfer: addrs.transfer[other].clone(),
            api: Some(addrs.api[other].clone()),
        }];
        let path = dir.join(format!("engine{rank}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&c)?)?;
        start(&mut cluster, "engine", &path)?;
    }
    let rc = RouterConfig {
        listen: addrs.router.clone(),
        engines: [Role::Prefill, Role::Decode]
            .into_iter()
            .enumerate()
            .map(|(i, role)| EngineEntry {
                rank: i as Rank,
                role,
                api: Some(addrs.api[i].clone()),
            })
            .collect(),
        strategy: strategy.clone(),
        auto_migrate: true,
    };
    let path = dir.join("router.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&rc)?)?;
    start(&mut cluster, "router", &path)?;
    Ok(cluster)
}

struct Http {
    client: reqwest::Client,
    router: String,
}

impl Http {
    async fn wait_ready(&self, urls: &[String]) -> Result<(), BenchError> {
        let deadline = Instant::now() + Duration::from_secs(20);
        for url in urls {
            loop {
                if self.client.get(url).send().await.is_ok_and(|r| r.status().is_success()) {
                    break;
                }
                if Instant::now() > deadline {
                    return Err(scenario(format!("{url} never came up")));
                }
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
        Ok(())
    }

    async fn post<T: serde::de::DeserializeOwned>(&self, path: &str, body: &serde_json::Value) -> Result<T, BenchError> {
        let resp = self
            .client
            .post(format!("http://{}{path}", self.router))
            .json(body)
            .send()
            .await
            .map_err(scenario)?;
        let status = resp.status();
        let text = resp.text().await.map_err(scenario)?;
        if !status.is_success() {
            return Err(scenario(format!("{path}: {status} {text}")));
        }
        serde_json::from_str(&text).map_err(scenario)
    }

    async fn cluster(&self) -> Result<ClusterView, BenchError> {
        self.client
            .get(format!("http://{}/admin/cluster", self.router))
            .send()
            .await
            .map_err(scenario)?
            .json()
            .await
            .map_err(scenario)
    }

    /// Sends requests a few at a time so that scripts overlap.
    async fn generate_all(&self, trace: &[TraceRequest]) -> Result<Vec<GenerateResponse>, BenchError> {
        let mut out = Vec::new();
        for chunk in trace.chunks(4) {
            let calls = chunk.iter().map(|t| {
                let body = serde_json::to_value(GenerateRequest {
                    prompt: t.prompt.clone(),
                    max_tokens: t.max_tokens,
                    request_id: None,
                })
                .expect("serializable");
                async move { self.post::<GenerateResponse>("/v1/generate", &body).await }
            });
            for r in futures::future::join_all(calls).await {
                out.push(r?);
            }
        }
        Ok(out)
    }
}

fn simple_trace(rng: &mut ChaCha8Rng, n: usize, t0: f64) -> Vec<TraceRequest> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=400);
            TraceRequest {
                arrival_ms: t0 + 50.0 * i as f64,
                prompt: random_prompt(rng, len),
                max_tokens: rng.random_range(1..=12),
                context: None,
            }
        })
        .collect()
}

/// Tokens of each trace entry as produced by the simulator.
fn sim_tokens(r: &super::sim::SimResult) -> Vec<Option<Vec<Token>>> {
    r.metrics
        .iter()
        .map(|m| (m.status == RequestStatus::Completed).then(|| m.tokens.clone()))
        .collect()
}

fn three_process(bin: &Path) -> Verdict {
    let dir = tempfile::tempdir()?;
    let addrs = Addrs {
        api: [format!("127.0.0.1:{}", free_port()?), format!("127.0.0.1:{}", free_port()?)],
        transfer: [format!("127.0.0.1:{}", free_port()?), format!("127.0.0.1:{}", free_port()?)],
        router: format!("127.0.0.1:{}", free_port()?),
    };
    let _cluster = spawn(bin, dir.path(), &addrs, &StrategySpec::PdDisagg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pd_trace = simple_trace(&mut rng, 24, 0.0);
    let bal_trace = simple_trace(&mut rng, 12, 5000.0);
    let (cfg, mig_trace) = migration_setup(&mut rng, 60);

    // Simulated reference runs of the same traffic.
    let mut sim = Simulator::new(&Topology::disaggregated(1, 1), StrategySpec::PdDisagg)?;
    sim.schedule_strategy(4000.0, StrategySpec::BalancedPd { ratio: 0.2 });
    let mut both = pd_trace.clone();
    both.extend(bal_trace.iter().cloned());
    let sim_pd = sim.run(both);
    let sim_mig = run(&mig_trace, &Topology::disaggregated(1, 1), StrategySpec::ContextMigration(cfg.clone()))?;

    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let http = Http {
        client: reqwest::Client::new(),
        router: addrs.router.clone(),
    };
    let (pd, bal, mig, view) = rt.block_on(async {
        let mut urls: Vec<String> = addrs.api.iter().map(|a| format!("http://{a}/stats")).collect();
        urls.push(format!("http://{}/admin/cluster", addrs.router));
        http.wait_ready(&urls).await?;
        let pd = http.generate_all(&pd_trace).await?;
        http.post::<ClusterView>("/admin/strategy", &json!({"name": "balanced_pd", "params": {"ratio": 0.2}}))
            .await?;
        let bal = http.generate_all(&bal_trace).await?;
        let spec = serde_json::to_value(StrategySpec::ContextMigration(cfg.clone()))?;
        http.post::<ClusterView>("/admin/strategy", &spec).await?;
        http.post::<serde_json::Value>("/admin/warmup", &json!({})).await?;
        let mig = http.generate_all(&mig_trace).await?;
        let deadline = Instant::now() + Duration::from_secs(10);
        let mut view = http.cluster().await?;
        while view.migrations == 0 && Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(50)).await;
            view = http.cluster().await?;
        }
        Ok::<_, BenchError>((pd, bal, mig, view))
    })?;

    let model = reference_model();
    let live: Vec<&GenerateResponse> = pd.iter().chain(&bal).collect();
    let sim_a = sim_tokens(&sim_pd);
    let pd_bad = live
        .iter()
        .zip(pd_trace.iter().chain(&bal_trace))
        .zip(&sim_a)
        .filter(|((g, t), s)| s.as_ref() != Some(&g.tokens) || g.tokens != model.generate(&t.prompt, t.max_tokens))
        .count()
        + live.len().abs_diff(sim_a.len());
    let sim_b = sim_tokens(&sim_mig);
    let mig_bad = mig
        .iter()
        .zip(&mig_trace)
        .zip(&sim_b)
        .filter(|((g, t), s)| s.as_ref() != Some(&g.tokens) || g.tokens != model.generate(&t.prompt, t.max_tokens))
        .count()
        + mig.len().abs_diff(sim_b.len());
    let moved = mig.iter().filter(|g| g.engine == Some(1) && !g.tokens.is_empty()).count();
    let strategies: Vec<&str> = {
        let mut v: Vec<&str> = live.iter().copied().chain(&mig).map(|g| g.strategy.as_str()).collect();
        v.dedup();
        v
    };
    let ok = pd_bad == 0 && mig_bad == 0 && view.migrations == 1 && sim_mig.migrations().len() == 1 && strategies.len() == 3;
    Ok((
        ok,
        format!(
            "3 processes: pd/balanced requests {} (token mismatches vs simulation {pd_bad}), migration scenario {} \
             (mismatches {mig_bad}, migrations live={} sim={}, served by engine 1: {moved}), strategies {strategies:?}",
            live.len(),
            mig.len(),
            view.migrations,
            sim_mig.migrations().len()
        ),
    ))
}

pub fn tcp_protocol_check(bin: Option<&Path>) -> Verdict {
    let (frames, differing, state_mismatch) = differential(50)?;
    let mut ok = differing == 0 && state_mismatch == 0 && frames > 0;
    let mut detail = format!(
        "50 transfers, {frames} frames: byte differences between backends {differing}, receiver entry differences {state_mismatch}"
    );
    match bin {
        Some(bin) => {
            let (pass, d) = three_process(bin)?;
            ok &= pass;
            detail.push_str("; ");
            detail.push_str(&d);
        }
        None => {
            ok = false;
            detail.push_str("; microserve binary not found");
        }
    }
    Ok((ok, detail))
}
