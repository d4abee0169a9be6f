// SPDX-License-Identifier: Apache-2.0

//! Engines and a router served in-process over HTTP on loopback.

use std::path::Path;

use microserve::bench::{Topology, WorkloadSpec};
use microserve::engine::api::ErrorCode;
use microserve::engine::service::{read_config, EngineClient, EngineService};
use microserve::engine::{EngineConfig, PeerAddr};
use microserve::kvcache::CacheConfig;
use microserve::router::service::{GenerateResponse, RouterConfig, RouterService};
use microserve::router::{EngineEntry, Role, StrategySpec};
use microserve::toymodel::{ModelConfig, ToyModel, Token};

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn example_configs_parse() {
    let e0: EngineConfig = read_config(&configs().join("engine0.toml")).unwrap();
    let e1: EngineConfig = read_config(&configs().join("engine1.toml")).unwrap();
    assert_eq!((e0.rank, e1.rank), (0, 1));
    assert_eq!(e0.peers[0].rank, 1);
    assert_eq!(e1.peers[0].transfer, e0.transfer_addr.clone().unwrap());
    assert_eq!(e0.model.layers, 32);
    let r: RouterConfig = read_config(&configs().join("router.toml")).unwrap();
    assert_eq!(r.strategy, StrategySpec::BalancedPd { ratio: 0.2 });
    assert_eq!(r.engines[1].role, Role::Decode);
    let w: WorkloadSpec = read_config(&configs().join("workload_long.toml")).unwrap();
    assert_eq!(w.vocab, 256);
    let t: Topology = read_config(&configs().join("topology_1p1d.toml")).unwrap();
    assert_eq!(t.engines.len(), 2);
    assert_eq!(t.model.layers, 32);
}

fn engine_config(rank: u32, peers: Vec<PeerAddr>) -> EngineConfig {
    EngineConfig {
        rank,
        model: ModelConfig {
            layers: 4,
            dim: 2,
            ..ModelConfig::default()
        },
        cache: CacheConfig {
            pages: 256,
            page_size: 8,
        },
        transfer_addr: Some("127.0.0.1:0".into()),
        peers,
        ..EngineConfig::default()
    }
}

async fn serve(router: axum::Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    addr
}

struct Cluster {
    engines: Vec<EngineService>,
    apis: Vec<String>,
    router: String,
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for e in &self.engines {
            e.stop();
        }
    }
}

async fn cluster(strategy: StrategySpec) -> Cluster {
    let decode = EngineService::start(engine_config(1, vec![])).unwrap();
    let prefill = EngineService::start(engine_config(
        0,
        vec![PeerAddr {
            rank: 1,
            transfer: decode.transfer_addr().to_string(),
            api: None,
        }],
    ))
    .unwrap();
    let apis = vec![serve(prefill.router()).await, serve(decode.router()).await];
    let config = RouterConfig {
        listen: "127.0.0.1:0".into(),
        engines: vec![
            EngineEntry {
                rank: 0,
                role: Role::Prefill,
                api: Some(apis[0].clone()),
            },
            EngineEntry {
                rank: 1,
                role: Role::Decode,
                api: Some(apis[1].clone()),
            },
        ],
        strategy,
        auto_migrate: false,
    };
    let router = serve(RouterService::new(&config).unwrap().router()).await;
    Cluster {
        engines: vec![prefill, decode],
        apis,
        router,
    }
}

fn prompt(n: usize, salt: u32) -> Vec<Token> {
    (0..n as u32).map(|i| (i * 37 + salt) % 256).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn router_serves_reference_tokens_over_http() {
    let c = cluster(StrategySpec::PdDisagg).await;
    let model = ToyModel::new(engine_config(0, vec![]).model).unwrap();
    let http = reqwest::Client::new();
    for (i, strategy) in [
        serde_json::json!({"name": "pd_disagg"}),
        serde_json::json!({"name": "balanced_pd", "params": {"ratio": 0.3}}),
    ]
    .into_iter()
    .enumerate()
    {
        let view = http
            .post(format!("http://{}/admin/strategy", c.router))
            .json(&strategy)
            .send()
            .await
            .unwrap();
        assert!(view.status().is_success());
        for j in 0..3 {
            let p = prompt(40 + 17 * j, i as u32);
            let resp: GenerateResponse = http
                .post(format!("http://{}/v1/generate", c.router))
                .json(&serde_json::json!({"prompt": p, "max_tokens": 6}))
                .send()
                .await
                .unwrap()
                .json()
                .await
                .unwrap();
            assert_eq!(resp.tokens, model.generate(&p, 6));
            assert_eq!(resp.token_times_ms.len(), 6);
            assert!(resp.ttft <= resp.jct);
        }
    }
    let client = EngineClient::new(&c.apis[1], http.clone());
    let stats = client.stats().await.unwrap();
    assert!(stats.cached_nodes > 0, "{stats:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bad_requests_get_structured_errors() {
    let c = cluster(StrategySpec::PdDisagg).await;
    let http = reqwest::Client::new();

    let resp = http
        .post(format!("http://{}/admin/strategy", c.router))
        .json(&serde_json::json!({"name": "round_robin"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);

    let resp = http
        .post(format!("http://{}/start_generate", c.apis[1]))
        .json(&serde_json::json!({"prompt": [1, 2, 3], "begin": 9, "max_tokens": 2}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let err: microserve::engine::api::ApiError = resp.json().await.unwrap();
    assert_eq!(err.code, ErrorCode::BadRequest);
    assert!(!err.retryable);

    let client = EngineClient::new(&c.apis[1], http);
    let s = client.stats().await.unwrap();
    assert_eq!(s.rank, 1);
}
