// SPDX-License-Identifier: Apache-2.0

//! Prefill-path experiments with and without a migrated context, and the fit
//! of the per-step overhead against the measured migration speedup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sim::{Simulator, Topology};
use super::workload::TraceRequest;
use super::BenchError;
use crate::router::{Begin, Call, EngineEntry, Role, Script, ScriptKind, StrategySpec};
use crate::toymodel::cost::CostModel;
use crate::toymodel::Token;

/// Per-step overhead used by the benchmark topologies, from
/// [`fit_step_overhead`] with a 1.7x target at 500 + 500 tokens.
pub const STEP_OVERHEAD_MS: f64 = 8.4;

/// Target prefill speedup of migration over recomputation.
pub const TARGET_SPEEDUP: f64 = 1.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillPath {
    pub context: usize,
    pub unique: usize,
    /// Time to first token when the prefill engine already holds the
    /// context, migrated from its original owner.
    pub with_migration_ms: f64,
    /// Time to first token when the whole prompt is recomputed.
    pub recompute_ms: f64,
}

impl PrefillPath {
    pub fn speedup(&self) -> f64 {
        self.recompute_ms / self.with_migration_ms
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<Token> {
    (0..n).map(|_| rng.random_range(0..256)).collect()
}

/// Rank 0 owns the context; 1 is the prefill engine and 2 the decode
/// engine of a 1P1D pair.
fn path_topology(cost: CostModel) -> Topology {
    let mut t = Topology::disaggregated(1, 1).with_cost(cost);
    t.name = "owner+1p1d".into();
    for e in &mut t.engines {
        e.rank += 1;
    }
    t.engines.insert(
        0,
        EngineEntry {
            rank: 0,
            role: Role::Mixed,
            api: None,
        },
    );
    t
}

fn time_path(cost: CostModel, context: &[Token], unique: &[Token], migrate: bool) -> Result<f64, BenchError> {
    let mut sim = Simulator::new(&path_topology(cost), StrategySpec::PdDisagg)?;
    sim.auto_migrate = false;
    let len = context.len();
    sim.start_script(Script {
        request_id: 1 << 60,
        strategy: "warmup".into(),
        kind: ScriptKind::Warmup { category: 0 },
        prompt: context.to_vec(),
        calls: vec![
            Call::StartGenerate {
                engine: 0,
                begin: Begin::At(0),
                max_tokens: 1,
            },
            Call::Pin { engine: 0, len },
        ],
    });
    sim.run_until_idle();
    if migrate {
        sim.start_script(Script {
            request_id: (1 << 60) + 1,
            strategy: "context_migration".into(),
            kind: ScriptKind::Migration { category: 0, target: 1 },
            prompt: context.to_vec(),
            calls: vec![
                Call::PrepRecv {
                    engine: 1,
                    end: len as i64,
                    context_only: true,
                },
                Call::RemoteSend {
                    engine: 0,
                    recv: 1,
                    begin: Begin::MatchOf(0),
                    end: len as i64,
                    addr_of: 0,
                },
                Call::Pin { engine: 1, len },
            ],
        });
        sim.run_until_idle();
    }
    let mut prompt = context.to_vec();
    prompt.extend_from_slice(unique);
    sim.submit(vec![TraceRequest {
        arrival_ms: 0.0,
        prompt,
        max_tokens: 1,
        context: Some(0),
    }]);
    sim.run_until_idle();
    let r = sim.finish();
    if r.scripts.iter().any(|s| !s.ok) {
        return Err(BenchError::Scenario("prefill-path script failed".into()));
    }
    r.metrics
        .first()
        .and_then(|m| m.ttft())
        .ok_or_else(|| BenchError::Scenario("request produced no token".into()))
}

/// Measures both prefill paths for one (context, unique) split.
pub fn prefill_path(cost: CostModel, context: usize, unique: usize, seed: u64) -> Result<PrefillPath, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = random_tokens(&mut rng, context);
    let uniq = random_tokens(&mut rng, unique);
    Ok(PrefillPath {
        context,
        unique,
        with_migration_ms: time_path(cost, &ctx, &uniq, true)?,
        recompute_ms: time_path(cost, &ctx, &uniq, false)?,
    })
}

/// Solves for the per-step overhead F that makes the simulated speedup at
/// (context, unique) equal `target`. Path times are affine in F, so two
/// probes determine it exactly.
pub fn fit_step_overhead(base: CostModel, context: usize, unique: usize, target: f64) -> Result<f64, BenchError> {
    let probe = |f: f64| {
        prefill_path(
            CostModel {
                prefill_step_overhead: f,
                ..base
            },
            context,
            unique,
            7,
        )
    };
    let p0 = probe(0.0)?;
    let p1 = probe(1.0)?;
    let km = p1.with_migration_ms - p0.with_migration_ms;
    let kr = p1.recompute_ms - p0.recompute_ms;
    let denom = target * km - kr;
    if denom.abs() < 1e-12 {
        return Err(BenchError::Scenario("speedup does not depend on the step overhead".into()));
    }
    Ok((p0.recompute_ms - target * p0.with_migration_ms) / denom)
}
