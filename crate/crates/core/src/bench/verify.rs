// SPDX-License-Identifier: Apache-2.0

//! Acceptance checks shared by `bench verify` and the acceptance test
//! target. Each check returns a pass/fail verdict with the measured values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::calibrate::{prefill_path, TARGET_SPEEDUP};
use super::metrics::{aggregate, Aggregate, RequestStatus};
use super::sim::{bench_model, run, SimResult, Simulator, Topology};
use super::workload::{generate_workload, TraceRequest, WorkloadSpec};
use super::BenchError;
use crate::kvcache::FillState;
use crate::router::{Begin, Call, CategoryConfig, MigrationConfig, Script, ScriptKind, StrategySpec};
use crate::toymodel::cost::CostModel;
use crate::toymodel::{ToyModel, Token};
use crate::transport::mem::{Fault, FaultInjector, FaultRule};

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_s: f64,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] criterion {:>2} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed_s,
            self.detail
        )
    }
}

/// Inputs that only some checks need.
#[derive(Debug, Clone, Default)]
pub struct VerifyContext {
    /// Path of the `microserve` binary for the multi-process check.
    pub microserve_bin: Option<PathBuf>,
}

pub const NAMES: [&str; 10] = [
    "strategy output invariance",
    "kv transfer exactness",
    "cost model calibration",
    "migration prefill speedup",
    "long-input disaggregation trend",
    "short-input trend",
    "balance ratio ablation",
    "runtime reconfiguration",
    "receiver non-interference",
    "tcp backend protocol correctness",
];

type Verdict = Result<(bool, String), BenchError>;

pub fn run_criterion(id: u8, ctx: &VerifyContext) -> CriterionResult {
    let t0 = Instant::now();
    let verdict = match id {
        1 => output_invariance(),
        2 => transfer_exactness(),
        3 => cost_calibration(),
        4 => migration_speedup(),
        5 => long_input_trend(),
        6 => short_input_trend(),
        7 => balance_ablation(),
        8 => reconfiguration(),
        9 => receiver_non_interference(),
        10 => super::cluster::tcp_protocol_check(ctx.microserve_bin.as_deref()),
        _ => Err(BenchError::Scenario(format!("no criterion {id}"))),
    };
    let (passed, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionResult {
        id,
        name: NAMES.get(id as usize - 1).copied().unwrap_or("unknown"),
        passed,
        detail,
        elapsed_s: t0.elapsed().as_secs_f64(),
    }
}

pub fn run_all(ctx: &VerifyContext) -> Vec<CriterionResult> {
    (1..=10).map(|id| run_criterion(id, ctx)).collect()
}

pub(crate) fn random_prompt(rng: &mut ChaCha8Rng, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.random_range(0..256)).collect()
}

pub(crate) fn reference_model() -> ToyModel {
    ToyModel::new(bench_model()).expect("valid model")
}

/// Number of completed requests whose tokens differ from the reference.
fn mismatches(model: &ToyModel, trace: &[TraceRequest], r: &SimResult) -> usize {
    let mut sorted: Vec<&TraceRequest> = trace.iter().collect();
    sorted.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
    let mut bad = 0;
    for (t, m) in sorted.iter().zip(&r.metrics) {
        if m.status != RequestStatus::Completed || m.tokens != model.generate(&t.prompt, t.max_tokens) {
            bad += 1;
        }
    }
    bad + trace.len().abs_diff(r.metrics.len())
}

fn poisson_trace(rng: &mut ChaCha8Rng, prompts: Vec<Vec<Token>>, gap_ms: f64) -> Vec<TraceRequest> {
    let mut t = 0.0;
    prompts
        .into_iter()
        .map(|prompt| {
            t += -gap_ms * (1.0 - rng.random::<f64>()).ln();
            TraceRequest {
                arrival_ms: t,
                max_tokens: rng.random_range(1..=12),
                prompt,
                context: None,
            }
        })
        .collect()
}

/// Two categories of shared context plus 9:1 skewed traffic, so the
/// router migrates the hot category while requests are in flight.
pub(crate) fn migration_setup(rng: &mut ChaCha8Rng, n: usize) -> (MigrationConfig, Vec<TraceRequest>) {
    let a = random_prompt(rng, 96);
    let b = random_prompt(rng, 64);
    let cfg = MigrationConfig {
        categories: vec![
            CategoryConfig {
                name: "science".into(),
                context: a.clone(),
                owners: vec![0],
            },
            CategoryConfig {
                name: "history".into(),
                context: b.clone(),
                owners: vec![1],
            },
        ],
        threshold: 2.0,
        window: 40,
        min_window: 20,
    };
    let prompts = (0..n)
        .map(|i| {
            let mut p = if i % 10 == 9 { b.clone() } else { a.clone() };
            let extra = rng.random_range(1..=64);
            p.extend(random_prompt(rng, extra));
            p
        })
        .collect();
    let mut trace = poisson_trace(rng, prompts, 40.0);
    for (i, t) in trace.iter_mut().enumerate() {
        t.context = Some(if i % 10 == 9 { 1 } else { 0 });
    }
    (cfg, trace)
}

fn output_invariance() -> Verdict {
    let model = reference_model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prompts: Vec<Vec<Token>> = (0..200)
        .map(|_| {
            let len = rng.random_range(1..=512);
            random_prompt(&mut rng, len)
        })
        .collect();
    let trace = poisson_trace(&mut rng, prompts, 30.0);
    let mut report = Vec::new();
    let mut ok = true;
    let mut check = |label: String, bad: usize| {
        ok &= bad == 0;
        report.push(format!("{label}={bad}"));
    };
    check("dp".into(), mismatches(&model, &trace, &run(&trace, &Topology::data_parallel(2), StrategySpec::DataParallel)?));
    check("pd".into(), mismatches(&model, &trace, &run(&trace, &Topology::disaggregated(1, 1), StrategySpec::PdDisagg)?));
    for r in [0.0, 0.1, 0.2, 0.3] {
        let res = run(&trace, &Topology::disaggregated(1, 1), StrategySpec::BalancedPd { ratio: r })?;
        check(format!("balanced{r}"), mismatches(&model, &trace, &res));
    }
    // Context-aware PD, first with cold caches and then replaying the same
    // prompts against the warm caches of both engines.
    let mut sim = Simulator::new(&Topology::disaggregated(1, 2), StrategySpec::ContextPdDisagg)?;
    sim.submit(trace.clone());
    sim.run_until_idle();
    let cold_end = sim.now();
    let mut replay = trace.clone();
    for t in &mut replay {
        t.arrival_ms += 1.0;
    }
    sim.submit(replay.clone());
    sim.run_until_idle();
    let res = sim.finish();
    let (cold, warm): (Vec<_>, Vec<_>) = res.metrics.iter().cloned().partition(|m| m.arrival_ms <= cold_end);
    let cold = SimResult { metrics: cold, ..res.clone() };
    let warm = SimResult { metrics: warm, ..res.clone() };
    check("context_pd_cold".into(), mismatches(&model, &trace, &cold));
    check("context_pd_warm".into(), mismatches(&model, &replay, &warm));

    let (cfg, mtrace) = migration_setup(&mut rng, 200);
    let res = run(&mtrace, &Topology::data_parallel(2), StrategySpec::ContextMigration(cfg))?;
    let migrations = res.migrations();
    let moved_at = migrations.iter().find(|m| m.ok).map(|m| m.end_ms);
    let after: Vec<_> = res
        .metrics
        .iter()
        .filter(|m| moved_at.is_some_and(|t| m.arrival_ms > t))
        .collect();
    let on_target = after.iter().filter(|m| m.engine == Some(1) && m.input_len > 70).count();
    check("migration".into(), mismatches(&model, &mtrace, &res));
    ok &= migrations.len() == 1 && on_target > 0;
    report.push(format!(
        "migrations={} post_migration_requests={} served_by_new_owner={}",
        migrations.len(),
        after.len(),
        on_target
    ));
    Ok((ok, format!("mismatches: {}", report.join(" "))))
}

/// One transfer from a sender that caches `prompt[..s]` into a receiver
/// that caches `prompt[..r]`; returns entries checked, wrong and received.
fn one_transfer(model: &ToyModel, prompt: &[Token], s: usize, r: usize) -> Result<(usize, usize, usize), BenchError> {
    let topo = Topology::disaggregated(1, 1);
    let mut sim = Simulator::new(&topo, StrategySpec::PdDisagg)?;
    sim.auto_migrate = false;
    let mut id = 1 << 61;
    for (engine, n) in [(0, s), (1, r)] {
        if n == 0 {
            continue;
        }
        id += 1;
        sim.start_script(Script {
            request_id: id,
            strategy: "warmup".into(),
            kind: ScriptKind::Warmup { category: 0 },
            prompt: prompt[..n].to_vec(),
            calls: vec![Call::StartGenerate {
                engine,
                begin: Begin::At(0),
                max_tokens: 1,
            }],
        });
        sim.run_until_idle();
    }
    let rid = id + 1;
    sim.start_script(Script {
        request_id: rid,
        strategy: "pd_disagg".into(),
        kind: ScriptKind::Generate,
        prompt: prompt.to_vec(),
        calls: vec![
            Call::PrepRecv {
                engine: 1,
                end: -1,
                context_only: false,
            },
            Call::RemoteSend {
                engine: 0,
                recv: 1,
                begin: Begin::MatchOf(0),
                end: -1,
                addr_of: 0,
            },
        ],
    });
    sim.run_until_idle();
    let engine = sim.engine(1).expect("receiver");
    let seq = engine
        .receiving_seq(rid)
        .ok_or_else(|| BenchError::Scenario("receive not prepared".into()))?;
    let mut checked = 0;
    let mut wrong = 0;
    let mut received = 0;
    for pos in 0..prompt.len() - 1 {
        for layer in 0..model.layers() {
            let Some((state, words)) = engine.cache().entry(seq, pos, layer) else {
                wrong += 1;
                continue;
            };
            if state == FillState::Empty {
                wrong += 1;
                continue;
            }
            received += usize::from(state == FillState::ReceivedRemote);
            checked += 1;
            if words != model.kv_entry(&prompt[..=pos], layer).0 {
                wrong += 1;
            }
        }
    }
    Ok((checked, wrong, received))
}

fn transfer_exactness() -> Verdict {
    let model = reference_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut case1, mut case2, mut checked, mut wrong, mut received) = (0, 0, 0, 0, 0);
    for i in 0..100 {
        let len = rng.random_range(8..=200);
        let prompt = random_prompt(&mut rng, len);
        let a = rng.random_range(0..len);
        let b = rng.random_range(0..len);
        // Alternate which side caches more: case 1 has the sender ahead of
        // the receiver, case 2 the receiver ahead of the sender.
        let (s, r) = if i % 2 == 0 { (a.max(b), a.min(b)) } else { (a.min(b), a.max(b)) };
        if s > r {
            case1 += 1;
        } else if s < r {
            case2 += 1;
        }
        let (c, w, rcv) = one_transfer(&model, &prompt, s, r)?;
        checked += c;
        wrong += w;
        received += rcv;
    }

    // Corrupt one transferred entry (bad data with a valid checksum) and
    // check that generation diverges from the reference.
    let trials = 500;
    let mut diverged = 0;
    for _ in 0..trials {
        let len = rng.random_range(2..=96);
        let prompt = random_prompt(&mut rng, len);
        let max_tokens = 8;
        let trace = vec![TraceRequest {
            arrival_ms: 0.0,
            prompt: prompt.clone(),
            max_tokens,
            context: None,
        }];
        let mut sim = Simulator::new(&Topology::disaggregated(1, 1), StrategySpec::PdDisagg)?;
        sim.set_faults(FaultInjector::new(vec![FaultRule {
            tag: None,
            layer: Some(rng.random_range(0..model.layers() as u32)),
            fault: Fault::CorruptPayload {
                word: rng.random_range(0..len * 2),
                bit: rng.random_range(0..64),
            },
            times: 1,
        }]));
        let res = sim.run(trace);
        let m = &res.metrics[0];
        if m.status != RequestStatus::Completed || m.tokens != model.generate(&prompt, max_tokens) {
            diverged += 1;
        }
    }
    let rate = diverged as f64 / trials as f64;
    let ok = wrong == 0 && case1 >= 30 && case2 >= 30 && received > 0 && rate >= 0.99;
    Ok((
        ok,
        format!(
            "configs case1={case1} case2={case2}; entries checked={checked} received={received} wrong={wrong}; \
             corrupted-entry divergence {diverged}/{trials} ({:.1}%)",
            rate * 100.0
        ),
    ))
}

fn cost_calibration() -> Verdict {
    let c = CostModel::default();
    let published = [(1000, 1.247, 0.197, 15.8), (3000, 1.391, 0.533, 38.3), (5000, 1.564, 0.867, 55.4)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (total, t, x, ratio) in published {
        let tp = c.prefill_time(500, total);
        let xp = c.transfer_time(total);
        let rp = xp / tp * 100.0;
        let et = (tp - t).abs() / t;
        let ex = (xp - x).abs() / x;
        let er = (rp - ratio).abs();
        ok &= et < 0.02 && ex < 0.02 && er < 1.0;
        parts.push(format!(
            "{total}: T={tp:.3}ms ({:+.2}%) X={xp:.3}ms ({:+.2}%) overlap={rp:.1}% ({:+.2}pp)",
            (tp - t) / t * 100.0,
            (xp - x) / x * 100.0,
            rp - ratio
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn migration_speedup() -> Verdict {
    let cost = super::sim::bench_cost();
    let p: Vec<_> = [500, 2500, 4500]
        .iter()
        .map(|&ctx| prefill_path(cost, ctx, 500, 4))
        .collect::<Result<_, _>>()?;
    let speedup = p[0].speedup();
    let mig: Vec<f64> = p.iter().map(|x| x.with_migration_ms).collect();
    let rec: Vec<f64> = p.iter().map(|x| x.recompute_ms).collect();
    let lo = mig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mig.iter().cloned().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    // Superlinear: growth outpaces the 5x growth in input length, and
    // successive increments grow.
    let growth = rec[2] / rec[0];
    let convex = rec[2] - rec[1] > rec[1] - rec[0];
    let ok = (speedup - TARGET_SPEEDUP).abs() <= 0.15 && spread < 0.25 && growth > 5.0 && convex;
    Ok((
        ok,
        format!(
            "speedup@1000={speedup:.3}x; with-migration {:.1}/{:.1}/{:.1} ms (spread {:.1}%); \
             recompute {:.1}/{:.1}/{:.1} ms (5000 vs 1000: {growth:.2}x); step overhead {:.2} ms",
            mig[0],
            mig[1],
            mig[2],
            spread * 100.0,
            rec[0],
            rec[1],
            rec[2],
            cost.prefill_step_overhead
        ),
    ))
}

#[derive(Debug, Clone)]
struct Point {
    saturated: bool,
    agg: Aggregate,
}

fn point(w: &WorkloadSpec, topo: &Topology, s: StrategySpec) -> Result<Point, BenchError> {
    let trace = generate_workload(w, topo.engines.len())?;
    let r = run(&trace, topo, s)?;
    Ok(Point {
        saturated: r.saturated,
        agg: aggregate(&r.metrics)?,
    })
}

pub const LONG_RATES: [f64; 3] = [1.5, 2.0, 2.5];
pub const SHORT_RATES: [f64; 4] = [2.0, 4.0, 6.0, 8.0];
pub const ABLATION_RATES: [f64; 3] = [0.5, 1.0, 1.5];
const SWEEP_SECONDS: f64 = 60.0;

fn long_input_trend() -> Verdict {
    let dp = Topology::data_parallel(2);
    let pd = Topology::disaggregated(1, 1);
    let mut rows = BTreeMap::new();
    for &rate in &LONG_RATES {
        let w = WorkloadSpec::synthetic_long(rate, SWEEP_SECONDS, 5);
        let a = point(&w, &dp, StrategySpec::DataParallel)?;
        let b = point(&w, &pd, StrategySpec::PdDisagg)?;
        rows.insert((rate * 10.0) as u32, (rate, a, b));
    }
    let best = rows
        .values()
        .filter(|(_, a, b)| !a.saturated && !b.saturated)
        .map(|(r, _, _)| *r)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    let mut parts = Vec::new();
    let mut ok = true;
    match best {
        Some(rate) => {
            let (_, a, b) = &rows[&((rate * 10.0) as u32)];
            ok &= b.agg.tpot.mean < a.agg.tpot.mean;
            parts.push(format!(
                "highest non-saturating rate {rate}: TPOT 1P1D {:.2} ms vs DP {:.2} ms",
                b.agg.tpot.mean, a.agg.tpot.mean
            ));
        }
        None => {
            ok = false;
            parts.push("every rate saturated".into());
        }
    }
    let w = WorkloadSpec::synthetic_long(2.5, SWEEP_SECONDS, 5);
    let bal = point(&w, &pd, StrategySpec::BalancedPd { ratio: 0.2 })?;
    let (_, _, pd25) = &rows[&25];
    ok &= bal.agg.jct.p99 <= pd25.agg.jct.p99;
    parts.push(format!(
        "rate 2.5: P99 JCT balanced(0.2) {:.0} ms vs 1P1D {:.0} ms",
        bal.agg.jct.p99, pd25.agg.jct.p99
    ));
    let best_jct = |f: fn(&Aggregate) -> f64| {
        rows.values()
            .map(|(_, a, b)| 1.0 - f(&b.agg).min(f(&bal.agg)) / f(&a.agg))
            .fold(f64::MIN, f64::max)
    };
    parts.push(format!(
        "best JCT reduction vs DP: mean {:.0}%, P99 {:.0}%",
        best_jct(|a| a.jct.mean) * 100.0,
        best_jct(|a| a.jct.p99) * 100.0
    ));
    Ok((ok, parts.join("; ")))
}

fn short_input_trend() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for &rate in &SHORT_RATES {
        let w = WorkloadSpec::sharegpt_like(rate, SWEEP_SECONDS, 6);
        let a = point(&w, &Topology::data_parallel(2), StrategySpec::DataParallel)?;
        let b = point(&w, &Topology::disaggregated(1, 1), StrategySpec::PdDisagg)?;
        ok &= a.agg.jct.mean <= b.agg.jct.mean;
        parts.push(format!("rate {rate}: DP {:.0} ms vs 1P1D {:.0} ms", a.agg.jct.mean, b.agg.jct.mean));
    }
    Ok((ok, format!("mean JCT {}", parts.join(", "))))
}

fn balance_ablation() -> Verdict {
    let pd = Topology::disaggregated(1, 1);
    let p99 = |mean: f64, rate: f64, r: f64| -> Result<f64, BenchError> {
        let w = WorkloadSpec::long_with(mean, rate, SWEEP_SECONDS, 7);
        Ok(point(&w, &pd, StrategySpec::BalancedPd { ratio: r })?.agg.jct.p99)
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for &rate in &ABLATION_RATES {
        let (a, b) = (p99(3000.0, rate, 0.1)?, p99(3000.0, rate, 0.3)?);
        ok &= a <= b;
        parts.push(format!("3000@{rate}: r0.1 {a:.0} vs r0.3 {b:.0} ({:.2}x)", b / a));
    }
    let top = ABLATION_RATES[ABLATION_RATES.len() - 1];
    let (a, b) = (p99(5000.0, top, 0.1)?, p99(5000.0, top, 0.3)?);
    ok &= b <= a;
    parts.push(format!("5000@{top}: r0.1 {a:.0} vs r0.3 {b:.0} ({:.2}x)", a / b));
    Ok((ok, format!("P99 JCT ms {}", parts.join("; "))))
}

fn reconfiguration() -> Verdict {
    let model = reference_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prompts: Vec<Vec<Token>> = (0..300)
        .map(|_| {
            let len = rng.random_range(16..=600);
            random_prompt(&mut rng, len)
        })
        .collect();
    let trace = poisson_trace(&mut rng, prompts, 20.0);
    let horizon = trace.last().map_or(0.0, |t| t.arrival_ms);
    let mut sim = Simulator::new(&Topology::disaggregated(1, 1), StrategySpec::DataParallel)?;
    sim.schedule_strategy(horizon / 3.0, StrategySpec::PdDisagg);
    sim.schedule_strategy(2.0 * horizon / 3.0, StrategySpec::BalancedPd { ratio: 0.2 });
    let res = sim.run(trace.clone());
    let lost = res.metrics.iter().filter(|m| m.status != RequestStatus::Completed).count();
    let wrong = mismatches(&model, &trace, &res);
    let mut per_strategy: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &res.metrics {
        *per_strategy.entry(m.strategy.as_str()).or_default() += 1;
    }
    // Requests admitted before a switch and finished after it.
    let spanning = res
        .strategy_changes
        .iter()
        .map(|(t, _)| {
            res.metrics
                .iter()
                .filter(|m| m.arrival_ms < *t && m.completion_ms.is_some_and(|c| c > *t))
                .count()
        })
        .collect::<Vec<_>>();
    let ok = lost == 0
        && wrong == 0
        && res.engine_starts == 2
        && res.strategy_changes.len() == 2
        && per_strategy.len() == 3
        && spanning.iter().all(|&n| n > 0)
        && res.causality_violations == 0;
    Ok((
        ok,
        format!(
            "{} requests, lost={lost}, wrong_tokens={wrong}, engine_starts={} (no restarts), switches={:?}, \
             in flight across switches={spanning:?}, per strategy={per_strategy:?}",
            res.metrics.len(),
            res.engine_starts,
            res.strategy_changes.iter().map(|(t, s)| format!("{s}@{t:.0}ms")).collect::<Vec<_>>()
        ),
    ))
}

/// Decode tokens per virtual ms on `rank` over steps starting in `[a, b)`.
fn decode_rate(r: &SimResult, rank: u32, a: f64, b: f64) -> f64 {
    let steps: Vec<_> = r
        .steps
        .iter()
        .filter(|s| s.rank == rank && s.start_ms >= a && s.start_ms < b)
        .collect();
    let tokens: usize = steps.iter().map(|s| s.decode_seqs).sum();
    let busy: f64 = steps.iter().map(|s| s.end_ms - s.start_ms).sum();
    if busy > 0.0 {
        tokens as f64 / busy
    } else {
        0.0
    }
}

fn receiver_non_interference() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let topo = Topology::disaggregated(1, 1);
    // Keep the receiver (rank 1) busy with 32 long decodes.
    let decodes: Vec<TraceRequest> = (0..32)
        .map(|_| TraceRequest {
            arrival_ms: 0.0,
            prompt: random_prompt(&mut rng, 64),
            max_tokens: 400,
            context: None,
        })
        .collect();
    let context = random_prompt(&mut rng, 5000);
    let measure = |with_transfer: bool| -> Result<(SimResult, f64, f64), BenchError> {
        let mut sim = Simulator::new(&topo, StrategySpec::DataParallel)?;
        sim.auto_migrate = false;
        // Sender holds the context; the receiver only decodes.
        sim.start_script(Script {
            request_id: 1 << 61,
            strategy: "warmup".into(),
            kind: ScriptKind::Warmup { category: 0 },
            prompt: context.clone(),
            calls: vec![
                Call::StartGenerate {
                    engine: 0,
                    begin: Begin::At(0),
                    max_tokens: 1,
                },
                Call::Pin { engine: 0, len: context.len() },
            ],
        });
        sim.run_until_idle();
        for (i, d) in decodes.iter().enumerate() {
            sim.start_script(Script {
                request_id: (1 << 50) + i as u64,
                strategy: "data_parallel".into(),
                kind: ScriptKind::Generate,
                prompt: d.prompt.clone(),
                calls: vec![Call::StartGenerate {
                    engine: 1,
                    begin: Begin::At(0),
                    max_tokens: d.max_tokens,
                }],
            });
        }
        // Let every decode start before the transfer.
        let t0 = sim.now() + 200.0;
        sim.run_until(t0);
        if with_transfer {
            sim.start_script(Script {
                request_id: (1 << 61) + 1,
                strategy: "context_migration".into(),
                kind: ScriptKind::Migration { category: 0, target: 1 },
                prompt: context.clone(),
                calls: vec![
                    Call::PrepRecv {
                        engine: 1,
                        end: context.len() as i64,
                        context_only: true,
                    },
                    Call::RemoteSend {
                        engine: 0,
                        recv: 1,
                        begin: Begin::MatchOf(0),
                        end: context.len() as i64,
                        addr_of: 0,
                    },
                ],
            });
        }
        sim.run_until_idle();
        let r = sim.finish();
        Ok((r, t0, 0.0))
    };
    let (base, t0, _) = measure(false)?;
    let (with, _, _) = measure(true)?;
    let xfer: Vec<_> = with.transfers.iter().filter(|t| t.dst == 1).collect();
    let (ta, tb) = (
        xfer.iter().map(|t| t.start_ms).fold(f64::INFINITY, f64::min),
        xfer.iter().map(|t| t.delivered_ms).fold(0.0, f64::max),
    );
    let tokens: usize = xfer.iter().map(|t| t.tokens).sum::<usize>() / reference_model().layers();
    let migrated = with.scripts.iter().any(|s| matches!(s.kind, ScriptKind::Migration { .. }) && s.ok);
    let r0 = decode_rate(&base, 1, ta.min(t0), tb.max(t0 + 1.0));
    let r1 = decode_rate(&with, 1, ta.min(t0), tb.max(t0 + 1.0));
    let change = (r1 - r0).abs() / r0;
    let ok = migrated && tokens == 5000 && change < 0.01 && r0 > 0.0;
    Ok((
        ok,
        format!(
            "receiver decode throughput {:.4} vs {:.4} tokens/ms while ingesting {tokens} tokens \
             over [{ta:.1}, {tb:.1}] ms: change {:.3}%",
            r0,
            r1,
            change * 100.0
        ),
    ))
}
