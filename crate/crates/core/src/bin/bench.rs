// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use microserve::bench::report::{self, CsvRow, Summary, SummaryRow};
use microserve::bench::verify::{run_criterion, VerifyContext};
use microserve::bench::workload::load_trace;
use microserve::bench::{generate_workload, run, BenchError, Topology, TraceRequest, WorkloadSpec};
use microserve::engine::service::read_config;
use microserve::router::StrategySpec;

/// Virtual-time benchmarks of serving strategies and the acceptance checks.
#[derive(Parser)]
#[command(name = "bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one strategy on one workload and topology.
    Run {
        /// Preset (`sharegpt_like`, `synthetic_long`), a workload spec file
        /// (.toml/.json) or a request trace (.jsonl).
        #[arg(long)]
        workload: String,
        /// Preset (`dp2`, `1p1d`, ...) or a topology file (.toml/.json).
        #[arg(long)]
        topology: String,
        /// `name[:params]`, e.g. `balanced_pd:0.2`.
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Per-GPU request rate; overrides the workload file's value.
        #[arg(long)]
        rate: Option<f64>,
        /// Trace length in seconds; overrides the workload file's value.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run baselines over a rate sweep (when `--workload` is given) and
    /// print the summary table of everything in `--out`.
    Compare {
        #[arg(long)]
        out: PathBuf,
        /// `topology/strategy` pairs, e.g. `dp2/dp,1p1d/pd_disagg`.
        #[arg(long, value_delimiter = ',')]
        baselines: Vec<String>,
        #[arg(long)]
        workload: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Run the acceptance checks; exits nonzero if any fails.
    Verify {
        /// Criterion numbers to run (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        /// Where to write `verify.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Path of the `microserve` binary (default: next to this one).
        #[arg(long)]
        microserve: Option<PathBuf>,
    },
}

fn fail(msg: impl Into<String>) -> BenchError {
    BenchError::Workload(msg.into())
}

fn is_file(s: &str) -> bool {
    Path::new(s).extension().is_some()
}

/// Loads the trace, its display name and its per-GPU rate (NaN for traces).
fn load_workload(
    arg: &str,
    rate: Option<f64>,
    duration: Option<f64>,
    seed: u64,
    engines: usize,
) -> Result<(String, f64, Vec<TraceRequest>), BenchError> {
    if arg.ends_with(".jsonl") {
        let name = Path::new(arg).file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned());
        return Ok((name, rate.unwrap_or(f64::NAN), load_trace(Path::new(arg))?));
    }
    let mut spec = if is_file(arg) {
        read_config::<WorkloadSpec>(Path::new(arg)).map_err(|e| fail(e.to_string()))?
    } else {
        WorkloadSpec::by_name(arg, 1.0, 60.0, seed).ok_or_else(|| fail(format!("unknown workload {arg:?}")))?
    };
    spec.seed = seed;
    if let Some(r) = rate {
        spec.rate_per_gpu = r;
    }
    if let Some(d) = duration {
        spec.duration_s = d;
    }
    Ok((spec.name.clone(), spec.rate_per_gpu, generate_workload(&spec, engines)?))
}

fn load_topology(arg: &str) -> Result<Topology, BenchError> {
    if is_file(arg) {
        read_config(Path::new(arg)).map_err(|e| fail(e.to_string()))
    } else {
        Topology::by_name(arg).ok_or_else(|| fail(format!("unknown topology {arg:?}")))
    }
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

struct RunArgs<'a> {
    workload: &'a str,
    topology: &'a str,
    strategy: &'a str,
    seed: u64,
    rate: Option<f64>,
    duration: Option<f64>,
    out: &'a Path,
}

fn run_one(a: &RunArgs) -> Result<SummaryRow, BenchError> {
    let topo = load_topology(a.topology)?;
    let strategy = StrategySpec::parse(a.strategy)?;
    let (name, rate, trace) = load_workload(a.workload, a.rate, a.duration, a.seed, topo.engines.len())?;
    let result = run(&trace, &topo, strategy)?;
    let rows: Vec<CsvRow> = result.metrics.iter().map(|m| CsvRow::new(rate, m)).collect();
    let file = format!(
        "{}_{}_{}_rate{}_seed{}.csv",
        slug(&name),
        slug(&topo.name),
        slug(&result.strategy),
        if rate.is_nan() { "file".into() } else { rate.to_string() },
        a.seed
    );
    report::write_csv(&a.out.join(file), &rows)?;
    let row = SummaryRow::new(&name, &topo.name, rate, a.seed, &result);
    let path = a.out.join("summary.json");
    let mut summary = if path.exists() { report::read_summary(&path)? } else { Summary::default() };
    summary.rows.retain(|r| {
        !(r.workload == row.workload
            && r.topology == row.topology
            && r.strategy == row.strategy
            && r.seed == row.seed
            && (r.rate_per_gpu == row.rate_per_gpu || (r.rate_per_gpu.is_nan() && row.rate_per_gpu.is_nan())))
    });
    summary.rows.push(row.clone());
    report::write_summary(&path, &summary)?;
    Ok(row)
}

fn microserve_sibling() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let p = exe.with_file_name(format!("microserve{}", std::env::consts::EXE_SUFFIX));
    p.exists().then_some(p)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run {
            workload,
            topology,
            strategy,
            seed,
            rate,
            duration,
            out,
        } => run_one(&RunArgs {
            workload: &workload,
            topology: &topology,
            strategy: &strategy,
            seed,
            rate,
            duration,
            out: &out,
        })
        .map(|row| {
            print!("{}", report::format_table(&[row]));
            true
        }),
        Cmd::Compare {
            out,
            baselines,
            workload,
            rates,
            seed,
            duration,
        } => (|| {
            if let Some(w) = &workload {
                for b in &baselines {
                    let (topology, strategy) = b
                        .split_once('/')
                        .ok_or_else(|| fail(format!("baseline {b:?} is not topology/strategy")))?;
                    for &rate in &rates {
                        run_one(&RunArgs {
                            workload: w,
                            topology,
                            strategy,
                            seed,
                            rate: Some(rate),
                            duration,
                            out: &out,
                        })?;
                    }
                }
            }
            let mut rows = report::read_summary(&out.join("summary.json"))?.rows;
            rows.sort_by(|a, b| {
                (&a.workload, &a.topology, &a.strategy)
                    .cmp(&(&b.workload, &b.topology, &b.strategy))
                    .then(a.rate_per_gpu.total_cmp(&b.rate_per_gpu))
            });
            let table = report::format_table(&rows);
            report::write_atomic(&out.join("compare.txt"), table.as_bytes())?;
            print!("{table}");
            Ok(true)
        })(),
        Cmd::Verify { only, out, microserve } => (|| {
            let ctx = VerifyContext {
                microserve_bin: microserve.or_else(microserve_sibling),
            };
            let ids: Vec<u8> = if only.is_empty() { (1..=10).collect() } else { only };
            let mut results = Vec::new();
            for id in ids {
                let r = run_criterion(id, &ctx);
                println!("{r}");
                results.push(r);
            }
            let passed = results.iter().filter(|r| r.passed).count();
            println!("{passed}/{} criteria passed", results.len());
            if let Some(dir) = out {
                let mut bytes = serde_json::to_vec_pretty(&results)?;
                bytes.push(b'\n');
                report::write_atomic(&dir.join("verify.json"), &bytes)?;
            }
            Ok::<_, BenchError>(passed == results.len())
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(2)
        }
    }
}
