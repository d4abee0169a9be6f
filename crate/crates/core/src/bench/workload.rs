// SPDX-License-Identifier: Apache-2.0

//! Open-loop workload generation: Poisson arrivals and sampled lengths.

use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::toymodel::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed { value: usize },
    /// Normal clipped to `[min, max]` and rounded. Bounds default to
    /// `[1, unbounded]`.
    Normal {
        mean: f64,
        std: f64,
        #[serde(default = "one")]
        min: usize,
        #[serde(default = "unbounded")]
        max: usize,
    },
    Uniform { low: usize, high: usize },
}

fn one() -> usize {
    1
}

fn unbounded() -> usize {
    usize::MAX
}

impl LengthDist {
    pub fn normal(mean: f64, std: f64) -> Self {
        LengthDist::Normal {
            mean,
            std,
            min: 1,
            max: usize::MAX,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<usize, BenchError> {
        let v = match *self {
            LengthDist::Fixed { value } => value,
            LengthDist::Normal { mean, std, min, max } => {
                let n = Normal::new(mean, std).map_err(|e| BenchError::Workload(e.to_string()))?;
                let x = n.sample(rng).round();
                (x.max(min as f64) as usize).min(max)
            }
            LengthDist::Uniform { low, high } => {
                if low > high {
                    return Err(BenchError::Workload(format!("uniform [{low}, {high}] is empty")));
                }
                rng.random_range(low..=high)
            }
        };
        Ok(v.max(1))
    }
}

/// A shared prefix mixed into a fraction of the prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub name: String,
    pub len: usize,
    /// Relative share of requests that start with this context.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    /// Requests per second per engine.
    pub rate_per_gpu: f64,
    pub duration_s: f64,
    pub seed: u64,
    pub input: LengthDist,
    pub output: LengthDist,
    #[serde(default)]
    pub contexts: Vec<ContextSpec>,
    #[serde(default = "default_vocab")]
    pub vocab: u32,
}

fn default_vocab() -> u32 {
    256
}

impl WorkloadSpec {
    /// Short chat-like traffic with means 200 in / 260 out.
    pub fn sharegpt_like(rate_per_gpu: f64, duration_s: f64, seed: u64) -> Self {
        Self {
            name: "sharegpt_like".into(),
            rate_per_gpu,
            duration_s,
            seed,
            input: LengthDist::normal(200.0, 150.0),
            output: LengthDist::normal(260.0, 180.0),
            contexts: Vec::new(),
            vocab: default_vocab(),
        }
    }

    /// Long prompts: normal with mean 3000 in / 100 out, std 5.
    pub fn synthetic_long(rate_per_gpu: f64, duration_s: f64, seed: u64) -> Self {
        Self::long_with(3000.0, rate_per_gpu, duration_s, seed)
    }

    pub fn long_with(input_mean: f64, rate_per_gpu: f64, duration_s: f64, seed: u64) -> Self {
        Self {
            name: format!("synthetic_long_{input_mean}"),
            rate_per_gpu,
            duration_s,
            seed,
            input: LengthDist::normal(input_mean, 5.0),
            output: LengthDist::normal(100.0, 5.0),
            contexts: Vec::new(),
            vocab: default_vocab(),
        }
    }

    pub fn by_name(name: &str, rate_per_gpu: f64, duration_s: f64, seed: u64) -> Option<Self> {
        match name {
            "sharegpt_like" => Some(Self::sharegpt_like(rate_per_gpu, duration_s, seed)),
            "synthetic_long" => Some(Self::synthetic_long(rate_per_gpu, duration_s, seed)),
            _ => None,
        }
    }

    /// Deterministic token content of every configured context.
    pub fn context_tokens(&self) -> Vec<(String, Vec<Token>)> {
        self.contexts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xc0_7e47 ^ ((i as u64) << 32));
                let toks = (0..c.len).map(|_| rng.random_range(0..self.vocab)).collect();
                (c.name.clone(), toks)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub arrival_ms: f64,
    pub prompt: Vec<Token>,
    pub max_tokens: usize,
    /// Index into the workload's contexts, if the prompt starts with one.
    #[serde(default)]
    pub context: Option<usize>,
}

/// Samples a trace: exponential inter-arrivals with mean
/// `1 / (rate_per_gpu * engines)` seconds, fresh random prompt tokens.
pub fn generate_workload(spec: &WorkloadSpec, engines: usize) -> Result<Vec<TraceRequest>, BenchError> {
    let total_rate = spec.rate_per_gpu * engines as f64;
    if total_rate.is_nan() || total_rate <= 0.0 || !spec.duration_s.is_finite() {
        return Err(BenchError::Workload(format!(
            "rate {} x {engines} engines must be > 0",
            spec.rate_per_gpu
        )));
    }
    if spec.vocab == 0 {
        return Err(BenchError::Workload("vocab must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = Exp::new(total_rate).map_err(|e| BenchError::Workload(e.to_string()))?;
    let contexts = spec.context_tokens();
    let weight: f64 = spec.contexts.iter().map(|c| c.weight.max(0.0)).sum();
    let horizon_ms = spec.duration_s * 1000.0;
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gap.sample(&mut rng) * 1000.0;
        if t > horizon_ms {
            break;
        }
        let n_in = spec.input.sample(&mut rng)?;
        let max_tokens = spec.output.sample(&mut rng)?;
        let mut prompt = Vec::with_capacity(n_in);
        let mut context = None;
        if weight > 0.0 {
            let mut pick = rng.random::<f64>() * weight;
            for (i, c) in spec.contexts.iter().enumerate() {
                pick -= c.weight.max(0.0);
                if pick < 0.0 {
                    context = Some(i);
                    prompt.extend_from_slice(&contexts[i].1);
                    break;
                }
            }
        }
        // With a context, `input` sizes the unique suffix after it.
        for _ in 0..n_in {
            prompt.push(rng.random_range(0..spec.vocab));
        }
        out.push(TraceRequest {
            arrival_ms: t,
            prompt,
            max_tokens,
            context,
        });
    }
    Ok(out)
}

/// Reads a JSON-lines trace of [`TraceRequest`] records.
pub fn load_trace(path: &Path) -> Result<Vec<TraceRequest>, BenchError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRequest = serde_json::from_str(&line)
            .map_err(|e| BenchError::Workload(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if r.prompt.is_empty() || r.max_tokens == 0 {
            return Err(BenchError::Workload(format!("{}:{}: empty request", path.display(), i + 1)));
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrival_count_is_poisson() {
        let mut counts = Vec::new();
        for seed in 0..20 {
            let spec = WorkloadSpec::sharegpt_like(2.0, 60.0, seed);
            counts.push(generate_workload(&spec, 2).unwrap().len() as f64);
        }
        // 2 req/s x 2 engines x 60 s; sigma = sqrt(240).
        for c in &counts {
            assert!((c - 240.0).abs() < 3.0 * 240f64.sqrt(), "{c}");
        }
    }

    #[test]
    fn long_lengths_are_tight() {
        let spec = WorkloadSpec::synthetic_long(5.0, 100.0, 3);
        let t = generate_workload(&spec, 2).unwrap();
        let inside = t.iter().filter(|r| r.prompt.len().abs_diff(3000) <= 20).count();
        assert!(inside as f64 >= 0.997 * t.len() as f64);
        assert!(t.iter().all(|r| r.max_tokens >= 1));
    }

    #[test]
    fn seeded_traces_repeat() {
        let spec = WorkloadSpec::sharegpt_like(1.0, 10.0, 9);
        let a = serde_json::to_vec(&generate_workload(&spec, 1).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_workload(&spec, 1).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(generate_workload(&WorkloadSpec::sharegpt_like(0.0, 1.0, 0), 2).is_err());
    }
}
