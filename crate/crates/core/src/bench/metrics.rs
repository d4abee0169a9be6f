// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::engine::api::RequestId;
use crate::kvcache::Rank;
use crate::toymodel::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Completed,
    Aborted,
    InFlight,
}

/// Per-request timeline in virtual ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub request_id: RequestId,
    pub strategy: String,
    pub engine: Option<Rank>,
    pub input_len: usize,
    pub arrival_ms: f64,
    pub first_token_ms: Option<f64>,
    pub completion_ms: Option<f64>,
    pub status: RequestStatus,
    #[serde(skip)]
    pub tokens: Vec<Token>,
}

impl RequestMetrics {
    pub fn output_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn ttft(&self) -> Option<f64> {
        Some(self.first_token_ms? - self.arrival_ms)
    }

    pub fn jct(&self) -> Option<f64> {
        Some(self.completion_ms? - self.arrival_ms)
    }

    /// Mean gap between output tokens; zero for single-token outputs.
    pub fn tpot(&self) -> Option<f64> {
        let (f, c) = (self.first_token_ms?, self.completion_ms?);
        let n = self.output_len();
        Some(if n <= 1 { 0.0 } else { (c - f) / (n - 1) as f64 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub p99: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Self, BenchError> {
        if values.is_empty() {
            return Err(BenchError::Empty);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self { mean, p99: nearest_rank(&v, 0.99) })
    }
}

/// `ceil(q * n)`-th order statistic (1-based) of sorted `v`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub completed: usize,
    pub ttft: Stat,
    pub tpot: Stat,
    pub jct: Stat,
}

/// Mean and P99 of TTFT/TPOT/JCT over completed requests.
pub fn aggregate(metrics: &[RequestMetrics]) -> Result<Aggregate, BenchError> {
    let done: Vec<&RequestMetrics> = metrics
        .iter()
        .filter(|m| m.status == RequestStatus::Completed)
        .collect();
    let col = |f: fn(&RequestMetrics) -> Option<f64>| -> Vec<f64> { done.iter().filter_map(|m| f(m)).collect() };
    Ok(Aggregate {
        completed: done.len(),
        ttft: Stat::of(&col(RequestMetrics::ttft))?,
        tpot: Stat::of(&col(RequestMetrics::tpot))?,
        jct: Stat::of(&col(RequestMetrics::jct))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = Stat::of(&v).unwrap();
        assert_eq!(s.p99, 99.0);
        assert_eq!(s.mean, 50.5);
        let s = Stat::of(&[10.0; 100]).unwrap();
        assert_eq!((s.mean, s.p99), (10.0, 10.0));
        let s = Stat::of(&[7.0]).unwrap();
        assert_eq!((s.mean, s.p99), (7.0, 7.0));
        assert!(matches!(Stat::of(&[]), Err(BenchError::Empty)));
    }

    #[test]
    fn derived_times() {
        let m = RequestMetrics {
            request_id: 1,
            strategy: "dp".into(),
            engine: Some(0),
            input_len: 4,
            arrival_ms: 10.0,
            first_token_ms: Some(15.0),
            completion_ms: Some(45.0),
            status: RequestStatus::Completed,
            tokens: vec![1, 2, 3, 4],
        };
        assert_eq!(m.ttft(), Some(5.0));
        assert_eq!(m.jct(), Some(35.0));
        assert_eq!(m.tpot(), Some(10.0));
        let one = RequestMetrics { tokens: vec![1], ..m };
        assert_eq!(one.tpot(), Some(0.0));
    }
}
