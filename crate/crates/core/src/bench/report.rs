// SPDX-License-Identifier: Apache-2.0

//! CSV (one row per request) and JSON (one row per strategy x rate)
//! reports. Files are replaced atomically.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{aggregate, Aggregate, RequestMetrics, RequestStatus};
use super::sim::SimResult;
use super::BenchError;

/// Column order of the per-request CSV.
pub const CSV_COLUMNS: [&str; 13] = [
    "strategy",
    "rate_per_gpu",
    "request_id",
    "engine",
    "input_len",
    "output_len",
    "arrival_ms",
    "first_token_ms",
    "completion_ms",
    "ttft_ms",
    "tpot_ms",
    "jct_ms",
    "status",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub strategy: String,
    pub rate_per_gpu: f64,
    pub request_id: u64,
    pub engine: Option<u32>,
    pub input_len: usize,
    pub output_len: usize,
    pub arrival_ms: f64,
    pub first_token_ms: Option<f64>,
    pub completion_ms: Option<f64>,
    pub ttft_ms: Option<f64>,
    pub tpot_ms: Option<f64>,
    pub jct_ms: Option<f64>,
    pub status: RequestStatus,
}

impl CsvRow {
    pub fn new(rate_per_gpu: f64, m: &RequestMetrics) -> Self {
        Self {
            strategy: m.strategy.clone(),
            rate_per_gpu,
            request_id: m.request_id,
            engine: m.engine,
            input_len: m.input_len,
            output_len: m.output_len(),
            arrival_ms: m.arrival_ms,
            first_token_ms: m.first_token_ms,
            completion_ms: m.completion_ms,
            ttft_ms: m.ttft(),
            tpot_ms: m.tpot(),
            jct_ms: m.jct(),
            status: m.status,
        }
    }
}

/// One entry of the JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub workload: String,
    pub topology: String,
    pub strategy: String,
    pub rate_per_gpu: f64,
    pub seed: u64,
    pub requests: usize,
    pub completed: usize,
    pub aborted: usize,
    pub saturated: bool,
    pub metrics: Option<Aggregate>,
}

impl SummaryRow {
    pub fn new(workload: &str, topology: &str, rate_per_gpu: f64, seed: u64, r: &SimResult) -> Self {
        Self {
            workload: workload.to_string(),
            topology: topology.to_string(),
            strategy: r.strategy.clone(),
            rate_per_gpu,
            seed,
            requests: r.metrics.len(),
            completed: r.count(RequestStatus::Completed),
            aborted: r.count(RequestStatus::Aborted),
            saturated: r.saturated,
            metrics: aggregate(&r.metrics).ok(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| BenchError::Io(e.error))?;
    Ok(())
}

pub fn csv_bytes(rows: &[CsvRow]) -> Result<Vec<u8>, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| BenchError::Io(e.into_error()))
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<(), BenchError> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<(), BenchError> {
    let mut bytes = serde_json::to_vec_pretty(summary)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_summary(path: &Path) -> Result<Summary, BenchError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Fixed-width comparison table of summary rows.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<20} {:<10} {:<22} {:>6} {:>5} {:>9} {:>9} {:>8} {:>10} {:>10}\n",
        "workload", "topology", "strategy", "rate", "sat", "ttft", "tpot", "jct", "p99_jct", "completed"
    );
    for r in rows {
        let (ttft, tpot, jct, p99) = r
            .metrics
            .map(|m| (m.ttft.mean, m.tpot.mean, m.jct.mean, m.jct.p99))
            .unwrap_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN));
        out.push_str(&format!(
            "{:<20} {:<10} {:<22} {:>6.2} {:>5} {:>9.1} {:>9.2} {:>8.0} {:>10.0} {:>6}/{:<4}\n",
            r.workload, r.topology, r.strategy, r.rate_per_gpu, r.saturated, ttft, tpot, jct, p99, r.completed, r.requests
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(id: u64) -> RequestMetrics {
        RequestMetrics {
            request_id: id,
            strategy: "data_parallel".into(),
            engine: Some(1),
            input_len: 10,
            arrival_ms: 1.0,
            first_token_ms: Some(2.5),
            completion_ms: Some(10.0),
            status: RequestStatus::Completed,
            tokens: vec![1, 2, 3],
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("req.csv");
        let rows = vec![CsvRow::new(2.0, &metric(1)), CsvRow::new(2.0, &metric(2))];
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_csv(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        // Overwrite replaces the file in one step.
        write_csv(&path, &rows[..1]).unwrap();
        assert_eq!(read_csv(&path).unwrap().len(), 1);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn summary_schema() {
        let row = SummaryRow {
            workload: "w".into(),
            topology: "dp2".into(),
            strategy: "data_parallel".into(),
            rate_per_gpu: 1.0,
            seed: 3,
            requests: 1,
            completed: 1,
            aborted: 0,
            saturated: false,
            metrics: aggregate(&[metric(1)]).ok(),
        };
        let v = serde_json::to_value(Summary { rows: vec![row] }).unwrap();
        let keys: Vec<&str> = v["rows"][0].as_object().unwrap().keys().map(|k| k.as_str()).collect();
        for k in ["workload", "topology", "strategy", "rate_per_gpu", "seed", "requests", "completed", "aborted", "saturated", "metrics"] {
            assert!(keys.contains(&k), "{k}");
        }
        let m = &v["rows"][0]["metrics"];
        assert_eq!(m["jct"]["mean"], 9.0);
        assert!(m["ttft"]["p99"].is_number());
    }
}
