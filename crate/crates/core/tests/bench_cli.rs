// SPDX-License-Identifier: Apache-2.0

use std::process::Command;

use microserve::bench::report::read_summary;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

fn configs(file: &str) -> String {
    format!("{}/../../configs/{file}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn run_then_compare_writes_csv_summary_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let status = bench()
        .args(["run", "--workload", "sharegpt_like", "--topology", "1p1d"])
        .args(["--strategy", "balanced_pd:0.2", "--rate", "1.0", "--duration", "5", "--out", out])
        .status()
        .unwrap();
    assert!(status.success());
    let csvs: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .collect();
    assert_eq!(csvs.len(), 1);

    let output = bench()
        .args(["compare", "--out", out, "--workload", &configs("workload_long.toml")])
        .args(["--baselines", "dp2/data_parallel,1p1d/pd_disagg", "--rates", "0.5", "--duration", "5"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let table = String::from_utf8(output.stdout).unwrap();
    assert!(table.contains("synthetic_long") && table.contains("sharegpt_like"), "{table}");
    assert!(dir.path().join("compare.txt").exists());
    let summary = read_summary(&dir.path().join("summary.json")).unwrap();
    assert_eq!(summary.rows.len(), 3);

    // Re-running the same key replaces the row.
    let status = bench()
        .args(["run", "--workload", "sharegpt_like", "--topology", "1p1d"])
        .args(["--strategy", "balanced_pd:0.2", "--rate", "1.0", "--duration", "5", "--out", out])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(read_summary(&dir.path().join("summary.json")).unwrap().rows.len(), 3);
}

#[test]
fn topology_file_and_verify_subset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let status = bench()
        .args(["run", "--workload", "sharegpt_like", "--topology", &configs("topology_1p1d.toml")])
        .args(["--strategy", "pd_disagg", "--duration", "3", "--out", out])
        .status()
        .unwrap();
    assert!(status.success());

    let output = bench().args(["verify", "--only", "3", "--out", out]).output().unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("1/1 criteria passed"));
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn bad_arguments_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let output = bench()
        .args(["run", "--workload", "nope", "--topology", "1p1d", "--strategy", "dp", "--out", out])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown workload"));

    let output = bench()
        .args(["run", "--workload", "sharegpt_like", "--topology", "1p1d", "--strategy", "fastest", "--out", out])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(!bench().arg("frobnicate").status().unwrap().success());
}
