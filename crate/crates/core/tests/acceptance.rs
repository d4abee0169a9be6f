// SPDX-License-Identifier: Apache-2.0

//! Runs every acceptance criterion and prints one verdict line per criterion.

use std::path::PathBuf;

use microserve::bench::verify::{run_criterion, VerifyContext};

fn context() -> VerifyContext {
    VerifyContext {
        microserve_bin: Some(PathBuf::from(env!("CARGO_BIN_EXE_microserve"))),
    }
}

fn check(id: u8) {
    let r = run_criterion(id, &context());
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_01_output_invariance() {
    check(1);
}

#[test]
fn criterion_02_kv_transfer_exactness() {
    check(2);
}

#[test]
fn criterion_03_cost_model_calibration() {
    check(3);
}

#[test]
fn criterion_04_migration_speedup() {
    check(4);
}

#[test]
fn criterion_05_long_input_trend() {
    check(5);
}

#[test]
fn criterion_06_short_input_trend() {
    check(6);
}

#[test]
fn criterion_07_balance_ratio_ablation() {
    check(7);
}

#[test]
fn criterion_08_runtime_reconfiguration() {
    check(8);
}

#[test]
fn criterion_09_receiver_non_interference() {
    check(9);
}

#[test]
fn criterion_10_tcp_backend() {
    check(10);
}
