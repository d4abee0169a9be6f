// SPDX-License-Identifier: Apache-2.0

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use microserve::toymodel::{ModelConfig, ToyModel};
use microserve_ffi::*;

const CONFIG: &str = r#"{"model":{"layers":4,"dim":2},"cache":{"pages":64,"page_size":8}}"#;

fn new_engine(json: &str) -> *mut MsEngine {
    let c = CString::new(json).unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { ms_engine_new(c.as_ptr(), &mut e) }, MsStatus::Ok);
    assert!(!e.is_null());
    e
}

fn last_error() -> Option<String> {
    let p = ms_last_error_message();
    if p.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { ms_string_free(p) };
    Some(s)
}

fn run_to_idle(e: *mut MsEngine, mut now: f64) -> f64 {
    let mut report = MsStepReport::default();
    let mut stepped = true;
    while stepped {
        assert_eq!(unsafe { ms_engine_step(e, now, &mut report, &mut stepped) }, MsStatus::Ok);
        if stepped {
            now = report.end_ms;
        }
    }
    now
}

fn drain_tokens(e: *mut MsEngine) -> Vec<MsTokenEvent> {
    let mut buf = [MsTokenEvent {
        request_id: 0,
        index: 0,
        token: 0,
        t_ms: 0.0,
        finished: false,
        aborted: false,
        status: MsStatus::Ok,
    }; 16];
    let mut out = Vec::new();
    loop {
        let n = unsafe { ms_engine_poll_tokens(e, buf.as_mut_ptr(), buf.len()) };
        out.extend_from_slice(&buf[..n]);
        if n < buf.len() {
            return out;
        }
    }
}

fn model() -> ToyModel {
    ToyModel::new(ModelConfig {
        layers: 4,
        dim: 2,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn local_generation_matches_reference() {
    let e = new_engine(CONFIG);
    let prompt: Vec<u32> = (0..50).map(|i| i * 3 % 256).collect();
    let mut id = 0;
    let s = unsafe { ms_engine_start_generate(e, prompt.as_ptr(), prompt.len(), 0, 8, 0.0, &mut id) };
    assert_eq!(s, MsStatus::Ok);
    assert!(unsafe { ms_engine_has_work(e) });
    run_to_idle(e, 0.0);
    let events = drain_tokens(e);
    let tokens: Vec<u32> = events.iter().map(|t| t.token).collect();
    assert_eq!(tokens, model().generate(&prompt, 8));
    assert!(events.iter().all(|t| t.request_id == id && t.status == MsStatus::Ok));
    assert!(events.last().unwrap().finished);

    let mut reference = vec![0u32; 8];
    let m = CString::new(r#"{"layers":4,"dim":2}"#).unwrap();
    let s = unsafe { ms_reference_generate(m.as_ptr(), prompt.as_ptr(), prompt.len(), 8, reference.as_mut_ptr(), 8) };
    assert_eq!(s, MsStatus::Ok);
    assert_eq!(reference, tokens);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { ms_engine_stats(e, 0.0, &mut json) }, MsStatus::Ok);
    let stats: serde_json::Value = serde_json::from_str(&unsafe { CStr::from_ptr(json) }.to_string_lossy()).unwrap();
    // The first token comes out of the prefill step.
    assert_eq!(stats["decode_tokens"], 7);
    unsafe { ms_string_free(json) };
    unsafe { ms_engine_free(e) };
}

#[test]
fn transfer_between_two_handles() {
    let (p, d) = (new_engine(CONFIG), new_engine(&CONFIG.replacen('{', r#"{"rank":1,"#, 1)));
    let prompt: Vec<u32> = (0..30).map(|i| i * 11 % 256).collect();
    let prep = CString::new(serde_json::json!({"request_id": 7, "prompt": prompt, "end": -1}).to_string()).unwrap();
    let mut resp = ptr::null_mut();
    assert_eq!(unsafe { ms_engine_prep_recv(d, prep.as_ptr(), 0.0, &mut resp) }, MsStatus::Ok);
    let resp_v: serde_json::Value = serde_json::from_str(&unsafe { CStr::from_ptr(resp) }.to_string_lossy()).unwrap();
    unsafe { ms_string_free(resp) };

    // Generating before the KV arrived is refused.
    let mut gid = 7;
    let s = unsafe { ms_engine_start_generate(d, prompt.as_ptr(), prompt.len(), -1, 5, 0.0, &mut gid) };
    assert_eq!(s, MsStatus::MissingKv);
    assert!(last_error().unwrap().contains("MissingKv"));

    let send = serde_json::json!({
        "request_id": 7, "prompt": prompt, "begin": 0, "end": -1,
        "recv_rank": 1, "recv_addr": resp_v["kv_addr_info"],
    });
    let send = CString::new(send.to_string()).unwrap();
    let mut sid = 0;
    assert_eq!(unsafe { ms_engine_remote_send(p, send.as_ptr(), 0.0, &mut sid) }, MsStatus::Ok);
    let mut n = 99;
    // Nothing is ready before the prefill step ran.
    assert_eq!(unsafe { ms_engine_deliver(p, d, 0.0, &mut n) }, MsStatus::Ok);
    assert_eq!(n, 0);
    let now = run_to_idle(p, 0.0);
    assert_eq!(unsafe { ms_engine_deliver(p, d, now, &mut n) }, MsStatus::Ok);
    assert_eq!(n, 4);
    let mut done = [MsSendDone {
        request_id: 0,
        t_ms: 0.0,
        status: MsStatus::Internal,
    }; 2];
    assert_eq!(unsafe { ms_engine_poll_sends(p, done.as_mut_ptr(), 2) }, 1);
    assert_eq!((done[0].request_id, done[0].status), (sid, MsStatus::Ok));

    let s = unsafe { ms_engine_start_generate(d, prompt.as_ptr(), prompt.len(), -1, 5, now, &mut gid) };
    assert_eq!(s, MsStatus::Ok);
    assert!(last_error().is_none());
    run_to_idle(d, now);
    let tokens: Vec<u32> = drain_tokens(d).iter().map(|t| t.token).collect();
    assert_eq!(tokens, model().generate(&prompt, 5));
    unsafe {
        ms_engine_free(p);
        ms_engine_free(d);
    }
}

#[test]
fn invalid_input_returns_codes_not_crashes() {
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { ms_engine_new(ptr::null(), &mut e) }, MsStatus::NullPointer);
    let bad = CString::new("{not json").unwrap();
    assert_eq!(unsafe { ms_engine_new(bad.as_ptr(), &mut e) }, MsStatus::InvalidJson);
    assert!(last_error().is_some());
    let zero = CString::new(r#"{"model":{"layers":0}}"#).unwrap();
    assert_ne!(unsafe { ms_engine_new(zero.as_ptr(), &mut e) }, MsStatus::Ok);

    let e = new_engine(CONFIG);
    let mut report = MsStepReport::default();
    let mut stepped = true;
    assert_eq!(unsafe { ms_engine_step(ptr::null_mut(), 0.0, &mut report, &mut stepped) }, MsStatus::NullPointer);
    assert_eq!(unsafe { ms_engine_step(e, 0.0, &mut report, &mut stepped) }, MsStatus::Ok);
    assert!(!stepped);
    let mut id = 0;
    assert_eq!(
        unsafe { ms_engine_start_generate(e, ptr::null(), 3, 0, 1, 0.0, &mut id) },
        MsStatus::NullPointer
    );
    let p = [1u32, 2, 3];
    assert_eq!(
        unsafe { ms_engine_start_generate(e, p.as_ptr(), 3, 9, 1, 0.0, &mut id) },
        MsStatus::BadRequest
    );
    let mut n = 0;
    assert_eq!(unsafe { ms_engine_deliver(e, e, 0.0, &mut n) }, MsStatus::BadRequest);
    assert!(!unsafe { ms_engine_cancel(e, 12345) });
    let mut small = [0u32; 2];
    let m = CString::new("{}").unwrap();
    assert_eq!(
        unsafe { ms_reference_generate(m.as_ptr(), p.as_ptr(), 3, 4, small.as_mut_ptr(), 2) },
        MsStatus::BufferTooSmall
    );
    unsafe {
        ms_engine_free(e);
        ms_engine_free(ptr::null_mut());
        ms_string_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(ms_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn crate_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn cc() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
}

#[test]
fn header_is_valid_c_and_declares_the_api() {
    let header = std::fs::read_to_string(crate_dir().join("include/microserve.h")).unwrap();
    for name in [
        "ms_engine_new",
        "ms_engine_free",
        "ms_engine_prep_recv",
        "ms_engine_remote_send",
        "ms_engine_start_generate",
        "ms_engine_step",
        "ms_engine_deliver",
        "ms_last_error_message",
        "ms_string_free",
        "typedef struct MsEngine MsEngine",
        "MS_STATUS_MISSING_KV = 11",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let Some(cc) = cc() else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(crate_dir().join("include/microserve.h"))
        .status()
        .unwrap();
    assert!(status.success());
}

/// Directory holding the library artifacts of this build.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler found; link test skipped");
        return;
    };
    let lib = artifact_dir().join("libmicroserve_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile_dir();
    let exe = dir.join("pd_roundtrip");
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir().join("tests/c/pd_roundtrip.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
    let _ = std::fs::remove_dir_all(dir);
}

fn tempfile_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("microserve-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
