use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mana-sim"));
    c.env_remove("MANA_SIM_TRACE_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn run_reports_digest_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.ndjson");
    let o = run(&["run", "--workload", "stencil-2d", "--world-size", "4", "--steps", "2", "--json", "--trace", p(&trace)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["status"], "completed");
    assert_eq!(v["digest"].as_str().unwrap().len(), 64);
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    let m = json(&run(&["metrics", "--trace", p(&trace), "--json"]));
    assert_eq!(m["collectives"], m["extra-barriers"]);
    assert_eq!(m["ctl-messages"], 0);
}

#[test]
fn same_seed_same_trace_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<_> = (0..2).map(|i| dir.path().join(format!("{i}.ndjson"))).collect();
    for f in &files {
        let o = run(&["ckpt-run", "--engine", "binomial", "--seed", "9", "--ckpt-at-event", "30", "--image-dir", p(&dir.path().join("img")), "--trace", p(f)]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(fs::read(&files[0]).unwrap(), fs::read(&files[1]).unwrap());
}

#[test]
fn trace_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().env("MANA_SIM_TRACE_DIR", dir.path()).args(["run", "--steps", "1", "--seed", "4"]).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("run-iter-allreduce-linear-4.ndjson").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("w.json");
    fs::write(&cfg, r#"{"name":"ring-pingpong","world_size":3,"steps":2,"payload_bytes":8,"seed":0}"#).unwrap();
    let a = json(&run(&["run", "--config", p(&cfg), "--json"]));
    let b = json(&run(&["run", "--workload", "ring-pingpong", "--world-size", "3", "--steps", "2", "--json"]));
    assert_eq!(a["digest"], b["digest"]);
    let c = json(&run(&["run", "--config", p(&cfg), "--world-size", "2", "--json"]));
    assert_ne!(a["digest"], c["digest"]);
}

#[test]
fn checkpoint_restart_across_engines() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    let args = ["--workload", "comm-split-mix", "--world-size", "4", "--steps", "3", "--json"];
    let native = json(&run(&[&["run"][..], &args].concat()));
    let o = run(&[&["ckpt-run", "--ckpt-at-event", "25", "--ckpt-at-event", "80", "--image-dir", p(&img)][..], &args].concat());
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["image_sets"].as_array().unwrap().len(), 2);
    for k in 0..2 {
        let set = img.join(format!("ckpt-{k}"));
        let r = json(&run(&["restart", "--image-dir", p(&set), "--engine", "binomial", "--seed", "7", "--json"]));
        assert_eq!(r["digest"], native["digest"]);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["run", "--workload", "nope"])), 2);
    assert_eq!(code(&run(&["run", "--world-size", "0"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["restart", "--image-dir", p(&dir.path().join("missing"))])), 1);

    let img = dir.path().join("img");
    assert_eq!(code(&run(&["ckpt-run", "--ckpt-at-event", "10", "--image-dir", p(&img)])), 0);
    let rank0 = img.join("ckpt-0/rank-0.img");
    let bytes = fs::read(&rank0).unwrap();
    fs::write(&rank0, &bytes[..bytes.len() - 1]).unwrap();
    assert_eq!(code(&run(&["restart", "--image-dir", p(&img.join("ckpt-0"))])), 5);

    let o = run(&["explore", "--world-size", "2", "--scenario", "single-allreduce", "--mutant", "skip-extra-iteration"]);
    assert_eq!(code(&o), 4);
    assert_eq!(code(&run(&["explore", "--world-size", "2", "--scenario", "single-allreduce"])), 0);
}

#[test]
fn explorer_counterexample_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cx = dir.path().join("cx");
    let o = run(&["explore", "--world-size", "2", "--scenario", "single-allreduce", "--mutant", "no-phase-gate", "--counterexample-dir", p(&cx), "--json"]);
    assert_eq!(code(&o), 4);
    let reports = json(&o);
    assert!(reports[0]["violation_count"].as_u64().unwrap() > 0);
    let file = fs::read_dir(&cx).unwrap().next().unwrap().unwrap().path();
    let r = run(&["replay", p(&file), "--json"]);
    assert_eq!(code(&r), 4);
    assert_eq!(json(&r)["reproduced"], true);
}

#[test]
fn decision_array_replay_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ndjson");
    let sched = dir.path().join("s.json");
    let w = ["--workload", "ring-pingpong", "--world-size", "3", "--steps", "2", "--ckpt-at-event", "12"];
    let o = run(&[&["ckpt-run", "--seed", "5", "--image-dir", p(&dir.path().join("img")), "--trace", p(&a), "--save-schedule", p(&sched)][..], &w].concat());
    assert_eq!(code(&o), 0);
    let b = dir.path().join("b.ndjson");
    let r = run(&[&["replay", p(&sched), "--trace", p(&b)][..], &w].concat());
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}
