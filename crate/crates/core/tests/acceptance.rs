//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use mana_sim::ckptstore::{decode_image, encode_image, ImageSet};
use mana_sim::engine::{CollOp, CollectiveSpec, EngineId, RealCommId};
use mana_sim::error::ImageError;
use mana_sim::explore::{self, ExploreConfig, VerificationReport};
use mana_sim::harness::{self, RunOptions, RunStatus};
use mana_sim::runtime::Mutations;
use mana_sim::upperhalf::{CommRef, DrainedMessage};
use mana_sim::workload::{WorkloadName, WorkloadSpec};
use rayon::prelude::*;

/// Longest native run the restart sweep may use.
const RESTART_MAX_EVENTS: u64 = 300;
/// Seeds in the random point-to-point drain sweep.
const DRAIN_SEEDS: u64 = 1000;
const SEED: u64 = 20;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn other(e: EngineId) -> EngineId {
    if e == EngineId::LINEAR {
        EngineId::BINOMIAL
    } else {
        EngineId::LINEAR
    }
}

fn corpus_reports() -> Vec<VerificationReport> {
    explore::acceptance_corpus().iter().map(|c| explore::explore(c).expect("explore")).collect()
}

fn safety(reports: &[VerificationReport]) -> Verdict {
    let violations: u64 = reports.iter().map(|r| r.violation_count).sum();
    let bounded = reports.iter().filter(|r| r.bounded_incomplete).count();
    let traces: u64 = reports.iter().map(|r| r.traces_explored).sum();
    let mut first = String::new();
    if let Some(cx) = reports.iter().flat_map(|r| &r.violations).next() {
        first = format!("; first: {} at event {}: {}", cx.invariant, cx.event, cx.detail);
    }
    verdict(
        violations == 0 && bounded == 0,
        format!(
            "{} configs, {traces} traces, violations={violations} (tolerance 0), bounded searches={bounded} (tolerance 0){first}",
            reports.len()
        ),
    )
}

fn liveness(reports: &[VerificationReport]) -> Verdict {
    let deadlocks: u64 = reports.iter().map(|r| r.deadlock_count).sum();
    let delay = reports.iter().flat_map(|r| &r.violations).filter(|v| v.invariant == "late-collective-entry").count();
    let no_completion = reports.iter().filter(|r| r.completed_traces == 0).count();
    verdict(
        deadlocks == 0 && delay == 0 && no_completion == 0,
        format!(
            "deadlocks={deadlocks} (tolerance 0), enter-collective between universal intend and do-ckpt={delay} (tolerance 0), configs never completing={no_completion}"
        ),
    )
}

fn mutants() -> Verdict {
    let list = [
        ("skip-extra-iteration", Mutations { skip_extra_iteration: true, ..Mutations::NONE }),
        ("no-phase-gate", Mutations { no_phase_gate: true, ..Mutations::NONE }),
        ("drop-drained", Mutations { drop_drained: true, ..Mutations::NONE }),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, m) in list {
        let mut found = 0;
        let mut replayed = 0;
        let mut kept = 0;
        for (scenario, programs) in explore::scenarios(2) {
            let cfg = ExploreConfig::new(&scenario, EngineId::LINEAR, programs).with_mutations(m);
            let r = explore::explore(&cfg).expect("explore");
            found += r.violation_count;
            for cx in &r.violations {
                kept += 1;
                let rep = explore::replay_counterexample(&cfg, &cx.schedule).expect("replay");
                if rep.violations.iter().any(|v| v.invariant == cx.invariant && v.event == cx.event) {
                    replayed += 1;
                }
            }
        }
        pass &= found >= 1 && replayed == kept;
        parts.push(format!("{name}: {found} violations, {replayed}/{kept} counterexamples replay"));
    }
    verdict(pass, parts.join("; "))
}

/// Largest step count whose native run fits the event budget.
fn steps_within(name: WorkloadName, n: u32, engine: EngineId) -> WorkloadSpec {
    let mut best = WorkloadSpec::new(name, n, 1);
    for steps in 1..=64 {
        let spec = WorkloadSpec::new(name, n, steps);
        if harness::run(&spec, &RunOptions::new(engine, SEED)).expect("run").events > RESTART_MAX_EVENTS {
            break;
        }
        best = spec;
    }
    best
}

struct RestartSweep {
    restarts: u64,
    same_engine_ok: u64,
    cross: u64,
    cross_ok: u64,
    incomplete: u64,
    sets: Vec<ImageSet>,
    failures: Vec<String>,
}

struct KResult {
    same: (u64, u64),
    cross: (u64, u64),
    missing: bool,
    sets: Vec<ImageSet>,
    failures: Vec<String>,
}

fn restart_sweep() -> RestartSweep {
    let mut out = RestartSweep { restarts: 0, same_engine_ok: 0, cross: 0, cross_ok: 0, incomplete: 0, sets: Vec::new(), failures: Vec::new() };
    for name in [WorkloadName::RingPingpong, WorkloadName::IterAllreduce, WorkloadName::CommSplitMix] {
        for engine in EngineId::registered() {
            let spec = steps_within(name, 4, engine);
            let opts = RunOptions::new(engine, SEED);
            let native = harness::run(&spec, &opts).expect("native run");
            let results: Vec<KResult> = (0..=native.events)
                .into_par_iter()
                .map(|k| {
                    let mut r = KResult { same: (0, 0), cross: (0, 0), missing: false, sets: Vec::new(), failures: Vec::new() };
                    let run = harness::run_with_checkpoints(&spec, &opts, &[k]).expect("checkpointed run");
                    if run.status != RunStatus::Completed || run.digest != native.digest {
                        r.failures.push(format!("{name}/{engine} ckpt@{k}: {:?} {:?}", run.status, run.violations));
                    }
                    r.missing = run.image_sets.len() != 1;
                    for set in run.image_sets {
                        for (e, slot) in [(engine, &mut r.same), (other(engine), &mut r.cross)] {
                            let back = harness::restart(&set, &RunOptions::new(e, SEED + k)).expect("restart");
                            slot.0 += 1;
                            if back.status == RunStatus::Completed && back.digest == native.digest {
                                slot.1 += 1;
                            } else {
                                r.failures.push(format!("{name}/{engine} ckpt@{k} restarted on {e}: {:?}", back.status));
                            }
                        }
                        r.sets.push(set);
                    }
                    r
                })
                .collect();
            for r in results {
                out.restarts += r.same.0;
                out.same_engine_ok += r.same.1;
                out.cross += r.cross.0;
                out.cross_ok += r.cross.1;
                out.incomplete += r.missing as u64;
                out.sets.extend(r.sets);
                out.failures.extend(r.failures);
            }
        }
    }
    out
}

fn restart_equivalence(s: &RestartSweep) -> Verdict {
    let first = s.failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default();
    verdict(
        s.restarts > 0 && s.same_engine_ok == s.restarts && s.incomplete == 0 && s.failures.is_empty(),
        format!(
            "{}/{} restarts match the native digest (tolerance 100%), checkpoint indices without an image set={}{first}",
            s.same_engine_ok, s.restarts, s.incomplete
        ),
    )
}

fn cross_engine(s: &RestartSweep) -> Verdict {
    verdict(
        s.cross > 0 && s.cross_ok == s.cross,
        format!("{}/{} image sets restart under the other engine with the native digest (tolerance 100%)", s.cross_ok, s.cross),
    )
}

fn drain_conservation() -> Verdict {
    let results: Vec<(u64, u64, Option<String>)> = (0..DRAIN_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let spec = WorkloadSpec { name: WorkloadName::RandomP2p, world_size: 4, steps: 6, payload_bytes: 8, seed };
            let opts = RunOptions::new(if seed % 2 == 0 { EngineId::LINEAR } else { EngineId::BINOMIAL }, seed);
            let native = harness::run(&spec, &opts).expect("run");
            let at = [seed % native.events.max(1), (seed * 7 + 3) % native.events.max(1)];
            let run = harness::run_with_checkpoints(&spec, &opts, &at).expect("checkpointed run");
            let mut err = (run.status != RunStatus::Completed).then(|| format!("seed {seed}: {:?}", run.violations));
            let drained: u64 = run.image_sets.iter().flat_map(|s| &s.states).map(|s| s.drained.len() as u64).sum();
            for set in &run.image_sets {
                if let Err(e) = common::conservation(set) {
                    err.get_or_insert(format!("seed {seed}: {e}"));
                }
            }
            (run.image_sets.len() as u64, drained, err)
        })
        .collect();
    let images: u64 = results.iter().map(|r| r.0).sum();
    let drained: u64 = results.iter().map(|r| r.1).sum();
    let bad: Vec<&String> = results.iter().filter_map(|r| r.2.as_ref()).collect();
    let first = bad.first().map(|f| format!("; first: {f}")).unwrap_or_default();
    verdict(
        bad.is_empty() && images > 0 && drained > 0,
        format!(
            "{DRAIN_SEEDS} seeds, {images} image sets, {drained} drained messages, imbalanced or duplicated={} (tolerance 0){first}",
            bad.len()
        ),
    )
}

fn structural_overhead() -> Verdict {
    let mut runs = 0;
    let mut bad = Vec::new();
    for name in WorkloadName::ALL {
        for n in 1..=4 {
            for engine in EngineId::registered() {
                for seed in 0..5 {
                    let out = harness::run(&WorkloadSpec::new(name, n, 4), &RunOptions::new(engine, seed)).expect("run");
                    let m = harness::metrics(&out.trace);
                    runs += 1;
                    if m.extra_barriers != m.collectives || m.ctl_messages != 0 {
                        bad.push(format!("{name} n={n} {engine} seed={seed}: {m:?}"));
                    }
                }
            }
        }
    }
    verdict(
        bad.is_empty(),
        format!("{runs} checkpoint-free runs, extra-barriers != collectives or ctl-messages > 0 in {} (tolerance 0)", bad.len()),
    )
}

fn determinism() -> Verdict {
    let mut runs = 0;
    let mut diffs = 0;
    for name in WorkloadName::ALL {
        for engine in EngineId::registered() {
            for seed in [0, 1, 99] {
                let spec = WorkloadSpec::new(name, 4, 3);
                for ckpt in [vec![], vec![seed * 5 + 10]] {
                    let opts = RunOptions::new(engine, seed);
                    let a = harness::run_with_checkpoints(&spec, &opts, &ckpt).expect("run");
                    let b = harness::run_with_checkpoints(&spec, &opts, &ckpt).expect("run");
                    runs += 1;
                    diffs += (a.trace_ndjson != b.trace_ndjson) as u64;
                }
            }
        }
    }
    verdict(diffs == 0, format!("{runs} repeated (spec, engine, seed) runs, differing traces={diffs} (tolerance 0, byte comparison)"))
}

fn image_format(sets: &[ImageSet]) -> Verdict {
    let states: Vec<_> = sets.iter().flat_map(|s| &s.states).collect();
    let round_trip_bad = states
        .par_iter()
        .filter(|s| {
            let bytes = encode_image(s).expect("encode");
            decode_image(&bytes).ok().and_then(|d| encode_image(&d).ok()).as_deref() != Some(&bytes[..])
        })
        .count();
    let sample: Vec<_> = states.iter().step_by(25).collect();
    let truncations_accepted: usize = sample
        .par_iter()
        .map(|s| {
            let bytes = encode_image(s).expect("encode");
            (0..bytes.len()).filter(|&cut| !matches!(decode_image(&bytes[..cut]), Err(ImageError::Corrupt(_)))).count()
        })
        .sum();
    let real = CommRef::Real(RealCommId(0x101));
    let real_accepted = sample
        .iter()
        .filter(|s| {
            let mut a = (***s).clone();
            a.drained.push(DrainedMessage { src: 0, comm: real, tag: 0, seq: 0, envelope: 0, payload: vec![1] });
            let mut b = (***s).clone();
            b.pending_collective = Some(CollectiveSpec { op: CollOp::Barrier, comm: real, root: None, reduce: None, payload: 0 });
            [a, b].iter().any(|x| !matches!(encode_image(x), Err(ImageError::RealIdInState(_))))
        })
        .count();
    let dir = tempfile::tempdir().expect("tempdir");
    let disk_bad = sets
        .iter()
        .step_by(50)
        .enumerate()
        .filter(|(i, set)| {
            let d = dir.path().join(i.to_string());
            set.write_to(&d).is_err() || ImageSet::read_from(&d).map(|b| b.states != set.states || b.manifest != set.manifest).unwrap_or(true)
        })
        .count();
    verdict(
        !states.is_empty() && round_trip_bad + truncations_accepted + real_accepted + disk_bad == 0,
        format!(
            "{} images: round-trip mismatches={round_trip_bad}, accepted truncations={truncations_accepted} over {} images, accepted real-id states={real_accepted}, on-disk set mismatches={disk_bad} (tolerance 0 each)",
            states.len(),
            sample.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |n: u32, name: &str, t: Instant, v: Verdict| {
        all &= v.pass;
        println!("{} [{n}] {name}: {} ({:.1}s)", if v.pass { "PASS" } else { "FAIL" }, v.detail, t.elapsed().as_secs_f64());
    };
    let t = Instant::now();
    let reports = corpus_reports();
    report(1, "safety over all checkpoint prefixes", t, safety(&reports));
    report(2, "liveness", t, liveness(&reports));
    let t = Instant::now();
    report(3, "checker non-vacuity", t, mutants());
    let t = Instant::now();
    let sweep = restart_sweep();
    report(4, "restart equivalence", t, restart_equivalence(&sweep));
    report(5, "cross-engine restart", t, cross_engine(&sweep));
    let t = Instant::now();
    report(6, "drain conservation", t, drain_conservation());
    let t = Instant::now();
    report(7, "structural overhead", t, structural_overhead());
    let t = Instant::now();
    report(8, "determinism", t, determinism());
    let t = Instant::now();
    report(9, "image format", t, image_format(&sweep.sets));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
