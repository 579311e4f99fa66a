//! `mana-sim`: run workloads, checkpoint and restart them, explore
//! interleavings, and summarize traces.
//!
//! Exit codes: 0 success, 1 other error, 2 usage, 3 deadlock,
//! 4 invariant violation, 5 corrupt or unsupported image.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mana_sim::ckptstore::ImageSet;
use mana_sim::engine::EngineId;
use mana_sim::explore::{self, Counterexample, ExploreConfig, VerificationReport};
use mana_sim::harness::{self, exit, HarnessError, RunOptions, RunOutcome, RunStatus};
use mana_sim::runtime::Mutations;
use mana_sim::simnet::{records_to_ndjson, Trace};
use mana_sim::workload::{WorkloadName, WorkloadSpec};

#[derive(Parser)]
#[command(name = "mana-sim", version, about = "Deterministic simulated MPI runtime with coordinated checkpoint/restart")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload to completion.
    Run(RunArgs),
    /// Run a workload, checkpointing at the given event counts.
    CkptRun(CkptRunArgs),
    /// Restart an image set, possibly under another engine.
    Restart(RestartArgs),
    /// Exhaustively explore interleavings of a small configuration.
    Explore(ExploreArgs),
    /// Summarize a trace file.
    Metrics(MetricsArgs),
    /// Re-execute a recorded schedule or counterexample.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Linear,
    Binomial,
}

impl From<EngineArg> for EngineId {
    fn from(e: EngineArg) -> EngineId {
        match e {
            EngineArg::Linear => EngineId::LINEAR,
            EngineArg::Binomial => EngineId::BINOMIAL,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutant {
    SkipExtraIteration,
    NoPhaseGate,
    DropDrained,
}

fn mutations(ms: &[Mutant]) -> Mutations {
    let mut m = Mutations::NONE;
    for x in ms {
        match x {
            Mutant::SkipExtraIteration => m.skip_extra_iteration = true,
            Mutant::NoPhaseGate => m.no_phase_gate = true,
            Mutant::DropDrained => m.drop_drained = true,
        }
    }
    m
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, value_enum, default_value = "linear")]
    engine: EngineArg,
    /// Scheduler seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace output file (NDJSON).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Directory for trace files when --trace is not given.
    #[arg(long, env = "MANA_SIM_TRACE_DIR", hide_env_values = true)]
    trace_dir: Option<PathBuf>,
    /// Write the decisions taken as a JSON array, for `replay`.
    #[arg(long)]
    save_schedule: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    /// JSON workload spec; flags given explicitly override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workload: Option<String>,
    #[arg(long)]
    world_size: Option<u32>,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long)]
    payload_bytes: Option<u32>,
    #[arg(long)]
    workload_seed: Option<u64>,
}

impl WorkloadArgs {
    fn spec(&self) -> Result<WorkloadSpec, Failure> {
        let mut spec = match &self.config {
            Some(p) => serde_json::from_slice(&read(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
            None => WorkloadSpec::new(WorkloadName::IterAllreduce, 4, 10),
        };
        if let Some(w) = &self.workload {
            spec.name = w.parse().map_err(|e| Failure::usage(format!("{e}")))?;
        }
        if let Some(n) = self.world_size {
            spec.world_size = n;
        }
        if let Some(s) = self.steps {
            spec.steps = s;
        }
        if let Some(p) = self.payload_bytes {
            spec.payload_bytes = p;
        }
        if let Some(s) = self.workload_seed {
            spec.seed = s;
        }
        spec.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CkptRunArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    common: Common,
    /// Executed-event count at which to begin a checkpoint; repeatable.
    #[arg(long = "ckpt-at-event", required = true)]
    ckpt_at_event: Vec<u64>,
    /// Image sets go to <image-dir>/ckpt-<k>.
    #[arg(long)]
    image_dir: PathBuf,
}

#[derive(Args)]
struct RestartArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding manifest.json and rank-<r>.img files.
    #[arg(long)]
    image_dir: PathBuf,
}

#[derive(Args)]
struct ExploreArgs {
    #[arg(long, value_enum, default_value = "linear")]
    engine: EngineArg,
    /// World sizes to explore; repeatable. Defaults to 2 and 3.
    #[arg(long)]
    world_size: Vec<u32>,
    /// Only scenarios whose name contains this string.
    #[arg(long)]
    scenario: Option<String>,
    /// JSON explorer configuration instead of the built-in scenarios.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Test-only protocol fault; repeatable.
    #[arg(long, value_enum)]
    mutant: Vec<Mutant>,
    #[arg(long)]
    max_states: Option<u64>,
    #[arg(long)]
    max_depth: Option<u64>,
    /// Search on one thread.
    #[arg(long)]
    sequential: bool,
    /// Write each counterexample as a replayable JSON file here.
    #[arg(long)]
    counterexample_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReplayArgs {
    /// A counterexample file from `explore`, or a JSON decision array.
    schedule: PathBuf,
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    common: Common,
    /// Checkpoint triggers of the recorded run (decision arrays only).
    #[arg(long = "ckpt-at-event")]
    ckpt_at_event: Vec<u64>,
    #[arg(long, value_enum)]
    mutant: Vec<Mutant>,
}

struct Failure {
    code: i32,
    msg: String,
}

impl Failure {
    fn usage(msg: String) -> Self {
        Failure { code: exit::USAGE, msg }
    }
    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure { code: exit::ERROR, msg: format!("{}: {e}", path.display()) }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure { code: e.exit_code(), msg: e.to_string() }
    }
}

impl From<mana_sim::error::SimError> for Failure {
    fn from(e: mana_sim::error::SimError) -> Self {
        HarnessError::from(e).into()
    }
}

impl From<mana_sim::error::ImageError> for Failure {
    fn from(e: mana_sim::error::ImageError) -> Self {
        HarnessError::from(e).into()
    }
}

fn read(p: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(p).map_err(|e| Failure::io(p, e))
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(p, bytes).map_err(|e| Failure::io(p, e))
}

fn trace_path(c: &Common, default_name: &str) -> Option<PathBuf> {
    c.trace.clone().or_else(|| c.trace_dir.as_ref().map(|d| d.join(default_name)))
}

/// Writes the trace and prints a summary; the status picks the exit code.
fn report_run(c: &Common, out: &RunOutcome, trace_name: &str, extra: serde_json::Value) -> Result<i32, Failure> {
    let path = trace_path(c, trace_name);
    if let Some(p) = &path {
        write(p, &out.trace_ndjson)?;
    }
    if let Some(p) = &c.save_schedule {
        write(p, serde_json::to_vec(&out.schedule).expect("json"))?;
    }
    if c.json {
        let mut v = json!({
            "status": out.status,
            "digest": out.digest,
            "events": out.events,
            "trace": path.as_ref().map(|p| p.display().to_string()),
            "violations": out.violations,
            "metrics": harness::metrics(&out.trace),
        });
        if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
            obj.extend(more);
        }
        println!("{}", serde_json::to_string_pretty(&v).expect("json"));
    } else {
        println!("status: {}", serde_json::to_value(out.status).expect("json").as_str().unwrap_or_default());
        println!("digest: {}", out.digest);
        println!("events: {}", out.events);
        if let Some(p) = &path {
            println!("trace: {}", p.display());
        }
        for v in &out.violations {
            println!("violation: {} at event {}: {}", v.invariant, v.event, v.detail);
        }
        if let serde_json::Value::Object(more) = extra {
            for (k, v) in more {
                println!("{k}: {v}");
            }
        }
    }
    Ok(out.status.exit_code())
}

fn opts(c: &Common) -> RunOptions {
    RunOptions::new(c.engine.into(), c.seed)
}

fn cmd_run(a: RunArgs) -> Result<i32, Failure> {
    let spec = a.workload.spec()?;
    let out = harness::run(&spec, &opts(&a.common))?;
    let name = format!("run-{}-{}-{}.ndjson", spec.name, EngineId::from(a.common.engine), a.common.seed);
    report_run(&a.common, &out, &name, json!({}))
}

fn cmd_ckpt_run(a: CkptRunArgs) -> Result<i32, Failure> {
    let spec = a.workload.spec()?;
    let out = harness::run_with_checkpoints(&spec, &opts(&a.common), &a.ckpt_at_event)?;
    let mut dirs = Vec::new();
    for (k, set) in out.image_sets.iter().enumerate() {
        let dir = a.image_dir.join(format!("ckpt-{k}"));
        set.write_to(&dir)?;
        dirs.push(dir.display().to_string());
    }
    let name = format!("ckpt-run-{}-{}-{}.ndjson", spec.name, EngineId::from(a.common.engine), a.common.seed);
    report_run(&a.common, &out, &name, json!({"image_sets": dirs}))
}

fn cmd_restart(a: RestartArgs) -> Result<i32, Failure> {
    let set = ImageSet::read_from(&a.image_dir)?;
    let out = harness::restart(&set, &opts(&a.common))?;
    let name = format!("restart-{}-{}-{}.ndjson", set.manifest.workload.name, EngineId::from(a.common.engine), a.common.seed);
    report_run(&a.common, &out, &name, json!({"created_at_event": set.manifest.created_at_event}))
}

fn cmd_explore(a: ExploreArgs) -> Result<i32, Failure> {
    let engine: EngineId = a.engine.into();
    let mut configs = match &a.config {
        Some(p) => vec![serde_json::from_slice::<ExploreConfig>(&read(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?],
        None => {
            let sizes = if a.world_size.is_empty() { vec![2, 3] } else { a.world_size.clone() };
            sizes
                .iter()
                .flat_map(|&n| explore::scenarios(n))
                .filter(|(name, _)| a.scenario.as_ref().map_or(true, |s| name.contains(s.as_str())))
                .map(|(name, programs)| ExploreConfig::new(&format!("{name}-{engine}"), engine, programs))
                .collect()
        }
    };
    if configs.is_empty() {
        return Err(Failure::usage("no scenario matches".into()));
    }
    for c in &mut configs {
        let m = mutations(&a.mutant);
        c.mutations.skip_extra_iteration |= m.skip_extra_iteration;
        c.mutations.no_phase_gate |= m.no_phase_gate;
        c.mutations.drop_drained |= m.drop_drained;
        if let Some(s) = a.max_states {
            c.max_states = s;
        }
        if let Some(d) = a.max_depth {
            c.max_depth = d;
        }
        c.parallel = !a.sequential;
    }
    let mut reports: Vec<VerificationReport> = Vec::new();
    for c in &configs {
        let r = explore::explore(c)?;
        if let Some(dir) = &a.counterexample_dir {
            for (i, cx) in r.violations.iter().chain(&r.deadlocks).enumerate() {
                let file = dir.join(format!("{}-{}-{i}.json", c.name, cx.invariant));
                write(&file, serde_json::to_vec_pretty(&json!({"config": c, "counterexample": cx})).expect("json"))?;
            }
        }
        if !a.json {
            println!(
                "{}: states={} traces={} completed={} violations={} deadlocks={} cases={:?}{}",
                r.config,
                r.distinct_states,
                r.traces_explored,
                r.completed_traces,
                r.violation_count,
                r.deadlock_count,
                r.snapshot_cases,
                if r.bounded_incomplete { " (bounded, incomplete)" } else { "" }
            );
            for v in &r.violations {
                println!("  {} at event {}: {} schedule={:?}", v.invariant, v.event, v.detail, v.schedule);
            }
        }
        reports.push(r);
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports).expect("json"));
    }
    Ok(if reports.iter().any(|r| r.violation_count > 0) {
        exit::INVARIANT_VIOLATION
    } else if reports.iter().any(|r| r.deadlock_count > 0) {
        exit::DEADLOCK
    } else if reports.iter().any(|r| r.bounded_incomplete) {
        exit::ERROR
    } else {
        exit::OK
    })
}

fn cmd_metrics(a: MetricsArgs) -> Result<i32, Failure> {
    let text = String::from_utf8(read(&a.trace)?).map_err(|e| Failure::usage(format!("{}: {e}", a.trace.display())))?;
    let records = Trace::parse_ndjson(&text).map_err(|e| Failure::usage(format!("malformed trace: {e}")))?;
    let m = harness::metrics(&records);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&m).expect("json"));
    } else {
        println!("collectives: {}", m.collectives);
        println!("extra-barriers: {}", m.extra_barriers);
        println!("ctl-messages: {}", m.ctl_messages);
        println!("extra-iteration-rounds: {}", m.extra_iteration_rounds);
        println!("drained: {}", m.drained);
    }
    Ok(exit::OK)
}

fn cmd_replay(a: ReplayArgs) -> Result<i32, Failure> {
    let raw: serde_json::Value =
        serde_json::from_slice(&read(&a.schedule)?).map_err(|e| Failure::usage(format!("{}: {e}", a.schedule.display())))?;
    if raw.is_array() {
        let decisions: Vec<usize> = serde_json::from_value(raw).map_err(|e| Failure::usage(e.to_string()))?;
        let spec = a.workload.spec()?;
        let mut o = opts(&a.common);
        o.mutations = mutations(&a.mutant);
        let out = harness::replay(&spec, &o, decisions, &a.ckpt_at_event)?;
        let name = format!("replay-{}.ndjson", spec.name);
        return report_run(&a.common, &out, &name, json!({}));
    }
    let config: ExploreConfig =
        serde_json::from_value(raw["config"].clone()).map_err(|e| Failure::usage(format!("bad counterexample config: {e}")))?;
    let cx: Counterexample =
        serde_json::from_value(raw["counterexample"].clone()).map_err(|e| Failure::usage(format!("bad counterexample: {e}")))?;
    let r = explore::replay_counterexample(&config, &cx.schedule)?;
    let path = trace_path(&a.common, &format!("replay-{}.ndjson", config.name));
    if let Some(p) = &path {
        write(p, records_to_ndjson(&r.trace))?;
    }
    let reproduced = r.violations.iter().any(|v| v.invariant == cx.invariant && v.event == cx.event)
        || (cx.invariant == "deadlock" && !r.complete && r.events == cx.event);
    let v = json!({
        "invariant": cx.invariant,
        "expected_event": cx.event,
        "events": r.events,
        "reproduced": reproduced,
        "violations": r.violations,
        "trace": path.map(|p| p.display().to_string()),
    });
    if a.common.json {
        println!("{}", serde_json::to_string_pretty(&v).expect("json"));
    } else {
        println!("reproduced {}: {reproduced} (event {} of {})", cx.invariant, cx.event, r.events);
    }
    Ok(if !r.violations.is_empty() {
        RunStatus::InvariantViolation.exit_code()
    } else if !r.complete {
        RunStatus::Deadlock.exit_code()
    } else {
        exit::OK
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::CkptRun(a) => cmd_ckpt_run(a),
        Cmd::Restart(a) => cmd_restart(a),
        Cmd::Explore(a) => cmd_explore(a),
        Cmd::Metrics(a) => cmd_metrics(a),
        Cmd::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("mana-sim: {}", f.msg);
            ExitCode::from(f.code as u8)
        }
    }
}
