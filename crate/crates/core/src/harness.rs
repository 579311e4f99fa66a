//! Batch entry points shared by the CLI, the tests and the web demo.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ckptstore::{decode_image, encode_image, ImageSet, Manifest};
use crate::engine::EngineId;
use crate::error::{ImageError, Result, SimError};
use crate::runtime::{Mutations, Violation, World, WorldConfig};
use crate::simnet::{Schedule, TraceRecord};
use crate::workload::WorkloadSpec;

/// Process exit codes of the `mana-sim` binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const ERROR: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DEADLOCK: i32 = 3;
    pub const INVARIANT_VIOLATION: i32 = 4;
    pub const CORRUPT_IMAGE: i32 = 5;
}

/// Upper bound on events for any single run; workloads are finite, so this
/// only trips on a runtime bug.
pub const MAX_EVENTS: u64 = 50_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Deadlock,
    InvariantViolation,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Completed => exit::OK,
            RunStatus::Deadlock => exit::DEADLOCK,
            RunStatus::InvariantViolation => exit::INVARIANT_VIOLATION,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub digest: String,
    pub events: u64,
    pub violations: Vec<Violation>,
    /// Decisions taken, replayable as a scripted schedule.
    pub schedule: Vec<usize>,
    pub trace: Vec<TraceRecord>,
    pub trace_ndjson: String,
    /// One image set per completed checkpoint, in order.
    pub image_sets: Vec<ImageSet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub engine: EngineId,
    pub seed: u64,
    pub trace: bool,
    pub mutations: Mutations,
}

impl RunOptions {
    pub fn new(engine: EngineId, seed: u64) -> Self {
        Self { engine, seed, trace: true, mutations: Mutations::NONE }
    }
}

fn config(opts: &RunOptions) -> WorldConfig {
    let mut cfg = WorldConfig::new(opts.engine);
    cfg.trace = opts.trace;
    cfg.mutations = opts.mutations;
    cfg
}

pub fn new_world(spec: &WorkloadSpec, cfg: WorldConfig) -> Result<World> {
    spec.validate()?;
    World::new(spec.programs(), (0..spec.world_size).map(|r| spec.initial_memory(r)).collect(), cfg)
}

/// Runs to quiescence, firing a checkpoint whenever the executed-event
/// count reaches the next entry of `ckpt_at` (deferred while one is still
/// in progress).
fn drive(world: &mut World, schedule: &mut Schedule, ckpt_at: &[u64]) -> Result<Vec<u64>> {
    let mut triggers: Vec<u64> = ckpt_at.to_vec();
    triggers.sort_unstable();
    triggers.reverse();
    let mut fired = Vec::new();
    loop {
        if world.executed() > MAX_EVENTS {
            return Err(SimError::InvariantViolation(format!("run exceeded {MAX_EVENTS} events")));
        }
        if let Some(&k) = triggers.last() {
            let enabled = world.enabled_events();
            let due = world.executed() >= k || enabled.is_empty();
            if due && !world.coordinator().is_busy() && world.violations().is_empty() {
                triggers.pop();
                fired.push(world.executed());
                world.trigger_checkpoint()?;
                continue;
            }
        }
        if !world.violations().is_empty() {
            world.halt();
        }
        if world.step(schedule)?.is_none() {
            break;
        }
    }
    Ok(fired)
}

fn finish(world: World, schedule: &Schedule, spec: &WorkloadSpec, fired: &[u64]) -> std::result::Result<RunOutcome, ImageError> {
    let status = if !world.violations().is_empty() {
        RunStatus::InvariantViolation
    } else if !world.is_complete() {
        RunStatus::Deadlock
    } else {
        RunStatus::Completed
    };
    let mut by_ckpt: BTreeMap<u32, Vec<_>> = BTreeMap::new();
    for img in world.images() {
        by_ckpt.entry(img.checkpoint).or_default().push(img.state.clone());
    }
    let mut image_sets = Vec::new();
    for (ordinal, states) in by_ckpt {
        if states.len() != spec.world_size as usize {
            continue;
        }
        // the bytes, not the live struct, are what a restart sees
        let states = states.iter().map(|s| decode_image(&encode_image(s)?)).collect::<std::result::Result<Vec<_>, _>>()?;
        let manifest = Manifest {
            world_size: spec.world_size,
            workload: spec.clone(),
            created_at_event: fired.get(ordinal as usize).copied().unwrap_or_default(),
        };
        image_sets.push(ImageSet::new(manifest, states)?);
    }
    Ok(RunOutcome {
        status,
        digest: world.digest(),
        events: world.executed(),
        violations: world.violations().to_vec(),
        schedule: schedule.taken().to_vec(),
        trace: world.trace().records().to_vec(),
        trace_ndjson: world.trace().to_ndjson(),
        image_sets,
    })
}

/// Error from a checkpointed run: either the simulation or an image.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Sim(SimError::Deadlock(_)) => exit::DEADLOCK,
            HarnessError::Sim(SimError::InvariantViolation(_)) => exit::INVARIANT_VIOLATION,
            HarnessError::Sim(SimError::InvalidConfig(_)) => exit::USAGE,
            HarnessError::Sim(_) => exit::ERROR,
            HarnessError::Image(ImageError::Io(_)) => exit::ERROR,
            HarnessError::Image(_) => exit::CORRUPT_IMAGE,
        }
    }
}

pub type HResult<T> = std::result::Result<T, HarnessError>;

/// Uninterrupted run under a seeded schedule.
pub fn run(spec: &WorkloadSpec, opts: &RunOptions) -> HResult<RunOutcome> {
    run_with_checkpoints(spec, opts, &[])
}

/// Run with a checkpoint begun at each executed-event count in `ckpt_at`.
/// The run continues to completion after every checkpoint.
pub fn run_with_checkpoints(spec: &WorkloadSpec, opts: &RunOptions, ckpt_at: &[u64]) -> HResult<RunOutcome> {
    let mut world = new_world(spec, config(opts))?;
    let mut schedule = Schedule::seeded(opts.seed);
    let fired = drive(&mut world, &mut schedule, ckpt_at)?;
    Ok(finish(world, &schedule, spec, &fired)?)
}

/// Restarts an image set on a fresh engine and runs it to completion.
pub fn restart(set: &ImageSet, opts: &RunOptions) -> HResult<RunOutcome> {
    set.validate()?;
    let spec = &set.manifest.workload;
    if spec.world_size != set.manifest.world_size {
        return Err(ImageError::Corrupt(format!(
            "manifest world size {} does not match workload world size {}",
            set.manifest.world_size, spec.world_size
        ))
        .into());
    }
    let mut world = World::restore(spec.programs(), set.states.clone(), config(opts))?;
    let mut schedule = Schedule::seeded(opts.seed);
    let fired = drive(&mut world, &mut schedule, &[])?;
    Ok(finish(world, &schedule, spec, &fired)?)
}

/// Re-executes a run from its recorded decisions.
pub fn replay(spec: &WorkloadSpec, opts: &RunOptions, decisions: Vec<usize>, ckpt_at: &[u64]) -> HResult<RunOutcome> {
    let mut world = new_world(spec, config(opts))?;
    let mut schedule = Schedule::scripted(decisions);
    let fired = drive(&mut world, &mut schedule, ckpt_at)?;
    Ok(finish(world, &schedule, spec, &fired)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Metrics {
    pub collectives: u64,
    pub extra_barriers: u64,
    pub ctl_messages: u64,
    pub extra_iteration_rounds: u64,
    pub drained: u64,
}

/// Counts computed from trace records alone.
pub fn metrics(trace: &[TraceRecord]) -> Metrics {
    let mut m = Metrics::default();
    let mut rounds = BTreeSet::new();
    for rec in trace {
        match rec.kind.as_str() {
            "enter-collective" => match rec.detail["trivial"].as_bool() {
                Some(true) => m.extra_barriers += 1,
                _ => m.collectives += 1,
            },
            "ctl-send" => {
                m.ctl_messages += 1;
                if rec.detail["msg"]["kind"] == "extra-iteration" {
                    rounds.insert(rec.detail["msg"]["round"].as_u64().unwrap_or_default());
                }
            }
            "drain" => m.drained += rec.detail["count"].as_u64().unwrap_or_default(),
            _ => {}
        }
    }
    m.extra_iteration_rounds = rounds.len() as u64;
    m
}
