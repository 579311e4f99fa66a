//! Bounded exhaustive exploration of every scheduler interleaving of a
//! small job, with a begin-checkpoint event that may fire at any prefix.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{CollOp, EngineId, ReduceFn};
use crate::error::{Result, SimError};
use crate::runtime::{Mutations, SnapshotCase, World, WorldConfig};
use crate::simnet::{Schedule, TraceRecord};
use crate::upperhalf::Vid;
use crate::workload::{Op, Program, WorkloadSpec};

/// Counterexamples kept per invariant; the total is always counted.
const KEEP_PER_INVARIANT: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreConfig {
    pub name: String,
    pub engine: EngineId,
    pub programs: Vec<Program>,
    pub memories: Vec<Vec<u8>>,
    #[serde(default)]
    pub mutations: Mutations,
    /// Make begin-checkpoint an enabled event from the start.
    pub inject_checkpoint: bool,
    pub max_depth: u64,
    /// Cap on distinct states per search; hitting it flags the result
    /// as incomplete.
    pub max_states: u64,
    #[serde(default = "yes")]
    pub parallel: bool,
}

fn yes() -> bool {
    true
}

impl ExploreConfig {
    pub fn new(name: &str, engine: EngineId, programs: Vec<Program>) -> Self {
        let memories = (0..programs.len()).map(|r| vec![r as u8 + 1; 8]).collect();
        Self {
            name: name.to_string(),
            engine,
            programs,
            memories,
            mutations: Mutations::NONE,
            inject_checkpoint: true,
            max_depth: 10_000,
            max_states: 20_000_000,
            parallel: true,
        }
    }

    pub fn from_workload(spec: &WorkloadSpec, engine: EngineId) -> Self {
        let mut cfg = Self::new(spec.name.as_str(), engine, spec.programs());
        cfg.memories = (0..spec.world_size).map(|r| spec.initial_memory(r)).collect();
        cfg
    }

    pub fn world_size(&self) -> u32 {
        self.programs.len() as u32
    }

    pub fn with_mutations(mut self, m: Mutations) -> Self {
        self.mutations = m;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.programs.len();
        if n == 0 || n > 4 {
            return Err(SimError::InvalidConfig(format!("explorer supports 1 to 4 ranks, got {n}")));
        }
        if self.memories.len() != n {
            return Err(SimError::InvalidConfig("one memory image per rank required".into()));
        }
        Ok(())
    }

    fn world(&self, trace: bool) -> Result<World> {
        let mut cfg = WorldConfig::new(self.engine);
        cfg.trace = trace;
        cfg.capture_images = false;
        cfg.mutations = self.mutations;
        cfg.inject_checkpoint = self.inject_checkpoint;
        World::new(self.programs.clone(), self.memories.clone(), cfg)
    }
}

fn allreduce(comm: Vid) -> Op {
    Op::allreduce(comm, 4)
}

/// The scenarios checked for world sizes 2 and 3: one or two wrappers,
/// on the same or distinct communicators, with and without p2p traffic.
pub fn scenarios(n: u32) -> Vec<(String, Vec<Program>)> {
    let dup = Vid(1);
    let mut out = vec![
        (format!("single-allreduce-{n}"), (0..n).map(|_| vec![allreduce(Vid::WORLD)]).collect()),
        (
            format!("dup-two-wrappers-{n}"),
            (0..n)
                .map(|_| {
                    vec![
                        Op::CommDup { parent: Vid::WORLD },
                        allreduce(Vid::WORLD),
                        Op::Collective { kind: CollOp::Bcast, comm: dup, root: Some(0), reduce: None, payload: 4 },
                    ]
                })
                .collect(),
        ),
        (
            format!("p2p-around-allreduce-{n}"),
            (0..n)
                .map(|r| {
                    let mut ops = Vec::new();
                    if r == 0 {
                        ops.push(Op::Send { dst: 1, tag: 0, comm: Vid::WORLD, len: 4 });
                    }
                    if r == 1 && n > 2 {
                        ops.push(Op::Send { dst: 2, tag: 0, comm: Vid::WORLD, len: 4 });
                    }
                    ops.push(Op::Collective { kind: CollOp::Allreduce, comm: Vid::WORLD, root: None, reduce: Some(ReduceFn::Max), payload: 4 });
                    if r == 1 {
                        ops.push(Op::Recv { src: Some(0), tag: Some(0), comm: Vid::WORLD });
                    }
                    if r == 2 {
                        ops.push(Op::Recv { src: Some(1), tag: Some(0), comm: Vid::WORLD });
                    }
                    ops
                })
                .collect(),
        ),
    ];
    if n == 3 {
        // rank 1 sits in both {0,1} and {1,2}; ranks 0 and 2 can be inside
        // wrappers on distinct comms at once
        let a = vec![0, 1];
        let b = vec![1, 2];
        out.push((
            "overlapping-subcomms-3".into(),
            vec![
                vec![Op::CommCreate { parent: Vid::WORLD, members: a.clone() }, allreduce(Vid(1))],
                vec![
                    Op::CommCreate { parent: Vid::WORLD, members: a },
                    Op::CommCreate { parent: Vid::WORLD, members: b.clone() },
                    allreduce(Vid(1)),
                    allreduce(Vid(2)),
                ],
                vec![Op::CommCreate { parent: Vid::WORLD, members: b }, allreduce(Vid(1))],
            ],
        ));
    }
    out
}

/// Every (scenario, engine) pair for world sizes 2 and 3.
pub fn acceptance_corpus() -> Vec<ExploreConfig> {
    let mut out = Vec::new();
    for n in [2, 3] {
        for (name, programs) in scenarios(n) {
            for engine in EngineId::registered() {
                out.push(ExploreConfig::new(&format!("{name}-{engine}"), engine, programs.clone()));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub invariant: String,
    /// Executed-event count at which the violation was observed.
    pub event: u64,
    pub detail: String,
    /// Scripted decisions reproducing the trace.
    pub schedule: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub config: String,
    pub world_size: u32,
    pub engine: String,
    pub traces_explored: u64,
    pub distinct_states: u64,
    pub completed_traces: u64,
    pub violation_count: u64,
    pub violations: Vec<Counterexample>,
    pub deadlock_count: u64,
    pub deadlocks: Vec<Counterexample>,
    /// Traces in which each report-time snapshot case was observed.
    pub snapshot_cases: BTreeMap<SnapshotCase, u64>,
    pub bounded_incomplete: bool,
}

impl VerificationReport {
    pub fn is_clean(&self) -> bool {
        self.violation_count == 0 && self.deadlock_count == 0 && !self.bounded_incomplete
    }

    fn merge(&mut self, o: VerificationReport) {
        self.traces_explored += o.traces_explored;
        self.distinct_states += o.distinct_states;
        self.completed_traces += o.completed_traces;
        self.violation_count += o.violation_count;
        self.deadlock_count += o.deadlock_count;
        for v in o.violations {
            self.keep_violation(v);
        }
        for d in o.deadlocks {
            if self.deadlocks.len() < KEEP_PER_INVARIANT {
                self.deadlocks.push(d);
            }
        }
        for (k, v) in o.snapshot_cases {
            *self.snapshot_cases.entry(k).or_insert(0) += v;
        }
        self.bounded_incomplete |= o.bounded_incomplete;
    }

    fn keep_violation(&mut self, v: Counterexample) {
        if self.violations.iter().filter(|x| x.invariant == v.invariant).count() < KEEP_PER_INVARIANT {
            self.violations.push(v);
        }
    }
}

struct Search<'a> {
    cfg: &'a ExploreConfig,
    visited: HashSet<u128>,
    report: VerificationReport,
}

impl Search<'_> {
    fn leaf(&mut self, w: &World) {
        self.report.traces_explored += 1;
        for (case, &n) in w.labels() {
            if n > 0 {
                *self.report.snapshot_cases.entry(*case).or_insert(0) += 1;
            }
        }
    }

    fn dfs(&mut self, w: World, path: &mut Vec<usize>, depth: u64) {
        if !self.visited.insert(w.fingerprint()) {
            self.leaf(&w);
            return;
        }
        if self.visited.len() as u64 > self.cfg.max_states {
            self.report.bounded_incomplete = true;
            self.leaf(&w);
            return;
        }
        let enabled = w.enabled_events();
        if enabled.is_empty() {
            self.leaf(&w);
            if w.is_complete() {
                self.report.completed_traces += 1;
            } else {
                self.report.deadlock_count += 1;
                if self.report.deadlocks.len() < KEEP_PER_INVARIANT {
                    self.report.deadlocks.push(Counterexample {
                        invariant: "deadlock".into(),
                        event: w.executed(),
                        detail: "no event enabled with work outstanding".into(),
                        schedule: path.clone(),
                    });
                }
            }
            return;
        }
        if depth >= self.cfg.max_depth {
            self.report.bounded_incomplete = true;
            self.leaf(&w);
            return;
        }
        let branching = enabled.len() > 1;
        for (i, &id) in enabled.iter().enumerate() {
            let mut child = w.clone();
            if branching {
                path.push(i);
            }
            let before = child.violations().len();
            match child.execute(id) {
                Err(e) => {
                    self.report.violation_count += 1;
                    self.report.keep_violation(Counterexample {
                        invariant: "runtime-error".into(),
                        event: child.executed(),
                        detail: e.to_string(),
                        schedule: path.clone(),
                    });
                    self.leaf(&child);
                }
                Ok(()) if child.violations().len() > before => {
                    for v in &child.violations()[before..] {
                        self.report.violation_count += 1;
                        self.report.keep_violation(Counterexample {
                            invariant: v.invariant.clone(),
                            event: v.event,
                            detail: v.detail.clone(),
                            schedule: path.clone(),
                        });
                    }
                    self.leaf(&child);
                }
                Ok(()) => self.dfs(child, path, depth + 1),
            }
            if branching {
                path.pop();
            }
        }
    }
}

/// Exhaustive DFS. With `parallel`, each first-level branch is searched
/// on its own thread with its own visited set; results are merged in
/// branch order, so the report does not depend on thread timing.
pub fn explore(cfg: &ExploreConfig) -> Result<VerificationReport> {
    cfg.validate()?;
    let root = cfg.world(false)?;
    let mut base = VerificationReport {
        config: cfg.name.clone(),
        world_size: cfg.world_size(),
        engine: cfg.engine.to_string(),
        ..Default::default()
    };
    let enabled = root.enabled_events();
    if !cfg.parallel || enabled.len() < 2 {
        let mut s = Search { cfg, visited: HashSet::new(), report: VerificationReport::default() };
        s.dfs(root, &mut Vec::new(), 0);
        s.report.distinct_states = s.visited.len() as u64;
        base.merge(s.report);
        return Ok(base);
    }
    let root_fp = root.fingerprint();
    let parts: Vec<VerificationReport> = enabled
        .par_iter()
        .enumerate()
        .map(|(i, &id)| {
            let mut s = Search { cfg, visited: HashSet::from([root_fp]), report: VerificationReport::default() };
            let mut child = root.clone();
            let mut path = vec![i];
            let before = child.violations().len();
            match child.execute(id) {
                Ok(()) if child.violations().len() == before => s.dfs(child, &mut path, 1),
                Ok(()) => {
                    for v in &child.violations()[before..] {
                        s.report.violation_count += 1;
                        s.report.keep_violation(Counterexample {
                            invariant: v.invariant.clone(),
                            event: v.event,
                            detail: v.detail.clone(),
                            schedule: path.clone(),
                        });
                    }
                    s.leaf(&child);
                }
                Err(e) => {
                    s.report.violation_count += 1;
                    s.report.keep_violation(Counterexample {
                        invariant: "runtime-error".into(),
                        event: child.executed(),
                        detail: e.to_string(),
                        schedule: path.clone(),
                    });
                }
            }
            s.report.distinct_states = s.visited.len() as u64 - 1;
            s.report
        })
        .collect();
    for p in parts {
        base.merge(p);
    }
    base.distinct_states += 1;
    Ok(base)
}

#[derive(Clone, Debug)]
pub struct Replay {
    pub violations: Vec<crate::runtime::Violation>,
    pub events: u64,
    pub complete: bool,
    pub trace: Vec<TraceRecord>,
}

/// Replays a decision list, stopping at the first violation as the
/// explorer does. Decisions must match the configuration exactly.
pub fn replay_counterexample(cfg: &ExploreConfig, decisions: &[usize]) -> Result<Replay> {
    cfg.validate()?;
    let mut w = cfg.world(true)?;
    let mut schedule = Schedule::scripted(decisions.to_vec());
    loop {
        if !w.violations().is_empty() {
            break;
        }
        if w.step(&mut schedule)?.is_none() {
            break;
        }
    }
    if schedule.cursor() < decisions.len() {
        return Err(SimError::ScheduleExhausted { cursor: schedule.cursor(), index: decisions[schedule.cursor()], enabled: 0 });
    }
    Ok(Replay {
        violations: w.violations().to_vec(),
        events: w.executed(),
        complete: w.is_complete(),
        trace: w.trace().records().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rank_is_trivially_clean() {
        let cfg = ExploreConfig::new("one", EngineId::LINEAR, vec![vec![allreduce(Vid::WORLD)]]);
        let r = explore(&cfg).unwrap();
        assert!(r.is_clean(), "{r:?}");
        assert!(r.completed_traces > 0);
    }

    fn cases(r: &VerificationReport) -> Vec<SnapshotCase> {
        r.snapshot_cases.iter().filter(|(_, &n)| n > 0).map(|(c, _)| *c).collect()
    }

    #[test]
    fn two_rank_allreduce_clean() {
        use SnapshotCase::*;
        for engine in EngineId::registered() {
            let (_, programs) = scenarios(2).remove(0);
            let r = explore(&ExploreConfig::new("two", engine, programs)).unwrap();
            assert!(r.is_clean(), "{r:?}");
            // every member enters the call in the same event, so (b) needs a
            // reporter outside the instance, which one shared comm lacks
            assert_eq!(cases(&r), vec![A, C, D], "{engine}");
        }
    }

    #[test]
    fn overlapping_subcomms_show_every_case() {
        for engine in EngineId::registered() {
            let (_, programs) = scenarios(3).pop().unwrap();
            let r = explore(&ExploreConfig::new("overlap", engine, programs)).unwrap();
            assert!(r.is_clean(), "{r:?}");
            assert_eq!(cases(&r), SnapshotCase::ALL.to_vec(), "{engine}");
        }
    }

    #[test]
    fn parallel_and_sequential_agree_on_verdict() {
        let (_, programs) = scenarios(2).remove(1);
        let mut cfg = ExploreConfig::new("dup", EngineId::BINOMIAL, programs);
        let par = explore(&cfg).unwrap();
        cfg.parallel = false;
        let seq = explore(&cfg).unwrap();
        assert!(par.is_clean() && seq.is_clean());
        assert_eq!(par.snapshot_cases.keys().collect::<Vec<_>>(), seq.snapshot_cases.keys().collect::<Vec<_>>());
        assert_eq!(explore(&cfg).unwrap(), seq, "deterministic");
    }
}
