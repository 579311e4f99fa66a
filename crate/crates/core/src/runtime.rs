//! The simulated job: ranks, helpers, coordinator, engine and network
//! driven one event at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::coordinator::{ControlMessage, CoordOutcome, CoordinatorState, CtlKind, HelperState, ReportState};
use crate::drain::{bookmark_for, deficits, drain_messages, drain_ready, Bookmark};
use crate::engine::{engine_init, CollectiveSpec, EngineId, Envelope, LowerHalfState, RealCommId, RunProgress, Wire};
use crate::error::{ImageError, Result, SimError};
use crate::simnet::{Actor, Channel, EventId, EventKind, EventQueue, Schedule, Trace};
use crate::upperhalf::{UpperHalfState, WrapperPhase};
use crate::workload::{self, Op, Program};

/// Test-only protocol faults used to show the checker can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mutations {
    pub skip_extra_iteration: bool,
    pub no_phase_gate: bool,
    pub drop_drained: bool,
}

impl Mutations {
    pub const NONE: Mutations = Mutations { skip_extra_iteration: false, no_phase_gate: false, drop_drained: false };

    pub fn any(&self) -> bool {
        *self != Self::NONE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorldConfig {
    pub engine: EngineId,
    pub trace: bool,
    pub mutations: Mutations,
    /// Schedule a begin-checkpoint event at start that any schedule may fire.
    pub inject_checkpoint: bool,
    /// Keep a copy of every rank state captured at checkpoint time.
    pub capture_images: bool,
}

impl WorldConfig {
    pub fn new(engine: EngineId) -> Self {
        Self { engine, trace: true, mutations: Mutations::NONE, inject_checkpoint: false, capture_images: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    pub event: u64,
    pub detail: String,
}

/// A rank's upper half as captured during a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapturedImage {
    /// Ordinal of the checkpoint within the run, from 0.
    pub checkpoint: u32,
    /// Executed-event count when the image was taken.
    pub event: u64,
    pub state: UpperHalfState,
}

/// Position of one wrapper instance across its members when a helper reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotCase {
    A,
    B,
    C,
    D,
}

impl SnapshotCase {
    pub const ALL: [SnapshotCase; 4] = [SnapshotCase::A, SnapshotCase::B, SnapshotCase::C, SnapshotCase::D];
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct RankProc {
    uh: UpperHalfState,
    helper: HelperState,
    finished: bool,
    /// Bookmarks that arrived before this helper's own do-ckpt.
    early: BTreeMap<u32, Bookmark>,
}

/// Protocol bookkeeping that is part of the explored state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct Monitor {
    intends: BTreeSet<u32>,
    universal_intend: bool,
    do_ckpt_sent: bool,
    entered: BTreeMap<(u32, RealCommId), u64>,
    exited: BTreeMap<(u32, RealCommId), u64>,
    last_exit: BTreeMap<u32, (RealCommId, u64)>,
    /// Round → (comm, wrapper count every member must have entered).
    report_needs: BTreeMap<u32, Vec<(RealCommId, u64)>>,
    barrier_enters: BTreeMap<(RealCommId, u64), BTreeSet<u32>>,
}

impl Monitor {
    /// Forgets per-checkpoint protocol state; wrapper counts persist.
    fn reset_protocol(&mut self) {
        self.intends.clear();
        self.universal_intend = false;
        self.do_ckpt_sent = false;
        self.report_needs.clear();
    }
}

/// Observations that do not affect future behaviour.
#[derive(Clone, Debug, Default)]
pub struct Stats {
    pub labels: BTreeMap<SnapshotCase, u64>,
    pub violations: Vec<Violation>,
    faults_seen: usize,
    consumed: BTreeSet<u64>,
}

#[derive(Clone)]
struct Net {
    queue: EventQueue,
    data: BTreeMap<(u32, u32), Channel<Envelope>>,
    control: BTreeMap<(Actor, Actor), Channel<ControlMessage>>,
    trace: Trace,
    next_envelope: u64,
    cur: (EventId, Actor),
}

impl Wire for Net {
    fn next_envelope_id(&mut self) -> u64 {
        let id = self.next_envelope;
        self.next_envelope += 1;
        id
    }

    fn post(&mut self, env: Envelope) {
        let (src, dst) = (env.src, env.dst);
        let id = self
            .queue
            .schedule_event(Actor::Rank(dst), EventKind::DeliverData { src, dst })
            .expect("posting on a halted network");
        let (cur, actor) = self.cur;
        self.trace.push(cur, actor, "p2p-send", || envelope_json(&env));
        self.data.entry((src, dst)).or_default().push(id, env);
    }
}

fn envelope_json(e: &Envelope) -> serde_json::Value {
    json!({"src": e.src, "dst": e.dst, "comm": e.comm.0, "tag": e.tag, "seq": e.seq, "envelope": e.id, "bytes": e.payload.len()})
}

impl Net {
    fn send_ctl(&mut self, from: Actor, to: Actor, msg: ControlMessage) {
        let id = self
            .queue
            .schedule_event(to, EventKind::DeliverControl { from, to })
            .expect("posting on a halted network");
        let (cur, actor) = self.cur;
        self.trace.push(cur, actor, "ctl-send", || json!({"from": from.to_string(), "to": to.to_string(), "msg": &msg}));
        self.control.entry((from, to)).or_default().push(id, msg);
    }

    fn record(&mut self, actor: Actor, kind: &str, detail: impl FnOnce() -> serde_json::Value) {
        self.trace.push(self.cur.0, actor, kind, detail);
    }
}

#[derive(Clone)]
pub struct World {
    cfg: WorldConfig,
    programs: Arc<Vec<Program>>,
    n: u32,
    net: Net,
    lower: LowerHalfState,
    ranks: Vec<RankProc>,
    coord: CoordinatorState,
    step_events: Vec<Option<EventId>>,
    begin_event: Option<EventId>,
    monitor: Monitor,
    stats: Stats,
    executed: u64,
    images: Vec<CapturedImage>,
}

impl World {
    /// A fresh job: every rank at the start of its program.
    pub fn new(programs: Vec<Program>, memories: Vec<Vec<u8>>, cfg: WorldConfig) -> Result<World> {
        let n = programs.len() as u32;
        if n == 0 || memories.len() != programs.len() {
            return Err(SimError::InvalidConfig("one program and one memory image per rank required".into()));
        }
        let lower = engine_init(cfg.engine, n)?;
        let states = memories
            .into_iter()
            .enumerate()
            .map(|(r, m)| {
                let mut uh = UpperHalfState::new(r as u32, n, m);
                uh.attach(&lower);
                uh
            })
            .collect();
        let mut w = Self::assemble(Arc::new(programs), lower, states, cfg);
        if cfg.inject_checkpoint {
            w.begin_event = Some(w.net.queue.schedule_event(Actor::Coordinator, EventKind::BeginCheckpoint)?);
        }
        Ok(w)
    }

    /// Restarts from captured upper halves on a fresh engine.
    pub fn restore(programs: Vec<Program>, states: Vec<UpperHalfState>, cfg: WorldConfig) -> Result<World, ImageError> {
        let n = states.len() as u32;
        if n == 0 || programs.len() != states.len() {
            return Err(ImageError::Corrupt(format!("{} images for {} programs", states.len(), programs.len())));
        }
        let mut lower = engine_init(cfg.engine, n).map_err(|e| ImageError::Corrupt(e.to_string()))?;
        let mut states = states;
        for (r, s) in states.iter_mut().enumerate() {
            if s.rank != r as u32 {
                return Err(ImageError::MissingRank(r as u32));
            }
            if s.world_size != n {
                return Err(ImageError::Corrupt(format!("rank {r} was saved with world size {}", s.world_size)));
            }
            s.rebuild_lower_half(&mut lower)?;
        }
        Ok(Self::assemble(Arc::new(programs), lower, states, cfg))
    }

    fn assemble(programs: Arc<Vec<Program>>, lower: LowerHalfState, states: Vec<UpperHalfState>, cfg: WorldConfig) -> World {
        let n = states.len() as u32;
        // drained messages keep their ids; fresh ones must not collide
        let next_envelope = states.iter().flat_map(|s| &s.drained).map(|m| m.envelope + 1).max().unwrap_or(0);
        let mut net = Net {
            queue: EventQueue::new(),
            data: BTreeMap::new(),
            control: BTreeMap::new(),
            trace: Trace::new(cfg.trace),
            next_envelope,
            cur: (EventId(0), Actor::Coordinator),
        };
        let ranks: Vec<RankProc> = states
            .into_iter()
            .map(|uh| {
                let finished = is_finished(&uh, &programs[uh.rank as usize]);
                RankProc { uh, helper: HelperState::default(), finished, early: BTreeMap::new() }
            })
            .collect();
        let step_events = ranks
            .iter()
            .enumerate()
            .map(|(r, p)| {
                (!p.finished).then(|| net.queue.schedule_event(Actor::Rank(r as u32), EventKind::RankStep).expect("fresh queue"))
            })
            .collect();
        let coord = CoordinatorState::new(n).with_skip_extra_iteration(cfg.mutations.skip_extra_iteration);
        World {
            cfg,
            programs,
            n,
            net,
            lower,
            ranks,
            coord,
            step_events,
            begin_event: None,
            monitor: Monitor::default(),
            stats: Stats::default(),
            executed: 0,
            images: Vec::new(),
        }
    }

    pub fn world_size(&self) -> u32 {
        self.n
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn trace(&self) -> &Trace {
        &self.net.trace
    }

    pub fn violations(&self) -> &[Violation] {
        &self.stats.violations
    }

    pub fn labels(&self) -> &BTreeMap<SnapshotCase, u64> {
        &self.stats.labels
    }

    pub fn images(&self) -> &[CapturedImage] {
        &self.images
    }

    pub fn rank_state(&self, r: u32) -> &UpperHalfState {
        &self.ranks[r as usize].uh
    }

    pub fn lower(&self) -> &LowerHalfState {
        &self.lower
    }

    pub fn coordinator(&self) -> &CoordinatorState {
        &self.coord
    }

    pub fn all_finished(&self) -> bool {
        self.ranks.iter().all(|p| p.finished)
    }

    /// Every rank finished and no checkpoint activity outstanding.
    pub fn is_complete(&self) -> bool {
        self.all_finished()
            && !self.coord.is_busy()
            && self.begin_event.is_none()
            && self.net.control.values().all(|c| c.is_empty())
    }

    /// SHA-256 over the ranks' application memory in rank order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.ranks {
            h.update((p.uh.app_memory.len() as u64).to_le_bytes());
            h.update(&p.uh.app_memory);
        }
        hex::encode(h.finalize())
    }

    /// Hash of the behaviour-relevant state; ids and the trace are excluded.
    pub fn fingerprint(&self) -> u128 {
        let mut lo = DefaultHasher::new();
        let mut hi = DefaultHasher::new();
        0xA5u8.hash(&mut hi);
        for h in [&mut lo, &mut hi] {
            self.lower.hash(h);
            self.ranks.hash(h);
            self.coord.hash(h);
            self.monitor.hash(h);
            self.begin_event.is_some().hash(h);
            for (k, c) in &self.net.data {
                if !c.is_empty() {
                    k.hash(h);
                    c.iter().for_each(|e| e.hash(h));
                }
            }
            for (k, c) in &self.net.control {
                if !c.is_empty() {
                    k.hash(h);
                    c.iter().for_each(|m| m.hash(h));
                }
            }
        }
        ((hi.finish() as u128) << 64) | lo.finish() as u128
    }

    /// Events that may fire now, in ascending id order.
    pub fn enabled_events(&self) -> Vec<EventId> {
        if self.net.queue.is_halted() {
            return Vec::new();
        }
        self.net
            .queue
            .iter()
            .filter(|(id, p)| match p.kind {
                EventKind::RankStep => match p.actor {
                    Actor::Rank(r) => self.rank_runnable(r),
                    _ => false,
                },
                EventKind::DeliverData { src, dst } => self.net.data.get(&(src, dst)).and_then(|c| c.head_event()) == Some(*id),
                EventKind::DeliverControl { from, to } => {
                    self.net.control.get(&(from, to)).and_then(|c| c.head_event()) == Some(*id)
                }
                EventKind::BeginCheckpoint => !self.coord.is_busy(),
            })
            .map(|(id, _)| id)
            .collect()
    }

    /// Picks one enabled event with `schedule` and runs it. `None` when
    /// nothing is enabled.
    pub fn step(&mut self, schedule: &mut Schedule) -> Result<Option<EventId>> {
        let enabled = self.enabled_events();
        if enabled.is_empty() {
            return Ok(None);
        }
        let i = schedule.choose(enabled.len())?;
        self.execute(enabled[i])?;
        Ok(Some(enabled[i]))
    }

    /// Schedules a begin-checkpoint and runs it at once.
    pub fn trigger_checkpoint(&mut self) -> Result<EventId> {
        if self.coord.is_busy() {
            return Err(SimError::AlreadyInProgress);
        }
        let id = self.net.queue.schedule_event(Actor::Coordinator, EventKind::BeginCheckpoint)?;
        self.begin_event = Some(id);
        self.execute(id)?;
        Ok(id)
    }

    /// Stops the run; nothing is enabled afterwards.
    pub fn halt(&mut self) {
        self.net.queue.halt();
    }
}

fn is_finished(uh: &UpperHalfState, prog: &Program) -> bool {
    uh.phase == WrapperPhase::None && uh.pc as usize >= prog.len()
}

impl World {
    fn rank_runnable(&self, r: u32) -> bool {
        let p = &self.ranks[r as usize];
        if p.finished || p.helper.quiesced {
            return false;
        }
        match p.uh.phase {
            WrapperPhase::Phase1 => match self.lower.run(r) {
                None => true,
                Some(run) if run.ready_to_release() => self.gate_open(run.members()),
                Some(_) => self.lower.can_progress(r),
            },
            WrapperPhase::Phase2 => self.lower.can_progress(r),
            WrapperPhase::None => match &self.programs[r as usize][p.uh.pc as usize] {
                Op::Collective { .. } => self.cfg.mutations.no_phase_gate || !p.helper.hold_collectives,
                Op::Recv { src, tag, comm } => p.uh.can_recv(&self.lower, *src, *tag, *comm).unwrap_or(true),
                _ => true,
            },
        }
    }

    /// Phase-1 → phase-2 gate: no participant's helper is holding.
    fn gate_open(&self, members: &[u32]) -> bool {
        self.cfg.mutations.no_phase_gate || members.iter().all(|&m| !self.ranks[m as usize].helper.hold_collectives)
    }

    /// Runs one enabled event.
    pub fn execute(&mut self, id: EventId) -> Result<()> {
        let p = self.net.queue.take(id).ok_or_else(|| SimError::InvalidConfig(format!("event {id} is not pending")))?;
        self.executed += 1;
        self.net.cur = (id, p.actor);
        match p.kind {
            EventKind::RankStep => {
                let Actor::Rank(r) = p.actor else { unreachable!("rank steps belong to ranks") };
                self.step_events[r as usize] = None;
                self.rank_step(r)?;
                if !self.ranks[r as usize].finished {
                    self.step_events[r as usize] = Some(self.net.queue.schedule_event(p.actor, EventKind::RankStep)?);
                }
            }
            EventKind::DeliverData { src, dst } => {
                let (_, env) = self.net.data.get_mut(&(src, dst)).and_then(|c| c.pop()).expect("enabled delivery has a message");
                self.net.record(p.actor, "p2p-deliver", || envelope_json(&env));
                self.lower.deliver(env);
                self.try_complete(dst)?;
            }
            EventKind::DeliverControl { from, to } => {
                let (_, msg) = self.net.control.get_mut(&(from, to)).and_then(|c| c.pop()).expect("enabled delivery has a message");
                self.net.record(to, "ctl-deliver", || json!({"from": from.to_string(), "to": to.to_string(), "msg": &msg}));
                match to {
                    Actor::Coordinator => self.coordinator_receive(from, msg)?,
                    Actor::Helper(r) => self.helper_receive(r, from, msg)?,
                    Actor::Rank(_) => unreachable!("control traffic goes to helpers"),
                }
            }
            EventKind::BeginCheckpoint => {
                self.begin_event = None;
                let msg = self.coord.begin_checkpoint()?;
                self.net.record(Actor::Coordinator, "begin-checkpoint", || json!({"round": msg.round}));
                self.monitor.reset_protocol();
                self.broadcast(msg);
            }
        }
        self.collect_faults();
        Ok(())
    }

    fn violate(&mut self, invariant: &str, detail: String) {
        let actor = self.net.cur.1;
        let event = self.executed;
        self.net.record(actor, "violation", || json!({"invariant": invariant, "detail": &detail}));
        self.stats.violations.push(Violation { invariant: invariant.to_string(), event, detail });
    }

    fn collect_faults(&mut self) {
        let faults = self.lower.faults();
        if faults.len() > self.stats.faults_seen {
            let new: Vec<_> = faults[self.stats.faults_seen..].to_vec();
            self.stats.faults_seen = faults.len();
            for f in new {
                self.net.record(Actor::Rank(f.rank), "fault", || json!(&f));
                self.violate("engine-fault", format!("{}: {}", f.kind, f.detail));
            }
        }
    }

    fn broadcast(&mut self, msg: ControlMessage) {
        for r in 0..self.n {
            self.net.send_ctl(Actor::Coordinator, Actor::Helper(r), msg.clone());
        }
    }
}

impl World {
    fn rank_step(&mut self, r: u32) -> Result<()> {
        let ri = r as usize;
        match self.ranks[ri].uh.phase {
            WrapperPhase::Phase1 => match self.lower.run(r) {
                None => self.enter_barrier(r)?,
                Some(run) if run.ready_to_release() => self.release(r)?,
                Some(_) => {
                    self.lower.progress(&mut self.net, r)?;
                }
            },
            WrapperPhase::Phase2 => {
                if let RunProgress::Completed(result) = self.lower.progress(&mut self.net, r)? {
                    self.finish_wrapper(r, result)?;
                }
            }
            WrapperPhase::None => self.exec_op(r)?,
        }
        if is_finished(&self.ranks[ri].uh, &self.programs[ri]) && !self.ranks[ri].finished {
            self.ranks[ri].finished = true;
            let pc = self.ranks[ri].uh.pc;
            self.net.record(Actor::Rank(r), "finish", || json!({"pc": pc}));
        }
        Ok(())
    }

    fn exec_op(&mut self, r: u32) -> Result<()> {
        let actor = Actor::Rank(r);
        let op = self.programs[r as usize][self.ranks[r as usize].uh.pc as usize].clone();
        let p = &mut self.ranks[r as usize];
        let pc = p.uh.pc;
        match op {
            Op::Compute { salt } => {
                workload::compute(&mut p.uh.app_memory, salt);
                self.net.record(actor, "compute", || json!({"pc": pc, "salt": salt}));
            }
            Op::Send { dst, tag, comm, len } => {
                let payload = workload::send_payload(&p.uh.app_memory, len, pc);
                p.uh.v_send(&mut self.lower, &mut self.net, dst, tag, comm, payload)?;
            }
            Op::Recv { src, tag, comm } => {
                let Some((from, t, envelope, payload)) = p.uh.v_recv(&mut self.lower, src, tag, comm)? else {
                    return Ok(());
                };
                workload::absorb(&mut p.uh.app_memory, &payload, pc);
                self.net.record(actor, "p2p-recv", || json!({"src": from, "tag": t, "vid": comm, "envelope": envelope}));
                if !self.stats.consumed.insert(envelope) {
                    self.violate("no-duplicates", format!("rank {r} consumed envelope {envelope} twice"));
                }
            }
            Op::Collective { kind, comm, root, reduce, payload } => {
                p.uh.enter_phase1(CollectiveSpec { op: kind, comm, root, reduce, payload })?;
                return self.enter_barrier(r);
            }
            Op::CommCreate { parent, ref members } => {
                let vid = p.uh.v_comm_create(&mut self.lower, parent, members)?;
                self.net.record(actor, "comm-create", || json!({"call": "comm-create", "parent": parent, "members": members, "vid": vid}));
            }
            Op::CommDup { parent } => {
                let vid = p.uh.v_comm_dup(&mut self.lower, parent)?;
                self.net.record(actor, "comm-create", || json!({"call": "comm-dup", "parent": parent, "vid": vid}));
            }
            Op::GroupIncl { parent, ref members } => {
                let vid = p.uh.v_group_incl(&mut self.lower, parent, members)?;
                self.net.record(actor, "comm-create", || json!({"call": "group-incl", "parent": parent, "members": members, "vid": vid}));
            }
        }
        self.ranks[r as usize].uh.pc += 1;
        Ok(())
    }

    /// Phase 1: join the trivial barrier on the wrapped collective's comm.
    fn enter_barrier(&mut self, r: u32) -> Result<()> {
        let spec = self.ranks[r as usize].uh.pending_spec()?.expect("phase 1 has a pending collective");
        self.lower.trivial_barrier_enter(r, spec.comm, None)?;
        let instance = self.lower.run(r).map(|run| run.instance()).unwrap_or_default();
        let vid = self.ranks[r as usize].uh.vid_of(spec.comm);
        self.net.record(Actor::Rank(r), "enter-collective", || {
            json!({"op": "barrier", "trivial": true, "vid": vid, "comm": spec.comm.0, "instance": instance})
        });
        *self.monitor.entered.entry((r, spec.comm)).or_insert(0) += 1;
        self.monitor.barrier_enters.entry((spec.comm, instance)).or_default().insert(r);
        Ok(())
    }

    /// Root of a trivial barrier releases every participant into phase 2.
    fn release(&mut self, root: u32) -> Result<()> {
        let run = self.lower.run(root).expect("release needs a run");
        let (comm, instance) = (run.spec().comm, run.instance());
        let expected = run.members().to_vec();
        let entered = self.monitor.barrier_enters.remove(&(comm, instance)).unwrap_or_default();
        if expected.iter().any(|m| !entered.contains(m)) {
            self.violate("barrier-order", format!("barrier {instance} on {comm:?} exits before all members entered"));
        }
        let members = self.lower.release(root)?;
        for &m in &members {
            self.net.record(Actor::Rank(m), "exit-collective", || {
                json!({"op": "barrier", "trivial": true, "comm": comm.0, "instance": instance})
            });
        }
        for &m in &members {
            let p = &mut self.ranks[m as usize];
            p.uh.enter_phase2()?;
            let spec = p.uh.pending_spec()?.expect("phase 2 has a pending collective");
            let contribution = workload::contribution(&p.uh.app_memory, spec.op, spec.payload);
            let vid = p.uh.vid_of(spec.comm);
            self.lower.run_collective(m, spec.clone(), contribution)?;
            let inst = self.lower.run(m).map(|run| run.instance()).unwrap_or_default();
            self.net.record(Actor::Rank(m), "enter-collective", || {
                json!({"op": spec.op, "trivial": false, "vid": vid, "comm": spec.comm.0, "instance": inst})
            });
            if self.monitor.universal_intend && !self.monitor.do_ckpt_sent {
                self.violate("late-collective-entry", format!("rank {m} entered phase 2 after every intend was delivered"));
            }
        }
        Ok(())
    }

    fn finish_wrapper(&mut self, r: u32, result: Vec<u8>) -> Result<()> {
        let p = &mut self.ranks[r as usize];
        let spec = p.uh.pending_spec()?.expect("phase 2 has a pending collective");
        workload::absorb(&mut p.uh.app_memory, &result, p.uh.pc);
        p.uh.exit_wrapper()?;
        p.uh.pc += 1;
        let owed = p.helper.on_collective_exit();
        self.net.record(Actor::Rank(r), "exit-collective", || {
            json!({"op": spec.op, "trivial": false, "comm": spec.comm.0, "bytes": result.len()})
        });
        let count = self.monitor.exited.entry((r, spec.comm)).or_insert(0);
        *count += 1;
        let done = *count;
        self.monitor.last_exit.insert(r, (spec.comm, done));
        if let Some(report) = owed {
            self.send_report(r, report)?;
        }
        Ok(())
    }
}

impl World {
    /// Sends a helper's state report after checking report-time invariants.
    fn send_report(&mut self, r: u32, report: ControlMessage) -> Result<()> {
        let round = report.round;
        if let Some(needs) = self.monitor.report_needs.get(&round).cloned() {
            for (comm, need) in needs {
                let members = self.lower.members(comm)?;
                if members.contains(&r) && self.monitor.entered.get(&(r, comm)).copied().unwrap_or(0) < need {
                    self.violate("report-progress", format!("rank {r} reports in round {round} without entering wrapper {need} on {comm:?}"));
                }
            }
        }
        if report.report == Some(ReportState::ExitPhase2) {
            let (comm, count) = self.monitor.last_exit[&r];
            self.monitor.report_needs.entry(round + 1).or_default().push((comm, count));
        }
        self.label_snapshot()?;
        self.net.send_ctl(Actor::Helper(r), Actor::Coordinator, report);
        Ok(())
    }

    /// Classifies every wrapper instance that is under way.
    fn label_snapshot(&mut self) -> Result<()> {
        let comms: BTreeSet<RealCommId> = self.monitor.entered.keys().map(|(_, c)| *c).collect();
        let mut found = Vec::new();
        let mut unlabeled = Vec::new();
        for comm in comms {
            let members = self.lower.members(comm)?.to_vec();
            let count = |m: &BTreeMap<(u32, RealCommId), u64>, r: u32| m.get(&(r, comm)).copied().unwrap_or(0);
            let hi = members.iter().map(|&r| count(&self.monitor.entered, r)).max().unwrap_or(0);
            let lo = members.iter().map(|&r| count(&self.monitor.exited, r)).min().unwrap_or(0);
            if lo >= hi {
                found.push(SnapshotCase::D);
                continue;
            }
            for i in lo..hi {
                let statuses: Vec<Status> = members
                    .iter()
                    .map(|&r| {
                        if count(&self.monitor.exited, r) > i {
                            Status::Exited
                        } else if count(&self.monitor.entered, r) > i {
                            match self.ranks[r as usize].uh.phase {
                                WrapperPhase::Phase2 => Status::InCall,
                                _ => Status::InBarrier,
                            }
                        } else {
                            Status::NotEntered
                        }
                    })
                    .collect();
                match classify(&statuses) {
                    Some(c) => found.push(c),
                    None => unlabeled.push(format!("{comm:?} instance {i}: {statuses:?}")),
                }
            }
        }
        for c in found {
            *self.stats.labels.entry(c).or_insert(0) += 1;
        }
        for u in unlabeled {
            self.violate("snapshot-case", format!("snapshot fits no case: {u}"));
        }
        Ok(())
    }

    fn helper_receive(&mut self, r: u32, from: Actor, msg: ControlMessage) -> Result<()> {
        let ri = r as usize;
        match msg.kind {
            CtlKind::IntendToCheckpoint | CtlKind::ExtraIteration => {
                if msg.kind == CtlKind::IntendToCheckpoint {
                    self.monitor.intends.insert(r);
                    self.monitor.universal_intend = self.monitor.intends.len() == self.n as usize;
                }
                let phase = self.ranks[ri].uh.phase;
                if let Some(report) = self.ranks[ri].helper.on_request(phase, &msg)? {
                    self.send_report(r, report)?;
                }
            }
            CtlKind::DoCkpt => {
                let phase = self.ranks[ri].uh.phase;
                if phase == WrapperPhase::Phase2 {
                    self.violate("split-collective", format!("rank {r} received do-ckpt inside its collective call"));
                    return Ok(());
                }
                if let Err(e) = self.ranks[ri].helper.on_do_ckpt(phase, &msg) {
                    self.violate("protocol", format!("rank {r}: {e}"));
                    return Ok(());
                }
                let p = &mut self.ranks[ri];
                let early = std::mem::take(&mut p.early);
                let own = bookmark_for(&p.uh, r)?;
                let local = p.helper.local.as_mut().expect("set by do-ckpt");
                local.bookmarks.extend(early);
                local.bookmarks.insert(r, own);
                for peer in 0..self.n {
                    if peer != r {
                        let b = bookmark_for(&self.ranks[ri].uh, peer)?;
                        self.net.send_ctl(Actor::Helper(r), Actor::Helper(peer), ControlMessage::bookmark(b, msg.round));
                    }
                }
                self.try_complete(r)?;
            }
            CtlKind::Bookmark => {
                let Actor::Helper(src) = from else { unreachable!("bookmarks come from helpers") };
                let b = msg.bookmark.unwrap_or_default();
                let p = &mut self.ranks[ri];
                match p.helper.local.as_mut() {
                    Some(local) => {
                        local.bookmarks.insert(src, b);
                    }
                    None => {
                        p.early.insert(src, b);
                    }
                }
                self.try_complete(r)?;
            }
            CtlKind::Resume => {
                self.ranks[ri].helper.on_resume();
                self.net.record(Actor::Helper(r), "resume", || json!({"round": msg.round}));
            }
            CtlKind::StateReport | CtlKind::CkptDone => {
                self.violate("protocol", format!("helper {r} received {:?}", msg.kind));
            }
        }
        Ok(())
    }

    fn coordinator_receive(&mut self, from: Actor, msg: ControlMessage) -> Result<()> {
        let Actor::Helper(r) = from else { unreachable!("coordinator hears from helpers") };
        let outcome = match msg.kind {
            CtlKind::StateReport => self.coord.on_report(r, &msg)?,
            CtlKind::CkptDone => self.coord.on_done(r, &msg)?,
            other => {
                self.violate("protocol", format!("coordinator received {other:?}"));
                return Ok(());
            }
        };
        let CoordOutcome::Broadcast(out) = outcome else { return Ok(()) };
        match out.kind {
            CtlKind::DoCkpt => {
                if self.coord.last_reports.values().any(|s| *s == ReportState::ExitPhase2) {
                    self.violate("coordinator-commit", format!("do-ckpt sent in round {} after an exit-phase-2 report", out.round));
                }
                self.monitor.do_ckpt_sent = true;
            }
            CtlKind::Resume => self.monitor.reset_protocol(),
            _ => {}
        }
        self.broadcast(out);
        Ok(())
    }

    /// Drains and captures the rank once every bookmark is in and every
    /// owed message has reached its engine mailbox.
    fn try_complete(&mut self, r: u32) -> Result<()> {
        let ri = r as usize;
        let Some(local) = &self.ranks[ri].helper.local else { return Ok(()) };
        if local.written || local.bookmarks.len() < self.n as usize {
            return Ok(());
        }
        let owed = match deficits(&self.ranks[ri].uh, &local.bookmarks) {
            Ok(d) => d,
            Err(e) => {
                self.violate("conservation", e.to_string());
                return Ok(());
            }
        };
        if !drain_ready(&self.lower, r, &owed) {
            return Ok(());
        }
        let round = local.round;
        let ids = drain_messages(&mut self.ranks[ri].uh, &mut self.lower, &owed, self.cfg.mutations.drop_drained)?;
        self.net.record(Actor::Helper(r), "drain", || json!({"count": ids.len(), "envelopes": &ids}));
        self.check_image(r)?;
        let uh = &self.ranks[ri].uh;
        let (pc, phase, drained) = (uh.pc, uh.phase, uh.drained.len());
        let checkpoint = self.coord.completed;
        self.net.record(Actor::Helper(r), "image-write", || {
            json!({"checkpoint": checkpoint, "rank": r, "pc": pc, "phase": phase, "drained": drained})
        });
        if self.cfg.capture_images {
            self.images.push(CapturedImage { checkpoint, event: self.executed, state: self.ranks[ri].uh.clone() });
        }
        self.ranks[ri].helper.local.as_mut().expect("checked above").written = true;
        self.net.send_ctl(Actor::Helper(r), Actor::Coordinator, ControlMessage::new(CtlKind::CkptDone, round));
        Ok(())
    }

    /// Conservation, no-duplicate and post-drain quiescence at image time.
    fn check_image(&mut self, r: u32) -> Result<()> {
        let receiver = &self.ranks[r as usize].uh;
        let mut marks = BTreeMap::new();
        for s in &self.ranks {
            marks.insert(s.uh.rank, bookmark_for(&s.uh, r)?);
        }
        let mut problems = Vec::new();
        match deficits(receiver, &marks) {
            Ok(d) if d.is_empty() => {}
            Ok(d) => problems.push(("conservation", format!("rank {r} image misses messages: {d:?}"))),
            Err(e) => problems.push(("conservation", e.to_string())),
        }
        let mut seen = BTreeSet::new();
        for m in &receiver.drained {
            if !seen.insert(m.envelope) || self.stats.consumed.contains(&m.envelope) {
                problems.push(("no-duplicates", format!("rank {r} holds envelope {} twice", m.envelope)));
            }
        }
        let in_flight = self.net.data.iter().filter(|((_, d), _)| *d == r).flat_map(|(_, c)| c.iter()).chain(self.lower.mailbox(r).iter());
        if let Some(e) = in_flight.filter(|e| e.is_app() && e.dst == r).next() {
            problems.push(("post-drain-quiescence", format!("envelope {} to rank {r} still in the network", e.id)));
        }
        for (name, detail) in problems {
            self.violate(name, detail);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    NotEntered,
    InBarrier,
    InCall,
    Exited,
}

/// The four cases are made disjoint: (a) needs some member to have
/// exited, (b) needs none to have.
fn classify(s: &[Status]) -> Option<SnapshotCase> {
    use Status::*;
    let any = |x: Status| s.contains(&x);
    let all = |f: &dyn Fn(Status) -> bool| s.iter().all(|&x| f(x));
    if all(&|x| x == NotEntered) || all(&|x| x == Exited) {
        return Some(SnapshotCase::D);
    }
    if any(InCall) && any(Exited) && all(&|x| matches!(x, InCall | Exited)) {
        return Some(SnapshotCase::A);
    }
    if any(InCall) && !any(Exited) && all(&|x| matches!(x, InBarrier | InCall)) {
        return Some(SnapshotCase::B);
    }
    if any(InBarrier) && !any(InCall) && !any(Exited) {
        return Some(SnapshotCase::C);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{WorkloadName, WorkloadSpec};

    fn world(name: WorkloadName, n: u32, engine: EngineId, inject: bool) -> World {
        let spec = WorkloadSpec::new(name, n, 3);
        let mut cfg = WorldConfig::new(engine);
        cfg.inject_checkpoint = inject;
        World::new(spec.programs(), (0..n).map(|r| spec.initial_memory(r)).collect(), cfg).unwrap()
    }

    fn drive(w: &mut World, seed: u64) {
        let mut s = Schedule::seeded(seed);
        while w.step(&mut s).unwrap().is_some() {}
    }

    #[test]
    fn every_workload_completes_without_checkpoint() {
        for name in WorkloadName::ALL {
            for engine in EngineId::registered() {
                for n in 1..=4 {
                    let mut w = world(name, n, engine, false);
                    drive(&mut w, 7);
                    assert!(w.is_complete(), "{name} n={n} {engine}");
                    assert!(w.violations().is_empty(), "{:?}", w.violations());
                }
            }
        }
    }

    #[test]
    fn digest_is_engine_and_schedule_independent() {
        for name in [WorkloadName::RingPingpong, WorkloadName::IterAllreduce, WorkloadName::Stencil2d, WorkloadName::CommSplitMix] {
            let mut digests = BTreeSet::new();
            for engine in EngineId::registered() {
                for seed in 0..5 {
                    let mut w = world(name, 4, engine, false);
                    drive(&mut w, seed);
                    digests.insert(w.digest());
                }
            }
            assert_eq!(digests.len(), 1, "{name}");
        }
    }

    #[test]
    fn injected_checkpoint_completes_cleanly() {
        for name in WorkloadName::ALL {
            for seed in 0..20 {
                let mut w = world(name, 3, EngineId::BINOMIAL, true);
                drive(&mut w, seed);
                assert!(w.is_complete(), "{name} seed {seed}");
                assert!(w.violations().is_empty(), "{name} seed {seed}: {:?}", w.violations());
                assert_eq!(w.images().len(), 3);
                assert_eq!(w.coordinator().completed, 1);
            }
        }
    }

    #[test]
    fn classify_cases() {
        use Status::*;
        assert_eq!(classify(&[InCall, Exited]), Some(SnapshotCase::A));
        assert_eq!(classify(&[InCall, InCall]), Some(SnapshotCase::B));
        assert_eq!(classify(&[InBarrier, NotEntered]), Some(SnapshotCase::C));
        assert_eq!(classify(&[Exited, Exited]), Some(SnapshotCase::D));
        assert_eq!(classify(&[InCall, NotEntered]), None);
        assert_eq!(classify(&[InBarrier, Exited]), None);
    }
}
