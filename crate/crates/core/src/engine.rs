//! Lower half: a small MPI-like engine whose state is never checkpointed.
//!
//! Point-to-point traffic and every collective run over the same data
//! channels. Two engines exist and differ only in collective topology:
//! `linear` talks star-wise through the root, `binomial` uses a binomial tree.
//! Results are identical; message patterns are not.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RealCommId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineName {
    Linear,
    Binomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EngineId {
    pub name: EngineName,
    pub version: u32,
}

impl EngineId {
    pub const LINEAR: EngineId = EngineId { name: EngineName::Linear, version: 1 };
    pub const BINOMIAL: EngineId = EngineId { name: EngineName::Binomial, version: 1 };

    pub fn registered() -> [EngineId; 2] {
        [Self::LINEAR, Self::BINOMIAL]
    }

    pub fn other(self) -> EngineId {
        match self.name {
            EngineName::Linear => Self::BINOMIAL,
            EngineName::Binomial => Self::LINEAR,
        }
    }
}

impl fmt::Display for EngineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name {
            EngineName::Linear => write!(f, "linear"),
            EngineName::Binomial => write!(f, "binomial"),
        }
    }
}

impl std::str::FromStr for EngineId {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::LINEAR),
            "binomial" => Ok(Self::BINOMIAL),
            other => Err(SimError::InvalidConfig(format!("unknown engine `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollOp {
    Barrier,
    Bcast,
    Gather,
    Allreduce,
    Alltoall,
}

impl CollOp {
    pub fn code(self) -> u8 {
        match self {
            CollOp::Barrier => 0,
            CollOp::Bcast => 1,
            CollOp::Gather => 2,
            CollOp::Allreduce => 3,
            CollOp::Alltoall => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => CollOp::Barrier,
            1 => CollOp::Bcast,
            2 => CollOp::Gather,
            3 => CollOp::Allreduce,
            4 => CollOp::Alltoall,
            _ => return None,
        })
    }

    fn has_up(self) -> bool {
        !matches!(self, CollOp::Bcast)
    }

    fn has_down(self) -> bool {
        !matches!(self, CollOp::Gather)
    }

    fn rooted(self) -> bool {
        matches!(self, CollOp::Bcast | CollOp::Gather)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReduceFn {
    Sum,
    Max,
}

impl ReduceFn {
    fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            ReduceFn::Sum => a.wrapping_add(b),
            ReduceFn::Max => a.max(b),
        }
    }
}

/// A collective call. `C` is the communicator reference: a real id inside
/// the engine, a virtual handle in the upper half.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CollectiveSpec<C = RealCommId> {
    pub op: CollOp,
    pub comm: C,
    pub root: Option<u32>,
    pub reduce: Option<ReduceFn>,
    pub payload: u32,
}

impl<C> CollectiveSpec<C> {
    pub fn barrier(comm: C) -> Self {
        Self { op: CollOp::Barrier, comm, root: None, reduce: None, payload: 0 }
    }

    pub fn with_comm<D>(&self, comm: D) -> CollectiveSpec<D> {
        CollectiveSpec { op: self.op, comm, root: self.root, reduce: self.reduce, payload: self.payload }
    }

    fn root_index(&self) -> u32 {
        if self.op.rooted() {
            self.root.unwrap_or(0)
        } else {
            0
        }
    }

    fn header(&self) -> (u8, u32, u8, u32) {
        let reduce = match self.reduce {
            None => 0,
            Some(ReduceFn::Sum) => 1,
            Some(ReduceFn::Max) => 2,
        };
        (self.op.code(), self.root.unwrap_or(u32::MAX), reduce, self.payload)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    App(u32),
    /// Collective-internal traffic. `up` is toward the root.
    Coll { instance: u64, up: bool },
}

/// A point-to-point payload in flight. `id` is globally unique and excluded
/// from equality-by-content hashing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub id: u64,
    pub src: u32,
    pub dst: u32,
    pub comm: RealCommId,
    pub tag: Tag,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Hash for Envelope {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.src.hash(state);
        self.dst.hash(state);
        self.comm.hash(state);
        self.tag.hash(state);
        self.seq.hash(state);
        self.payload.hash(state);
    }
}

impl Envelope {
    pub fn is_app(&self) -> bool {
        matches!(self.tag, Tag::App(_))
    }
}

/// Where the engine hands outgoing envelopes.
pub trait Wire {
    fn next_envelope_id(&mut self) -> u64;
    fn post(&mut self, env: Envelope);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SendHandle {
    pub envelope: u64,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Stage {
    /// Waiting for the subtree contribution of `children[next]`.
    Up { next: usize },
    SendUp,
    /// Non-root waiting for its subtree's results.
    Down,
    SendDown { next: usize },
    /// Trivial barrier: arrival done, waiting for the root's release.
    AwaitRelease,
    Done,
}

/// Per-rank progress through one collective instance.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CollectiveRun {
    spec: CollectiveSpec,
    trivial: bool,
    instance: u64,
    members: Vec<u32>,
    me: u32,
    stage: Stage,
    contribution: Vec<u8>,
    acc: BTreeMap<u32, Vec<u8>>,
    down: BTreeMap<u32, Vec<u8>>,
    mismatch: bool,
}

impl CollectiveRun {
    pub fn spec(&self) -> &CollectiveSpec {
        &self.spec
    }

    pub fn instance(&self) -> u64 {
        self.instance
    }

    pub fn members(&self) -> &[u32] {
        &self.members
    }

    pub fn is_trivial(&self) -> bool {
        self.trivial
    }

    /// Root of a trivial barrier holding every arrival.
    pub fn ready_to_release(&self) -> bool {
        self.trivial && self.stage == Stage::AwaitRelease && self.relative() == 0
    }

    fn n(&self) -> u32 {
        self.members.len() as u32
    }

    fn relative(&self) -> u32 {
        let root = self.spec.root_index();
        (self.me + self.n() - root) % self.n()
    }

    fn absolute(&self, rel: u32) -> u32 {
        (rel + self.spec.root_index()) % self.n()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunProgress {
    Blocked,
    Advanced,
    /// Trivial barrier arrival complete; waiting for release.
    Arrived,
    Completed(Vec<u8>),
}

/// Fault detected inside the engine; surfaced in the trace rather than
/// aborting the simulation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct EngineFault {
    pub kind: &'static str,
    pub rank: u32,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum CreateKey {
    Create { parent: RealCommId, members: Vec<u32>, occurrence: u64 },
    Dup { parent: RealCommId, occurrence: u64 },
    Group { parent: RealCommId, members: Vec<u32>, occurrence: u64 },
}

/// Everything owned by the engine for the whole simulated job.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LowerHalfState {
    engine: EngineId,
    world_size: u32,
    world: RealCommId,
    comms: BTreeMap<RealCommId, Vec<u32>>,
    groups: BTreeMap<RealCommId, Vec<u32>>,
    created: BTreeMap<CreateKey, RealCommId>,
    occurrences: BTreeMap<(u32, CreateKey), u64>,
    serial: u64,
    seq: BTreeMap<(u32, u32, RealCommId, Tag), u64>,
    mailboxes: Vec<VecDeque<Envelope>>,
    instances: BTreeMap<(u32, RealCommId), u64>,
    runs: Vec<Option<CollectiveRun>>,
    faults: Vec<EngineFault>,
}

pub fn engine_init(engine: EngineId, world_size: u32) -> Result<LowerHalfState> {
    if world_size == 0 {
        return Err(SimError::InvalidConfig("world size must be at least 1".into()));
    }
    let mut lh = LowerHalfState {
        engine,
        world_size,
        world: RealCommId(0),
        comms: BTreeMap::new(),
        groups: BTreeMap::new(),
        created: BTreeMap::new(),
        occurrences: BTreeMap::new(),
        serial: 0,
        seq: BTreeMap::new(),
        mailboxes: vec![VecDeque::new(); world_size as usize],
        instances: BTreeMap::new(),
        runs: vec![None; world_size as usize],
        faults: Vec::new(),
    };
    let world = lh.fresh_id();
    lh.world = world;
    lh.comms.insert(world, (0..world_size).collect());
    Ok(lh)
}

impl LowerHalfState {
    pub fn engine(&self) -> EngineId {
        self.engine
    }

    pub fn world_size(&self) -> u32 {
        self.world_size
    }

    pub fn world(&self) -> RealCommId {
        self.world
    }

    fn fresh_id(&mut self) -> RealCommId {
        let k = self.serial;
        self.serial += 1;
        match self.engine.name {
            EngineName::Linear => RealCommId(0x100 + k),
            EngineName::Binomial => RealCommId(7000 + 13 * k),
        }
    }

    pub fn members(&self, comm: RealCommId) -> Result<&[u32]> {
        self.comms.get(&comm).map(|m| m.as_slice()).ok_or(SimError::UnknownComm(comm))
    }

    pub fn group_members(&self, group: RealCommId) -> Result<&[u32]> {
        self.groups.get(&group).map(|m| m.as_slice()).ok_or(SimError::UnknownComm(group))
    }

    pub fn is_comm(&self, id: RealCommId) -> bool {
        self.comms.contains_key(&id)
    }

    /// Index of world rank `rank` within `comm`.
    pub fn comm_rank(&self, comm: RealCommId, rank: u32) -> Result<u32> {
        self.members(comm)?
            .iter()
            .position(|&m| m == rank)
            .map(|i| i as u32)
            .ok_or(SimError::InvalidRank { rank, comm })
    }

    fn check_subset(&self, parent: RealCommId, members: &[u32]) -> Result<()> {
        let pm = self.members(parent)?;
        if members.is_empty() {
            return Err(SimError::InvalidGroup("empty member list".into()));
        }
        for (i, m) in members.iter().enumerate() {
            if !pm.contains(m) {
                return Err(SimError::InvalidGroup(format!("rank {m} is not a member of {parent:?}")));
            }
            if members[..i].contains(m) {
                return Err(SimError::InvalidGroup(format!("rank {m} listed twice")));
            }
        }
        Ok(())
    }

    fn intern(&mut self, caller: u32, key: CreateKey) -> (RealCommId, bool) {
        let occ = self.occurrences.entry((caller, key.clone())).or_insert(0);
        let occurrence = *occ;
        *occ += 1;
        let key = match key {
            CreateKey::Create { parent, members, .. } => CreateKey::Create { parent, members, occurrence },
            CreateKey::Dup { parent, .. } => CreateKey::Dup { parent, occurrence },
            CreateKey::Group { parent, members, .. } => CreateKey::Group { parent, members, occurrence },
        };
        if let Some(id) = self.created.get(&key) {
            return (*id, false);
        }
        let id = self.fresh_id();
        self.created.insert(key, id);
        (id, true)
    }

    /// Creates (or joins, for later callers) the communicator `members` of
    /// `parent`. Every member calls this; the first call allocates the id.
    pub fn comm_create(&mut self, caller: u32, parent: RealCommId, members: &[u32]) -> Result<RealCommId> {
        self.check_subset(parent, members)?;
        let key = CreateKey::Create { parent, members: members.to_vec(), occurrence: 0 };
        let (id, fresh) = self.intern(caller, key);
        if fresh {
            self.comms.insert(id, members.to_vec());
        }
        Ok(id)
    }

    pub fn comm_dup(&mut self, caller: u32, parent: RealCommId) -> Result<RealCommId> {
        let members = self.members(parent)?.to_vec();
        let (id, fresh) = self.intern(caller, CreateKey::Dup { parent, occurrence: 0 });
        if fresh {
            self.comms.insert(id, members);
        }
        Ok(id)
    }

    pub fn group_incl(&mut self, caller: u32, parent: RealCommId, members: &[u32]) -> Result<RealCommId> {
        self.check_subset(parent, members)?;
        let key = CreateKey::Group { parent, members: members.to_vec(), occurrence: 0 };
        let (id, fresh) = self.intern(caller, key);
        if fresh {
            self.groups.insert(id, members.to_vec());
        }
        Ok(id)
    }

    fn send_raw(&mut self, wire: &mut impl Wire, src: u32, dst: u32, comm: RealCommId, tag: Tag, payload: Vec<u8>) -> SendHandle {
        let counter = self.seq.entry((src, dst, comm, tag)).or_insert(0);
        let seq = *counter;
        *counter += 1;
        let id = wire.next_envelope_id();
        wire.post(Envelope { id, src, dst, comm, tag, seq, payload });
        SendHandle { envelope: id, seq }
    }

    /// Sends from world rank `src` to comm-relative rank `dst`.
    pub fn isend(
        &mut self,
        wire: &mut impl Wire,
        src: u32,
        dst: u32,
        tag: u32,
        comm: RealCommId,
        payload: Vec<u8>,
    ) -> Result<SendHandle> {
        let members = self.members(comm)?;
        let to = *members.get(dst as usize).ok_or(SimError::InvalidRank { rank: dst, comm })?;
        if !members.contains(&src) {
            return Err(SimError::InvalidRank { rank: src, comm });
        }
        Ok(self.send_raw(wire, src, to, comm, Tag::App(tag), payload))
    }

    /// Arrival of an envelope at its destination.
    pub fn deliver(&mut self, env: Envelope) {
        let dst = env.dst as usize;
        self.mailboxes[dst].push_back(env);
    }

    pub fn mailbox(&self, rank: u32) -> &VecDeque<Envelope> {
        &self.mailboxes[rank as usize]
    }

    fn find_app(&self, rank: u32, src: Option<u32>, tag: Option<u32>, comm: RealCommId) -> Option<usize> {
        let src_world = match src {
            Some(s) => Some(*self.comms.get(&comm)?.get(s as usize)?),
            None => None,
        };
        self.mailboxes[rank as usize].iter().position(|e| {
            e.comm == comm
                && matches!(e.tag, Tag::App(t) if tag.map_or(true, |want| want == t))
                && src_world.map_or(true, |s| s == e.src)
        })
    }

    pub fn has_match(&self, rank: u32, src: Option<u32>, tag: Option<u32>, comm: RealCommId) -> bool {
        self.find_app(rank, src, tag, comm).is_some()
    }

    /// Non-blocking receive of the earliest arrived matching application
    /// envelope; `src` is comm-relative. `None` means the caller blocks.
    pub fn try_recv(&mut self, rank: u32, src: Option<u32>, tag: Option<u32>, comm: RealCommId) -> Option<Envelope> {
        let i = self.find_app(rank, src, tag, comm)?;
        self.mailboxes[rank as usize].remove(i)
    }

    /// Removes and returns arrived application envelopes satisfying `pick`,
    /// in arrival order.
    pub fn take_app_where(&mut self, rank: u32, mut pick: impl FnMut(&Envelope) -> bool) -> Vec<Envelope> {
        let mb = &mut self.mailboxes[rank as usize];
        let mut taken = Vec::new();
        let mut kept = VecDeque::with_capacity(mb.len());
        for e in mb.drain(..) {
            if e.is_app() && pick(&e) {
                taken.push(e);
            } else {
                kept.push_back(e);
            }
        }
        *mb = kept;
        taken
    }

    fn take_coll(&mut self, rank: u32, src: u32, comm: RealCommId, instance: u64, up: bool) -> Option<Envelope> {
        let mb = &mut self.mailboxes[rank as usize];
        let i = mb.iter().position(|e| e.src == src && e.comm == comm && e.tag == Tag::Coll { instance, up })?;
        mb.remove(i)
    }

    fn has_coll(&self, rank: u32, src: u32, comm: RealCommId, instance: u64, up: bool) -> bool {
        self.mailboxes[rank as usize]
            .iter()
            .any(|e| e.src == src && e.comm == comm && e.tag == Tag::Coll { instance, up })
    }

    pub fn faults(&self) -> &[EngineFault] {
        &self.faults
    }

    pub fn run(&self, rank: u32) -> Option<&CollectiveRun> {
        self.runs[rank as usize].as_ref()
    }

    /// Parent and children of relative index `v` in an `n`-member tree.
    pub fn tree(&self, v: u32, n: u32) -> (Option<u32>, Vec<u32>) {
        match self.engine.name {
            EngineName::Linear => {
                if v == 0 {
                    (None, (1..n).collect())
                } else {
                    (Some(0), Vec::new())
                }
            }
            EngineName::Binomial => {
                let low = if v == 0 { u32::MAX } else { v & v.wrapping_neg() };
                let parent = if v == 0 { None } else { Some(v - low) };
                let mut children = Vec::new();
                let mut bit = 1u32;
                while bit < low && v.checked_add(bit).map_or(false, |c| c < n) {
                    children.push(v + bit);
                    bit <<= 1;
                }
                (parent, children)
            }
        }
    }

    fn start(&mut self, rank: u32, spec: CollectiveSpec, contribution: Vec<u8>, trivial: bool) -> Result<()> {
        let members = self.members(spec.comm)?.to_vec();
        let me = self.comm_rank(spec.comm, rank)?;
        let inst = self.instances.entry((rank, spec.comm)).or_insert(0);
        let instance = *inst;
        *inst += 1;
        let stage = if spec.op.has_up() || trivial { Stage::Up { next: 0 } } else { Stage::Down };
        let mut run = CollectiveRun {
            spec,
            trivial,
            instance,
            members,
            me,
            stage,
            contribution,
            acc: BTreeMap::new(),
            down: BTreeMap::new(),
            mismatch: false,
        };
        run.acc.insert(me, run.contribution.clone());
        if !run.spec.op.has_up() && !trivial && run.relative() == 0 {
            // bcast root: results are known immediately
            run.down = compute_results(&run.spec, &run.acc, run.n());
            run.stage = Stage::SendDown { next: 0 };
        }
        self.runs[rank as usize] = Some(run);
        Ok(())
    }

    /// Enters the trivial barrier preceding a wrapped collective. Arrival
    /// traffic flows toward the root; exit happens only through `release`.
    pub fn trivial_barrier_enter(&mut self, rank: u32, comm: RealCommId, root: Option<u32>) -> Result<()> {
        let spec = CollectiveSpec { op: CollOp::Barrier, comm, root, reduce: None, payload: 0 };
        self.start(rank, spec, Vec::new(), true)
    }

    /// Releases the trivial barrier whose root is `rank`: every participant
    /// exits in this single step. Returns the participants (world ranks).
    pub fn release(&mut self, rank: u32) -> Result<Vec<u32>> {
        let run = self.runs[rank as usize].as_ref().filter(|r| r.ready_to_release()).ok_or_else(|| {
            SimError::InvariantViolation(format!("rank {rank} cannot release a trivial barrier"))
        })?;
        let (comm, instance, members) = (run.spec.comm, run.instance, run.members.clone());
        for &m in &members {
            match &self.runs[m as usize] {
                Some(r) if r.trivial && r.spec.comm == comm && r.instance == instance && r.stage == Stage::AwaitRelease => {}
                _ => {
                    return Err(SimError::InvariantViolation(format!(
                        "rank {m} has not arrived at trivial barrier {instance} on {comm:?}"
                    )))
                }
            }
        }
        for &m in &members {
            self.runs[m as usize] = None;
        }
        Ok(members)
    }

    /// Abandons any in-progress trivial barrier; used when a rank restarts.
    pub fn discard_run(&mut self, rank: u32) {
        self.runs[rank as usize] = None;
    }

    /// Starts a real collective for `rank`; progress via `progress`.
    pub fn run_collective(&mut self, rank: u32, spec: CollectiveSpec, contribution: Vec<u8>) -> Result<()> {
        self.start(rank, spec, contribution, false)
    }

    /// True when `progress` would do something for this rank.
    pub fn can_progress(&self, rank: u32) -> bool {
        let Some(run) = &self.runs[rank as usize] else { return false };
        let n = run.n();
        let (parent, children) = self.tree(run.relative(), n);
        match run.stage {
            Stage::Up { next } => match children.get(next) {
                Some(&c) => {
                    let src = run.members[run.absolute(c) as usize];
                    self.has_coll(rank, src, run.spec.comm, run.instance, true)
                }
                None => true,
            },
            Stage::SendUp | Stage::SendDown { .. } | Stage::Done => true,
            Stage::Down => {
                let p = parent.expect("non-root waits for parent");
                let src = run.members[run.absolute(p) as usize];
                self.has_coll(rank, src, run.spec.comm, run.instance, false)
            }
            Stage::AwaitRelease => false,
        }
    }

    /// Performs one unit of collective work for `rank`: one receive or one send.
    pub fn progress(&mut self, wire: &mut impl Wire, rank: u32) -> Result<RunProgress> {
        let Some(mut run) = self.runs[rank as usize].take() else {
            return Ok(RunProgress::Blocked);
        };
        let out = self.progress_run(wire, rank, &mut run);
        let done = matches!(out, Ok(RunProgress::Completed(_)));
        if !done {
            self.runs[rank as usize] = Some(run);
        }
        out
    }

    fn progress_run(&mut self, wire: &mut impl Wire, rank: u32, run: &mut CollectiveRun) -> Result<RunProgress> {
        let n = run.n();
        let rel = run.relative();
        let (parent, children) = self.tree(rel, n);
        let comm = run.spec.comm;
        match run.stage.clone() {
            Stage::Up { next } => {
                if let Some(&c) = children.get(next) {
                    let src = run.members[run.absolute(c) as usize];
                    let Some(env) = self.take_coll(rank, src, comm, run.instance, true) else {
                        return Ok(RunProgress::Blocked);
                    };
                    let (header, entries) = decode_entries(&env.payload);
                    if header != run.spec.header() && !run.mismatch {
                        run.mismatch = true;
                        self.faults.push(EngineFault {
                            kind: "collective-mismatch",
                            rank,
                            detail: format!("instance {} on {:?}: {:?} vs {:?}", run.instance, comm, header, run.spec.header()),
                        });
                    }
                    run.acc.extend(entries);
                    run.stage = Stage::Up { next: next + 1 };
                    return Ok(RunProgress::Advanced);
                }
                if parent.is_some() {
                    run.stage = Stage::SendUp;
                    return self.progress_run(wire, rank, run);
                }
                // root holds every contribution
                if run.trivial {
                    run.stage = Stage::AwaitRelease;
                    return Ok(RunProgress::Arrived);
                }
                run.down = compute_results(&run.spec, &run.acc, n);
                if run.spec.op.has_down() {
                    run.stage = Stage::SendDown { next: 0 };
                    Ok(RunProgress::Advanced)
                } else {
                    Ok(RunProgress::Completed(run.down.remove(&run.me).unwrap_or_default()))
                }
            }
            Stage::SendUp => {
                let p = parent.expect("SendUp only for non-root");
                let dst = run.members[run.absolute(p) as usize];
                let payload = encode_entries(run.spec.header(), &run.acc);
                self.send_raw(wire, rank, dst, comm, Tag::Coll { instance: run.instance, up: true }, payload);
                if run.trivial {
                    run.stage = Stage::AwaitRelease;
                    return Ok(RunProgress::Arrived);
                }
                if run.spec.op.has_down() {
                    run.stage = Stage::Down;
                    Ok(RunProgress::Advanced)
                } else {
                    run.stage = Stage::Done;
                    Ok(RunProgress::Completed(Vec::new()))
                }
            }
            Stage::Down => {
                let p = parent.expect("Down only for non-root");
                let src = run.members[run.absolute(p) as usize];
                let Some(env) = self.take_coll(rank, src, comm, run.instance, false) else {
                    return Ok(RunProgress::Blocked);
                };
                let (_, entries) = decode_entries(&env.payload);
                run.down = entries;
                run.stage = Stage::SendDown { next: 0 };
                Ok(RunProgress::Advanced)
            }
            Stage::SendDown { next } => {
                let Some(&c) = children.get(next) else {
                    run.stage = Stage::Done;
                    return Ok(RunProgress::Completed(run.down.remove(&run.me).unwrap_or_default()));
                };
                // forward the results for the child's whole subtree
                let subtree = self.subtree(c, n);
                let part: BTreeMap<u32, Vec<u8>> = subtree
                    .iter()
                    .map(|&v| {
                        let idx = run.absolute(v);
                        (idx, run.down.get(&idx).cloned().unwrap_or_default())
                    })
                    .collect();
                let dst = run.members[run.absolute(c) as usize];
                self.send_raw(wire, rank, dst, comm, Tag::Coll { instance: run.instance, up: false }, encode_entries(run.spec.header(), &part));
                run.stage = Stage::SendDown { next: next + 1 };
                Ok(RunProgress::Advanced)
            }
            Stage::AwaitRelease => Ok(RunProgress::Blocked),
            Stage::Done => Ok(RunProgress::Completed(run.down.remove(&run.me).unwrap_or_default())),
        }
    }

    fn subtree(&self, v: u32, n: u32) -> Vec<u32> {
        let mut out = vec![v];
        let mut i = 0;
        while i < out.len() {
            let (_, ch) = self.tree(out[i], n);
            out.extend(ch);
            i += 1;
        }
        out
    }
}

/// Sequential reference semantics shared by both engines: comm index →
/// contribution in, comm index → result out.
pub fn compute_results(spec: &CollectiveSpec, contributions: &BTreeMap<u32, Vec<u8>>, n: u32) -> BTreeMap<u32, Vec<u8>> {
    let root = spec.root_index();
    let get = |i: u32| contributions.get(&i).cloned().unwrap_or_default();
    match spec.op {
        CollOp::Barrier => (0..n).map(|i| (i, Vec::new())).collect(),
        CollOp::Bcast => (0..n).map(|i| (i, get(root))).collect(),
        CollOp::Gather => {
            let all: Vec<u8> = (0..n).flat_map(get).collect();
            (0..n).map(|i| (i, if i == root { all.clone() } else { Vec::new() })).collect()
        }
        CollOp::Allreduce => {
            let f = spec.reduce.unwrap_or(ReduceFn::Sum);
            let words = spec.payload as usize / 4;
            let mut acc: Option<Vec<u32>> = None;
            for i in 0..n {
                let v = le_words(&get(i), words);
                acc = Some(match acc {
                    None => v,
                    Some(a) => a.iter().zip(&v).map(|(x, y)| f.apply(*x, *y)).collect(),
                });
            }
            let bytes: Vec<u8> = acc.unwrap_or_default().iter().flat_map(|w| w.to_le_bytes()).collect();
            (0..n).map(|i| (i, bytes.clone())).collect()
        }
        CollOp::Alltoall => {
            let block = spec.payload as usize / n.max(1) as usize;
            (0..n)
                .map(|i| {
                    let mut out = Vec::with_capacity(block * n as usize);
                    for j in 0..n {
                        let c = get(j);
                        let lo = (i as usize * block).min(c.len());
                        let hi = (lo + block).min(c.len());
                        out.extend_from_slice(&c[lo..hi]);
                    }
                    (i, out)
                })
                .collect()
        }
    }
}

pub fn le_words(bytes: &[u8], words: usize) -> Vec<u32> {
    (0..words)
        .map(|w| {
            let mut b = [0u8; 4];
            for (k, slot) in b.iter_mut().enumerate() {
                *slot = bytes.get(w * 4 + k).copied().unwrap_or(0);
            }
            u32::from_le_bytes(b)
        })
        .collect()
}

fn encode_entries(header: (u8, u32, u8, u32), entries: &BTreeMap<u32, Vec<u8>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(header.0);
    out.extend(header.1.to_le_bytes());
    out.push(header.2);
    out.extend(header.3.to_le_bytes());
    out.extend((entries.len() as u32).to_le_bytes());
    for (k, v) in entries {
        out.extend(k.to_le_bytes());
        out.extend((v.len() as u32).to_le_bytes());
        out.extend(v);
    }
    out
}

fn decode_entries(b: &[u8]) -> ((u8, u32, u8, u32), BTreeMap<u32, Vec<u8>>) {
    let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
    let header = (b[0], u32_at(1), b[5], u32_at(6));
    let count = u32_at(10) as usize;
    let mut off = 14;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let k = u32_at(off);
        let len = u32_at(off + 4) as usize;
        entries.insert(k, b[off + 8..off + 8 + len].to_vec());
        off += 8 + len;
    }
    (header, entries)
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    fn words(v: &[u32]) -> Vec<u8> {
        v.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    #[test]
    fn init_world() {
        let lh = engine_init(EngineId::LINEAR, 4).unwrap();
        assert_eq!(lh.members(lh.world()).unwrap(), &[0, 1, 2, 3]);
        let single = engine_init(EngineId::BINOMIAL, 1).unwrap();
        assert_eq!(single.members(single.world()).unwrap(), &[0]);
        assert!(matches!(engine_init(EngineId::LINEAR, 0), Err(SimError::InvalidConfig(_))));
    }

    #[test]
    fn engines_agree_on_membership_not_ids() {
        let a = engine_init(EngineId::LINEAR, 4).unwrap();
        let b = engine_init(EngineId::BINOMIAL, 4).unwrap();
        assert_eq!(a.members(a.world()).unwrap(), b.members(b.world()).unwrap());
        assert_ne!(a.world(), b.world());
    }

    #[test]
    fn isend_sequence_numbers() {
        let mut lh = engine_init(EngineId::LINEAR, 2).unwrap();
        let mut w = LoopWire::default();
        let world = lh.world();
        let h0 = lh.isend(&mut w, 0, 1, 7, world, vec![0; 8]).unwrap();
        let h1 = lh.isend(&mut w, 0, 1, 7, world, vec![1; 8]).unwrap();
        assert_eq!((h0.seq, h1.seq), (0, 1));
        assert_eq!(w.sent[0].dst, 1);
        assert!(matches!(lh.isend(&mut w, 0, 5, 7, world, vec![]), Err(SimError::InvalidRank { .. })));
    }

    #[test]
    fn recv_matching_and_wildcards() {
        let mut lh = engine_init(EngineId::LINEAR, 3).unwrap();
        let mut w = LoopWire::default();
        let world = lh.world();
        assert!(lh.try_recv(0, None, None, world).is_none());
        lh.isend(&mut w, 2, 0, 5, world, vec![2]).unwrap();
        lh.isend(&mut w, 1, 0, 5, world, vec![1]).unwrap();
        w.flush(&mut lh);
        assert_eq!(lh.try_recv(0, Some(1), Some(5), world).unwrap().payload, vec![1]);
        assert!(lh.try_recv(0, None, Some(9), world).is_none());
        assert_eq!(lh.try_recv(0, None, None, world).unwrap().payload, vec![2]);
    }

    #[test]
    fn comm_create_checks() {
        let mut lh = engine_init(EngineId::LINEAR, 4).unwrap();
        let world = lh.world();
        let c = lh.comm_create(0, world, &[0, 1]).unwrap();
        assert_eq!(lh.members(c).unwrap().len(), 2);
        assert_eq!(lh.comm_create(1, world, &[0, 1]).unwrap(), c, "second member joins the same comm");
        assert!(matches!(lh.comm_create(0, world, &[5]), Err(SimError::InvalidGroup(_))));
        assert!(matches!(lh.comm_create(0, world, &[]), Err(SimError::InvalidGroup(_))));
        assert!(matches!(lh.comm_create(2, c, &[2]), Err(SimError::InvalidGroup(_))));
    }

    #[test]
    fn binomial_tree_shape() {
        let lh = engine_init(EngineId::BINOMIAL, 8).unwrap();
        assert_eq!(lh.tree(0, 8), (None, vec![1, 2, 4]));
        assert_eq!(lh.tree(4, 8), (Some(0), vec![5, 6]));
        assert_eq!(lh.tree(6, 8), (Some(4), vec![7]));
        assert_eq!(lh.tree(0, 4), (None, vec![1, 2]));
        assert_eq!(lh.tree(2, 4), (Some(0), vec![3]));
    }

    #[test]
    fn allreduce_sum_both_engines() {
        for e in EngineId::registered() {
            let mut lh = engine_init(e, 4).unwrap();
            let spec = CollectiveSpec { op: CollOp::Allreduce, comm: lh.world(), root: None, reduce: Some(ReduceFn::Sum), payload: 4 };
            let contrib = (0..4).map(|r| (r, words(&[r + 1]))).collect();
            let (res, _) = run_all(&mut lh, &spec, &contrib);
            for r in 0..4 {
                assert_eq!(res[&r], words(&[10]), "engine {e}");
            }
        }
    }

    #[test]
    fn gather_patterns_differ_results_agree() {
        let mut patterns = Vec::new();
        for e in EngineId::registered() {
            let mut lh = engine_init(e, 4).unwrap();
            let spec = CollectiveSpec { op: CollOp::Gather, comm: lh.world(), root: Some(0), reduce: None, payload: 1 };
            let contrib = (0..4).map(|r| (r, vec![r as u8])).collect();
            let (res, msgs) = run_all(&mut lh, &spec, &contrib);
            assert_eq!(res[&0], vec![0, 1, 2, 3]);
            assert_eq!(msgs.len(), 3);
            patterns.push(msgs);
        }
        let mut lin = patterns[0].clone();
        lin.sort();
        assert_eq!(lin, vec![(1, 0), (2, 0), (3, 0)]);
        let mut bin = patterns[1].clone();
        bin.sort();
        assert_eq!(bin, vec![(1, 0), (2, 0), (3, 2)]);
    }

    #[test]
    fn single_rank_collectives_are_local() {
        let mut lh = engine_init(EngineId::BINOMIAL, 1).unwrap();
        for op in [CollOp::Barrier, CollOp::Bcast, CollOp::Gather, CollOp::Allreduce, CollOp::Alltoall] {
            let spec = CollectiveSpec { op, comm: lh.world(), root: Some(0), reduce: Some(ReduceFn::Max), payload: 4 };
            let contrib = [(0, words(&[9]))].into_iter().collect();
            let (res, msgs) = run_all(&mut lh, &spec, &contrib);
            assert!(msgs.is_empty());
            if op != CollOp::Barrier {
                assert_eq!(res[&0], words(&[9]), "{op:?}");
            }
        }
    }

    #[test]
    fn mismatch_is_recorded_not_fatal() {
        let mut lh = engine_init(EngineId::LINEAR, 2).unwrap();
        let world = lh.world();
        let mut w = LoopWire::default();
        let a = CollectiveSpec { op: CollOp::Allreduce, comm: world, root: None, reduce: Some(ReduceFn::Sum), payload: 4 };
        let b = CollectiveSpec { reduce: Some(ReduceFn::Max), ..a.clone() };
        lh.run_collective(0, a, words(&[1])).unwrap();
        lh.run_collective(1, b, words(&[2])).unwrap();
        for _ in 0..6 {
            for r in 0..2 {
                let _ = lh.progress(&mut w, r).unwrap();
                w.flush(&mut lh);
            }
        }
        assert_eq!(lh.faults().len(), 1);
        assert_eq!(lh.faults()[0].kind, "collective-mismatch");
    }

    #[test]
    fn trivial_barrier_releases_all_at_once() {
        for e in EngineId::registered() {
            let mut lh = engine_init(e, 3).unwrap();
            let world = lh.world();
            let mut w = LoopWire::default();
            for r in 0..3 {
                lh.trivial_barrier_enter(r, world, None).unwrap();
            }
            assert!(lh.release(0).is_err());
            for _ in 0..4 {
                for r in 0..3 {
                    let _ = lh.progress(&mut w, r).unwrap();
                    w.flush(&mut lh);
                }
            }
            assert!(lh.run(0).unwrap().ready_to_release());
            assert_eq!(lh.release(0).unwrap(), vec![0, 1, 2]);
            assert!((0..3).all(|r| lh.run(r).is_none()));
        }
    }
}
