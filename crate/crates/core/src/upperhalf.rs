//! Upper half: the application-facing layer that survives checkpoints.
//!
//! The application only ever holds virtual handles (`Vid`). Calls that
//! create communicators or groups are logged and replayed against a fresh
//! engine at restart, so the same vids rebind to new real ids.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{CollectiveSpec, LowerHalfState, RealCommId, SendHandle, Wire};
use crate::error::{ImageError, Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Vid(pub u64);

impl Vid {
    pub const WORLD: Vid = Vid(0);
}

impl fmt::Display for Vid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vid{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HandleKind {
    Communicator,
    Group,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VirtualHandle {
    pub vid: Vid,
    pub kind: HandleKind,
    /// Live binding; rebuilt at restart, never persisted.
    pub current_real: Option<RealCommId>,
}

/// A communicator reference held by upper-half state. Only `Virtual` may be
/// persisted; a `Real` here means lower-half state leaked upward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CommRef {
    Virtual(Vid),
    Real(RealCommId),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayCall {
    CommCreate { parent: Vid, members: Vec<u32> },
    CommDup { parent: Vid },
    GroupIncl { parent: Vid, members: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub call: ReplayCall,
    pub result: Vid,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ReplayLog {
    pub entries: Vec<ReplayEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WrapperPhase {
    #[default]
    None,
    Phase1,
    Phase2,
}

/// An application envelope pulled out of the network before a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DrainedMessage {
    /// World rank of the sender.
    pub src: u32,
    pub comm: CommRef,
    pub tag: u32,
    pub seq: u64,
    pub envelope: u64,
    pub payload: Vec<u8>,
}

// The envelope id is bookkeeping only and stays out of state hashes.
impl std::hash::Hash for DrainedMessage {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        (self.src, &self.comm, self.tag, self.seq, &self.payload).hash(state);
    }
}

/// Key for per-peer send/receive bookkeeping: (peer world rank, comm, tag).
pub type CounterKey = (u32, Vid, u32);

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Counters {
    pub sent: BTreeMap<CounterKey, u64>,
    pub received: BTreeMap<CounterKey, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct UpperHalfState {
    pub rank: u32,
    pub world_size: u32,
    /// Continuation point: index of the workload op to execute next.
    pub pc: u64,
    pub app_memory: Vec<u8>,
    pub handles: Vec<VirtualHandle>,
    pub next_vid: u64,
    pub replay_log: ReplayLog,
    pub drained: Vec<DrainedMessage>,
    pub counters: Counters,
    pub phase: WrapperPhase,
    pub pending_collective: Option<CollectiveSpec<CommRef>>,
}

impl UpperHalfState {
    pub fn new(rank: u32, world_size: u32, app_memory: Vec<u8>) -> Self {
        Self {
            rank,
            world_size,
            pc: 0,
            app_memory,
            handles: vec![VirtualHandle { vid: Vid::WORLD, kind: HandleKind::Communicator, current_real: None }],
            next_vid: 1,
            replay_log: ReplayLog::default(),
            drained: Vec::new(),
            counters: Counters::default(),
            phase: WrapperPhase::None,
            pending_collective: None,
        }
    }

    /// Binds the world handle to a freshly initialized engine.
    pub fn attach(&mut self, lh: &LowerHalfState) {
        for h in &mut self.handles {
            h.current_real = None;
        }
        self.handles[0].current_real = Some(lh.world());
    }

    pub fn vids(&self) -> Vec<Vid> {
        self.handles.iter().map(|h| h.vid).collect()
    }

    pub fn resolve(&self, vid: Vid) -> Result<RealCommId> {
        self.handles
            .iter()
            .find(|h| h.vid == vid)
            .and_then(|h| h.current_real)
            .ok_or(SimError::UnboundHandle(vid))
    }

    /// Reverse lookup used when lower-half data crosses into the upper half.
    pub fn vid_of(&self, real: RealCommId) -> Option<Vid> {
        self.handles.iter().find(|h| h.current_real == Some(real)).map(|h| h.vid)
    }

    pub fn to_comm_ref(&self, real: RealCommId) -> CommRef {
        self.vid_of(real).map_or(CommRef::Real(real), CommRef::Virtual)
    }

    fn bind_new(&mut self, kind: HandleKind, real: RealCommId) -> Vid {
        let vid = Vid(self.next_vid);
        self.next_vid += 1;
        self.handles.push(VirtualHandle { vid, kind, current_real: Some(real) });
        vid
    }

    fn execute(&mut self, lh: &mut LowerHalfState, call: &ReplayCall) -> Result<(HandleKind, RealCommId)> {
        Ok(match call {
            ReplayCall::CommCreate { parent, members } => {
                (HandleKind::Communicator, lh.comm_create(self.rank, self.resolve(*parent)?, members)?)
            }
            ReplayCall::CommDup { parent } => (HandleKind::Communicator, lh.comm_dup(self.rank, self.resolve(*parent)?)?),
            ReplayCall::GroupIncl { parent, members } => {
                (HandleKind::Group, lh.group_incl(self.rank, self.resolve(*parent)?, members)?)
            }
        })
    }

    fn record(&mut self, lh: &mut LowerHalfState, call: ReplayCall) -> Result<Vid> {
        let (kind, real) = self.execute(lh, &call)?;
        let vid = self.bind_new(kind, real);
        self.replay_log.entries.push(ReplayEntry { call, result: vid });
        Ok(vid)
    }

    pub fn v_comm_create(&mut self, lh: &mut LowerHalfState, parent: Vid, members: &[u32]) -> Result<Vid> {
        self.record(lh, ReplayCall::CommCreate { parent, members: members.to_vec() })
    }

    pub fn v_comm_dup(&mut self, lh: &mut LowerHalfState, parent: Vid) -> Result<Vid> {
        self.record(lh, ReplayCall::CommDup { parent })
    }

    pub fn v_group_incl(&mut self, lh: &mut LowerHalfState, parent: Vid, members: &[u32]) -> Result<Vid> {
        self.record(lh, ReplayCall::GroupIncl { parent, members: members.to_vec() })
    }

    /// Sends to comm-relative `dst` and counts it.
    pub fn v_send(
        &mut self,
        lh: &mut LowerHalfState,
        wire: &mut impl Wire,
        dst: u32,
        tag: u32,
        vid: Vid,
        payload: Vec<u8>,
    ) -> Result<SendHandle> {
        let comm = self.resolve(vid)?;
        let handle = lh.isend(wire, self.rank, dst, tag, comm, payload)?;
        let peer = lh.members(comm)?[dst as usize];
        *self.counters.sent.entry((peer, vid, tag)).or_insert(0) += 1;
        Ok(handle)
    }

    fn drained_match(&self, lh: &LowerHalfState, src: Option<u32>, tag: Option<u32>, vid: Vid) -> Result<Option<usize>> {
        let src_world = match src {
            Some(s) => {
                let comm = self.resolve(vid)?;
                Some(*lh.members(comm)?.get(s as usize).ok_or(SimError::InvalidRank { rank: s, comm })?)
            }
            None => None,
        };
        Ok(self.drained.iter().position(|m| {
            m.comm == CommRef::Virtual(vid)
                && tag.map_or(true, |t| t == m.tag)
                && src_world.map_or(true, |s| s == m.src)
        }))
    }

    /// True when `v_recv` with these arguments would return a message.
    pub fn can_recv(&self, lh: &LowerHalfState, src: Option<u32>, tag: Option<u32>, vid: Vid) -> Result<bool> {
        if self.drained_match(lh, src, tag, vid)?.is_some() {
            return Ok(true);
        }
        Ok(lh.has_match(self.rank, src, tag, self.resolve(vid)?))
    }

    /// Receives from comm-relative `src` (or any). Drained messages are
    /// consumed before the engine is consulted. `None` means blocked.
    /// Returns (sender world rank, tag, envelope id, payload).
    pub fn v_recv(
        &mut self,
        lh: &mut LowerHalfState,
        src: Option<u32>,
        tag: Option<u32>,
        vid: Vid,
    ) -> Result<Option<(u32, u32, u64, Vec<u8>)>> {
        let got = if let Some(i) = self.drained_match(lh, src, tag, vid)? {
            let m = self.drained.remove(i);
            Some((m.src, m.tag, m.envelope, m.payload))
        } else {
            let comm = self.resolve(vid)?;
            lh.try_recv(self.rank, src, tag, comm).map(|e| {
                let t = match e.tag {
                    crate::engine::Tag::App(t) => t,
                    crate::engine::Tag::Coll { .. } => unreachable!("try_recv matches application tags only"),
                };
                (e.src, t, e.id, e.payload)
            })
        };
        if let Some((from, t, _, _)) = &got {
            *self.counters.received.entry((*from, vid, *t)).or_insert(0) += 1;
        }
        Ok(got)
    }

    pub fn enter_phase1(&mut self, spec: CollectiveSpec<Vid>) -> Result<()> {
        if self.phase != WrapperPhase::None {
            return Err(SimError::InvariantViolation(format!("rank {} entered a wrapper from {:?}", self.rank, self.phase)));
        }
        self.phase = WrapperPhase::Phase1;
        self.pending_collective = Some(spec.with_comm(CommRef::Virtual(spec.comm)));
        Ok(())
    }

    pub fn enter_phase2(&mut self) -> Result<()> {
        if self.phase != WrapperPhase::Phase1 {
            return Err(SimError::InvariantViolation(format!("rank {} entered phase 2 from {:?}", self.rank, self.phase)));
        }
        self.phase = WrapperPhase::Phase2;
        Ok(())
    }

    pub fn exit_wrapper(&mut self) -> Result<()> {
        if self.phase != WrapperPhase::Phase2 {
            return Err(SimError::InvariantViolation(format!("rank {} left a wrapper from {:?}", self.rank, self.phase)));
        }
        self.phase = WrapperPhase::None;
        self.pending_collective = None;
        Ok(())
    }

    /// The wrapped collective, resolved to the engine's id.
    pub fn pending_spec(&self) -> Result<Option<CollectiveSpec>> {
        match &self.pending_collective {
            None => Ok(None),
            Some(spec) => match spec.comm {
                CommRef::Virtual(v) => Ok(Some(spec.with_comm(self.resolve(v)?))),
                CommRef::Real(r) => Err(SimError::InvariantViolation(format!("pending collective holds real id {r:?}"))),
            },
        }
    }

    /// Rebinds every handle against a fresh engine by replaying the log in
    /// order. A trivial barrier pending at checkpoint time is re-issued by
    /// the runtime when the rank next runs.
    pub fn rebuild_lower_half(&mut self, lh: &mut LowerHalfState) -> Result<(), ImageError> {
        if lh.world_size() != self.world_size {
            return Err(ImageError::Corrupt(format!(
                "image for world size {} restored into {}",
                self.world_size,
                lh.world_size()
            )));
        }
        self.attach(lh);
        let entries = self.replay_log.entries.clone();
        for entry in &entries {
            let (kind, real) = self
                .execute(lh, &entry.call)
                .map_err(|e| ImageError::Corrupt(format!("replay of {:?} failed: {e}", entry.call)))?;
            let h = self
                .handles
                .iter_mut()
                .find(|h| h.vid == entry.result)
                .ok_or_else(|| ImageError::Corrupt(format!("log result {} missing from handle table", entry.result)))?;
            if h.kind != kind {
                return Err(ImageError::Corrupt(format!("handle {} changed kind", entry.result)));
            }
            h.current_real = Some(real);
        }
        if let Some(h) = self.handles.iter().find(|h| h.current_real.is_none()) {
            return Err(ImageError::Corrupt(format!("handle {} not rebound by replay", h.vid)));
        }
        Ok(())
    }
}
