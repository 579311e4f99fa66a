//! Checkpoint images: a canonical little-endian encoding of one rank's
//! upper half, plus image sets (one file per rank and a JSON manifest).
//!
//! Layout after the 9-byte header `MANA-SIM\x01`, in order:
//! rank u32, world size u32, pc u64, app memory (bytes), handle table,
//! next vid u64, replay log, drained buffer, sent counters, received
//! counters, wrapper phase u8, pending collective. Sequences carry a u32
//! count; byte strings a u32 length. Nothing engine-specific is stored.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{CollOp, CollectiveSpec, ReduceFn};
use crate::error::ImageError;
use crate::upperhalf::{
    CommRef, CounterKey, DrainedMessage, HandleKind, ReplayCall, ReplayEntry, UpperHalfState, VirtualHandle, Vid,
    WrapperPhase,
};
use crate::workload::WorkloadSpec;

pub const MAGIC: &[u8; 8] = b"MANA-SIM";
pub const VERSION: u8 = 1;

type R<T> = Result<T, ImageError>;

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("sequence fits in u32"));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }
    fn ranks(&mut self, v: &[u32]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.u32(x));
    }
    fn comm(&mut self, c: &CommRef) -> R<()> {
        match c {
            CommRef::Virtual(v) => {
                self.u64(v.0);
                Ok(())
            }
            CommRef::Real(id) => Err(ImageError::RealIdInState(*id)),
        }
    }
    fn counters(&mut self, m: &std::collections::BTreeMap<CounterKey, u64>) {
        self.len(m.len());
        for (&(peer, vid, tag), &n) in m {
            self.u32(peer);
            self.u64(vid.0);
            self.u32(tag);
            self.u64(n);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> R<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ImageError::Corrupt(format!("truncated: need {n} bytes at offset {} of {}", self.at, self.buf.len()))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> R<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> R<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> R<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// A count, sanity-checked against the bytes left so a corrupt length
    /// cannot trigger a huge allocation.
    fn len(&mut self, min_item: usize) -> R<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.buf.len() - self.at {
            return Err(ImageError::Corrupt(format!("count {n} exceeds remaining bytes")));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> R<Vec<u8>> {
        let n = self.len(1)?;
        Ok(self.take(n)?.to_vec())
    }
    fn ranks(&mut self) -> R<Vec<u32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn counters(&mut self) -> R<std::collections::BTreeMap<CounterKey, u64>> {
        let n = self.len(24)?;
        let mut m = std::collections::BTreeMap::new();
        for _ in 0..n {
            let key = (self.u32()?, Vid(self.u64()?), self.u32()?);
            if m.insert(key, self.u64()?).is_some() {
                return Err(ImageError::Corrupt(format!("duplicate counter {key:?}")));
            }
        }
        Ok(m)
    }
}

fn corrupt<T>(what: &str, v: impl std::fmt::Display) -> R<T> {
    Err(ImageError::Corrupt(format!("bad {what} {v}")))
}

/// Encodes a rank's upper half. Fails if any real communicator id leaked
/// into the state.
pub fn encode_image(uh: &UpperHalfState) -> R<Vec<u8>> {
    let mut e = Enc(Vec::with_capacity(64 + uh.app_memory.len()));
    e.0.extend_from_slice(MAGIC);
    e.u8(VERSION);
    e.u32(uh.rank);
    e.u32(uh.world_size);
    e.u64(uh.pc);
    e.bytes(&uh.app_memory);
    e.len(uh.handles.len());
    for h in &uh.handles {
        e.u64(h.vid.0);
        e.u8(match h.kind {
            HandleKind::Communicator => 0,
            HandleKind::Group => 1,
        });
    }
    e.u64(uh.next_vid);
    e.len(uh.replay_log.entries.len());
    for entry in &uh.replay_log.entries {
        match &entry.call {
            ReplayCall::CommCreate { parent, members } => {
                e.u8(0);
                e.u64(parent.0);
                e.ranks(members);
            }
            ReplayCall::CommDup { parent } => {
                e.u8(1);
                e.u64(parent.0);
            }
            ReplayCall::GroupIncl { parent, members } => {
                e.u8(2);
                e.u64(parent.0);
                e.ranks(members);
            }
        }
        e.u64(entry.result.0);
    }
    e.len(uh.drained.len());
    for m in &uh.drained {
        e.u32(m.src);
        e.comm(&m.comm)?;
        e.u32(m.tag);
        e.u64(m.seq);
        e.u64(m.envelope);
        e.bytes(&m.payload);
    }
    e.counters(&uh.counters.sent);
    e.counters(&uh.counters.received);
    e.u8(match uh.phase {
        WrapperPhase::None => 0,
        WrapperPhase::Phase1 => 1,
        WrapperPhase::Phase2 => 2,
    });
    match &uh.pending_collective {
        None => e.u8(0),
        Some(spec) => {
            e.u8(1);
            e.u8(spec.op.code());
            e.comm(&spec.comm)?;
            match spec.root {
                None => e.u8(0),
                Some(r) => {
                    e.u8(1);
                    e.u32(r);
                }
            }
            e.u8(match spec.reduce {
                None => 0,
                Some(ReduceFn::Sum) => 1,
                Some(ReduceFn::Max) => 2,
            });
            e.u32(spec.payload);
        }
    }
    Ok(e.0)
}

/// Decodes an image. Handles come back unbound; restart rebinds them.
pub fn decode_image(bytes: &[u8]) -> R<UpperHalfState> {
    if bytes.len() < MAGIC.len() + 1 {
        return Err(ImageError::Corrupt("shorter than the header".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(ImageError::Corrupt("bad magic".into()));
    }
    if bytes[MAGIC.len()] != VERSION {
        return Err(ImageError::UnsupportedVersion(bytes[MAGIC.len()]));
    }
    let mut d = Dec { buf: bytes, at: MAGIC.len() + 1 };
    let rank = d.u32()?;
    let world_size = d.u32()?;
    let pc = d.u64()?;
    let app_memory = d.bytes()?;
    let mut uh = UpperHalfState::new(rank, world_size, app_memory);
    uh.pc = pc;
    let n = d.len(9)?;
    uh.handles = (0..n)
        .map(|_| {
            let vid = Vid(d.u64()?);
            let kind = match d.u8()? {
                0 => HandleKind::Communicator,
                1 => HandleKind::Group,
                k => return corrupt("handle kind", k),
            };
            Ok(VirtualHandle { vid, kind, current_real: None })
        })
        .collect::<R<_>>()?;
    uh.next_vid = d.u64()?;
    let n = d.len(17)?;
    for _ in 0..n {
        let call = match d.u8()? {
            0 => ReplayCall::CommCreate { parent: Vid(d.u64()?), members: d.ranks()? },
            1 => ReplayCall::CommDup { parent: Vid(d.u64()?) },
            2 => ReplayCall::GroupIncl { parent: Vid(d.u64()?), members: d.ranks()? },
            k => return corrupt("replay call", k),
        };
        uh.replay_log.entries.push(ReplayEntry { call, result: Vid(d.u64()?) });
    }
    let n = d.len(36)?;
    for _ in 0..n {
        uh.drained.push(DrainedMessage {
            src: d.u32()?,
            comm: CommRef::Virtual(Vid(d.u64()?)),
            tag: d.u32()?,
            seq: d.u64()?,
            envelope: d.u64()?,
            payload: d.bytes()?,
        });
    }
    uh.counters.sent = d.counters()?;
    uh.counters.received = d.counters()?;
    uh.phase = match d.u8()? {
        0 => WrapperPhase::None,
        1 => WrapperPhase::Phase1,
        2 => WrapperPhase::Phase2,
        k => return corrupt("wrapper phase", k),
    };
    uh.pending_collective = match d.u8()? {
        0 => None,
        1 => {
            let code = d.u8()?;
            let op = CollOp::from_code(code).map_or_else(|| corrupt("collective op", code), Ok)?;
            let comm = CommRef::Virtual(Vid(d.u64()?));
            let root = match d.u8()? {
                0 => None,
                1 => Some(d.u32()?),
                k => return corrupt("root flag", k),
            };
            let reduce = match d.u8()? {
                0 => None,
                1 => Some(ReduceFn::Sum),
                2 => Some(ReduceFn::Max),
                k => return corrupt("reduce fn", k),
            };
            Some(CollectiveSpec { op, comm, root, reduce, payload: d.u32()? })
        }
        k => return corrupt("pending flag", k),
    };
    if d.at != bytes.len() {
        return Err(ImageError::Corrupt(format!("{} trailing bytes", bytes.len() - d.at)));
    }
    Ok(uh)
}

pub fn write_image(uh: &UpperHalfState, path: &Path) -> R<()> {
    let bytes = encode_image(uh)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image(path: &Path) -> R<UpperHalfState> {
    decode_image(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub world_size: u32,
    pub workload: WorkloadSpec,
    pub created_at_event: u64,
}

/// A complete set of rank images from one checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    pub manifest: Manifest,
    pub states: Vec<UpperHalfState>,
}

pub fn image_path(dir: &Path, rank: u32) -> PathBuf {
    dir.join(format!("rank-{rank}.img"))
}

impl ImageSet {
    pub fn new(manifest: Manifest, mut states: Vec<UpperHalfState>) -> R<ImageSet> {
        states.sort_by_key(|s| s.rank);
        let set = ImageSet { manifest, states };
        set.validate()?;
        Ok(set)
    }

    /// Exactly one image per rank 0..world_size, all agreeing on the size.
    pub fn validate(&self) -> R<()> {
        let n = self.manifest.world_size;
        for r in 0..n {
            match self.states.get(r as usize) {
                Some(s) if s.rank == r => {}
                _ => return Err(ImageError::MissingRank(r)),
            }
        }
        if self.states.len() != n as usize {
            return Err(ImageError::Corrupt(format!("{} images for world size {n}", self.states.len())));
        }
        if let Some(s) = self.states.iter().find(|s| s.world_size != n) {
            return Err(ImageError::Corrupt(format!("rank {} was saved with world size {}", s.rank, s.world_size)));
        }
        Ok(())
    }

    pub fn write_to(&self, dir: &Path) -> R<()> {
        fs::create_dir_all(dir)?;
        for s in &self.states {
            write_image(s, &image_path(dir, s.rank))?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read_from(dir: &Path) -> R<ImageSet> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut states = Vec::with_capacity(manifest.world_size as usize);
        for r in 0..manifest.world_size {
            let path = image_path(dir, r);
            if !path.exists() {
                return Err(ImageError::MissingRank(r));
            }
            states.push(read_image(&path)?);
        }
        ImageSet::new(manifest, states)
    }
}
