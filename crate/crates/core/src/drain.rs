//! Point-to-point quiescence before a checkpoint.
//!
//! Each rank tells every peer how many application messages it has sent to
//! it per (comm, tag). The receiver subtracts what it has already received
//! or buffered and pulls exactly the difference out of the engine into its
//! upper-half buffer.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use crate::engine::{LowerHalfState, RealCommId};
use crate::error::{Result, SimError};
use crate::upperhalf::{CommRef, DrainedMessage, UpperHalfState};

/// Send counts from one rank to one peer, keyed by (real comm, tag). Only
/// exchanged while the engine is alive; never persisted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Bookmark {
    pub sent: BTreeMap<(RealCommId, u32), u64>,
}

impl Serialize for Bookmark {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let flat: Vec<(u64, u32, u64)> = self.sent.iter().map(|((c, t), n)| (c.0, *t, *n)).collect();
        flat.serialize(s)
    }
}

/// (sender world rank, comm, tag) → messages still owed to the receiver.
pub type Deficits = BTreeMap<(u32, RealCommId, u32), u64>;

pub fn bookmark_for(uh: &UpperHalfState, peer: u32) -> Result<Bookmark> {
    let mut b = Bookmark::default();
    for (&(p, vid, tag), &n) in &uh.counters.sent {
        if p == peer && n > 0 {
            *b.sent.entry((uh.resolve(vid)?, tag)).or_insert(0) += n;
        }
    }
    Ok(b)
}

/// Deficits of `receiver` given the bookmark each sender addressed to it.
pub fn deficits(receiver: &UpperHalfState, bookmarks: &BTreeMap<u32, Bookmark>) -> Result<Deficits> {
    let mut out = Deficits::new();
    for (&src, b) in bookmarks {
        for (&(comm, tag), &sent) in &b.sent {
            let (received, buffered) = match receiver.vid_of(comm) {
                Some(vid) => (
                    receiver.counters.received.get(&(src, vid, tag)).copied().unwrap_or(0),
                    receiver
                        .drained
                        .iter()
                        .filter(|m| m.src == src && m.comm == CommRef::Virtual(vid) && m.tag == tag)
                        .count() as u64,
                ),
                None => (0, 0),
            };
            let have = received + buffered;
            if have > sent {
                return Err(SimError::InvariantViolation(format!(
                    "rank {} accounts {have} messages from {src} on {comm:?} tag {tag} but only {sent} were sent",
                    receiver.rank
                )));
            }
            if sent > have {
                out.insert((src, comm, tag), sent - have);
            }
        }
    }
    Ok(out)
}

/// All-to-all exchange computed directly: deficits for every rank. `ranks`
/// is indexed by world rank.
pub fn exchange_bookmarks(ranks: &[UpperHalfState]) -> Result<Vec<Deficits>> {
    ranks
        .iter()
        .map(|receiver| {
            let mut marks = BTreeMap::new();
            for sender in ranks {
                marks.insert(sender.rank, bookmark_for(sender, receiver.rank)?);
            }
            deficits(receiver, &marks)
        })
        .collect()
}

/// True once every owed message has arrived at the receiver's engine.
pub fn drain_ready(lh: &LowerHalfState, rank: u32, owed: &Deficits) -> bool {
    owed.iter().all(|(&(src, comm, tag), &n)| {
        lh.mailbox(rank)
            .iter()
            .filter(|e| e.src == src && e.comm == comm && e.tag == crate::engine::Tag::App(tag))
            .count() as u64
            >= n
    })
}

/// Moves exactly the owed envelopes into the upper-half buffer, preserving
/// arrival (and so sequence) order. `drop_one` is a test-only fault that
/// loses the first drained envelope. Returns the drained envelope ids.
pub fn drain_messages(uh: &mut UpperHalfState, lh: &mut LowerHalfState, owed: &Deficits, drop_one: bool) -> Result<Vec<u64>> {
    if !drain_ready(lh, uh.rank, owed) {
        return Err(SimError::InvariantViolation(format!("lost message: rank {} cannot satisfy its drain", uh.rank)));
    }
    let mut remaining = owed.clone();
    let taken = lh.take_app_where(uh.rank, |e| {
        let crate::engine::Tag::App(tag) = e.tag else { return false };
        match remaining.get_mut(&(e.src, e.comm, tag)) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        }
    });
    let mut ids = Vec::with_capacity(taken.len());
    for (i, e) in taken.into_iter().enumerate() {
        ids.push(e.id);
        if drop_one && i == 0 {
            continue;
        }
        let crate::engine::Tag::App(tag) = e.tag else { unreachable!() };
        let comm = uh.to_comm_ref(e.comm);
        uh.drained.push(DrainedMessage { src: e.src, comm, tag, seq: e.seq, envelope: e.id, payload: e.payload });
    }
    Ok(ids)
}
