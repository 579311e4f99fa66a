//! Oracles shared by the integration tests.

use std::collections::{BTreeMap, BTreeSet};

use mana_sim::ckptstore::ImageSet;
use mana_sim::upperhalf::{CommRef, Vid};

/// Per (src, dst, vid, tag): messages the sender counted as sent, and
/// messages the receiver either consumed or holds as drained.
pub fn conservation(set: &ImageSet) -> Result<(), String> {
    let mut sent: BTreeMap<(u32, u32, Vid, u32), u64> = BTreeMap::new();
    let mut accounted: BTreeMap<(u32, u32, Vid, u32), u64> = BTreeMap::new();
    for s in &set.states {
        for (&(dst, vid, tag), &n) in &s.counters.sent {
            *sent.entry((s.rank, dst, vid, tag)).or_default() += n;
        }
        for (&(src, vid, tag), &n) in &s.counters.received {
            *accounted.entry((src, s.rank, vid, tag)).or_default() += n;
        }
        let mut seen = BTreeSet::new();
        for d in &s.drained {
            let CommRef::Virtual(vid) = d.comm else { return Err(format!("rank {} drained a real id", s.rank)) };
            if !seen.insert((d.src, vid, d.tag, d.seq)) {
                return Err(format!("rank {} holds a duplicate drained message {:?}", s.rank, (d.src, vid, d.tag, d.seq)));
            }
            *accounted.entry((d.src, s.rank, vid, d.tag)).or_default() += 1;
        }
    }
    let keys: BTreeSet<_> = sent.keys().chain(accounted.keys()).collect();
    for k in keys {
        let (a, b) = (sent.get(k).copied().unwrap_or(0), accounted.get(k).copied().unwrap_or(0));
        if a != b {
            return Err(format!("{k:?}: sent {a}, received+drained {b}"));
        }
    }
    Ok(())
}
