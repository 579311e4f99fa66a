//! Workloads: deterministic per-rank op lists and the memory transforms
//! they apply. A rank's continuation point is its index into its op list.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{CollOp, ReduceFn};
use crate::error::SimError;
use crate::upperhalf::Vid;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op")]
pub enum Op {
    Compute { salt: u32 },
    /// `dst` is comm-relative.
    Send { dst: u32, tag: u32, comm: Vid, len: u32 },
    /// `src` is comm-relative; `None` is a wildcard.
    Recv { src: Option<u32>, tag: Option<u32>, comm: Vid },
    Collective { kind: CollOp, comm: Vid, root: Option<u32>, reduce: Option<ReduceFn>, payload: u32 },
    CommCreate { parent: Vid, members: Vec<u32> },
    CommDup { parent: Vid },
    GroupIncl { parent: Vid, members: Vec<u32> },
}

impl Op {
    pub fn allreduce(comm: Vid, payload: u32) -> Op {
        Op::Collective { kind: CollOp::Allreduce, comm, root: None, reduce: Some(ReduceFn::Sum), payload }
    }
}

pub type Program = Vec<Op>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkloadName {
    #[serde(rename = "ring-pingpong")]
    RingPingpong,
    #[serde(rename = "iter-allreduce")]
    IterAllreduce,
    #[serde(rename = "stencil-2d")]
    Stencil2d,
    #[serde(rename = "comm-split-mix")]
    CommSplitMix,
    /// Seeded random point-to-point rounds with wildcard receives.
    #[serde(rename = "random-p2p")]
    RandomP2p,
}

impl WorkloadName {
    pub const ALL: [WorkloadName; 5] = [
        WorkloadName::RingPingpong,
        WorkloadName::IterAllreduce,
        WorkloadName::Stencil2d,
        WorkloadName::CommSplitMix,
        WorkloadName::RandomP2p,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadName::RingPingpong => "ring-pingpong",
            WorkloadName::IterAllreduce => "iter-allreduce",
            WorkloadName::Stencil2d => "stencil-2d",
            WorkloadName::CommSplitMix => "comm-split-mix",
            WorkloadName::RandomP2p => "random-p2p",
        }
    }
}

impl fmt::Display for WorkloadName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkloadName {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        WorkloadName::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| SimError::InvalidConfig(format!("unknown workload `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: WorkloadName,
    pub world_size: u32,
    pub steps: u32,
    pub payload_bytes: u32,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(name: WorkloadName, world_size: u32, steps: u32) -> Self {
        Self { name, world_size, steps, payload_bytes: 8, seed: 0 }
    }

    /// Payload size rounded up to whole u32 words, at least one.
    pub fn payload(&self) -> u32 {
        self.payload_bytes.max(4).div_ceil(4) * 4
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.world_size == 0 {
            return Err(SimError::InvalidConfig("world size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn initial_memory(&self, rank: u32) -> Vec<u8> {
        let len = (self.payload() * 2).max(16) as usize;
        (0..len).map(|i| (rank as u64 * 31 + i as u64 * 7 + self.seed) as u8).collect()
    }

    pub fn programs(&self) -> Vec<Program> {
        let n = self.world_size;
        let p = self.payload();
        (0..n)
            .map(|r| match self.name {
                WorkloadName::RingPingpong => ring_pingpong(r, n, self.steps, p),
                WorkloadName::IterAllreduce => iter_allreduce(self.steps, p),
                WorkloadName::Stencil2d => stencil(r, n, self.steps, p),
                WorkloadName::CommSplitMix => comm_split_mix(r, n, self.steps, p),
                WorkloadName::RandomP2p => random_p2p(r, n, self.steps, p, self.seed),
            })
            .collect()
    }
}

fn ring_pingpong(r: u32, n: u32, steps: u32, p: u32) -> Program {
    let mut ops = Vec::new();
    for s in 0..steps {
        ops.push(Op::Compute { salt: s });
        ops.push(Op::Send { dst: (r + 1) % n, tag: s % 4, comm: Vid::WORLD, len: p });
        ops.push(Op::Recv { src: Some((r + n - 1) % n), tag: Some(s % 4), comm: Vid::WORLD });
    }
    ops.push(Op::allreduce(Vid::WORLD, p));
    ops
}

fn iter_allreduce(steps: u32, p: u32) -> Program {
    let mut ops = Vec::new();
    for s in 0..steps {
        ops.push(Op::Compute { salt: s });
        ops.push(Op::allreduce(Vid::WORLD, p));
    }
    ops
}

fn stencil(r: u32, n: u32, steps: u32, p: u32) -> Program {
    let up = r.checked_sub(1);
    let down = (r + 1 < n).then_some(r + 1);
    let mut ops = Vec::new();
    for s in 0..steps {
        ops.push(Op::Compute { salt: s });
        if let Some(u) = up {
            ops.push(Op::Send { dst: u, tag: 1, comm: Vid::WORLD, len: p });
        }
        if let Some(d) = down {
            ops.push(Op::Send { dst: d, tag: 2, comm: Vid::WORLD, len: p });
        }
        if let Some(u) = up {
            ops.push(Op::Recv { src: Some(u), tag: Some(2), comm: Vid::WORLD });
        }
        if let Some(d) = down {
            ops.push(Op::Recv { src: Some(d), tag: Some(1), comm: Vid::WORLD });
        }
        if s % 2 == 1 {
            ops.push(Op::Collective { kind: CollOp::Allreduce, comm: Vid::WORLD, root: None, reduce: Some(ReduceFn::Max), payload: p });
        }
    }
    ops
}

fn comm_split_mix(r: u32, n: u32, steps: u32, p: u32) -> Program {
    let half: Vec<u32> = (0..n).filter(|m| m % 2 == r % 2).collect();
    let me = half.iter().position(|&m| m == r).unwrap() as u32;
    let m = half.len() as u32;
    let (sub, dup) = (Vid(1), Vid(2));
    let mut ops = vec![
        Op::CommCreate { parent: Vid::WORLD, members: half.clone() },
        Op::CommDup { parent: Vid::WORLD },
        Op::GroupIncl { parent: Vid::WORLD, members: vec![0] },
    ];
    for s in 0..steps {
        ops.push(Op::Compute { salt: s });
        ops.push(Op::allreduce(sub, p));
        ops.push(Op::Collective { kind: CollOp::Bcast, comm: dup, root: Some(s % n), reduce: None, payload: p });
        if m > 1 {
            ops.push(Op::Send { dst: (me + 1) % m, tag: s, comm: sub, len: p });
            ops.push(Op::Recv { src: Some((me + m - 1) % m), tag: Some(s), comm: sub });
        }
    }
    ops.push(Op::Collective { kind: CollOp::Alltoall, comm: Vid::WORLD, root: None, reduce: None, payload: p * n });
    ops.push(Op::Collective { kind: CollOp::Gather, comm: dup, root: Some(0), reduce: None, payload: p });
    ops
}

/// Rounds of random sends followed by wildcard-source receives for every
/// message addressed to the rank in that round, then an allreduce. Sends
/// never block and each round's receives are satisfied by the same round's
/// sends, so the workload cannot deadlock.
fn random_p2p(r: u32, n: u32, rounds: u32, p: u32, seed: u64) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut local = ChaCha8Rng::seed_from_u64(seed ^ ((r as u64 + 1) << 32));
    let mut ops = Vec::new();
    for round in 0..rounds {
        let mut msgs: Vec<(u32, u32)> = Vec::new();
        for src in 0..n {
            for _ in 0..rng.gen_range(0..=3u32) {
                msgs.push((src, rng.gen_range(0..n)));
            }
        }
        let tag = round % 8;
        let mut mine: Vec<Op> = msgs
            .iter()
            .filter(|(s, _)| *s == r)
            .map(|&(_, dst)| Op::Send { dst, tag, comm: Vid::WORLD, len: p })
            .collect();
        mine.push(Op::Compute { salt: round });
        mine.shuffle(&mut local);
        ops.extend(mine);
        let incoming = msgs.iter().filter(|(_, d)| *d == r).count();
        ops.extend((0..incoming).map(|_| Op::Recv { src: None, tag: Some(tag), comm: Vid::WORLD }));
        ops.push(Op::allreduce(Vid::WORLD, p));
    }
    ops
}

pub fn compute(mem: &mut [u8], salt: u32) {
    for (i, b) in mem.iter_mut().enumerate() {
        *b = b.wrapping_mul(167).wrapping_add((salt as u8) ^ (i as u8)).rotate_left(3);
    }
}

pub fn send_payload(mem: &[u8], len: u32, pc: u64) -> Vec<u8> {
    (0..len as usize).map(|i| mem[i % mem.len()] ^ (pc as u8).wrapping_add(i as u8)).collect()
}

pub fn absorb(mem: &mut [u8], bytes: &[u8], salt: u64) {
    let l = mem.len();
    mem[0] ^= salt as u8;
    for (i, x) in bytes.iter().enumerate() {
        mem[i % l] = mem[i % l].rotate_left(1) ^ x ^ (salt as u8);
    }
}

/// Contribution of a rank to a collective, taken from its memory.
pub fn contribution(mem: &[u8], kind: CollOp, payload: u32) -> Vec<u8> {
    match kind {
        CollOp::Barrier => Vec::new(),
        _ => (0..payload as usize).map(|i| mem[i % mem.len()]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for w in WorkloadName::ALL {
            assert_eq!(w.as_str().parse::<WorkloadName>().unwrap(), w);
            assert_eq!(serde_json::to_string(&w).unwrap(), format!("\"{w}\""));
        }
    }

    #[test]
    fn random_p2p_balanced() {
        let spec = WorkloadSpec { name: WorkloadName::RandomP2p, world_size: 4, steps: 5, payload_bytes: 4, seed: 9 };
        let progs = spec.programs();
        let sends: usize = progs.iter().flatten().filter(|o| matches!(o, Op::Send { .. })).count();
        let recvs: usize = progs.iter().flatten().filter(|o| matches!(o, Op::Recv { .. })).count();
        assert_eq!(sends, recvs);
        assert_eq!(progs, spec.programs(), "generation is deterministic");
    }

    #[test]
    fn payload_rounding() {
        let mut s = WorkloadSpec::new(WorkloadName::IterAllreduce, 2, 1);
        s.payload_bytes = 5;
        assert_eq!(s.payload(), 8);
        s.payload_bytes = 0;
        assert_eq!(s.payload(), 4);
    }
}
