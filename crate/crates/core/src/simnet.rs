//! Deterministic event substrate: event queue, FIFO channels, schedules and
//! the newline-delimited JSON trace.
//!
//! A run is a pure function of (workload, config, schedule). There is no
//! simulated clock; time is the count of executed events.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId(pub u64);

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Actor {
    Coordinator,
    Rank(u32),
    Helper(u32),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Coordinator => write!(f, "coordinator"),
            Actor::Rank(r) => write!(f, "rank-{r}"),
            Actor::Helper(r) => write!(f, "helper-{r}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    /// One unit of application progress for a rank.
    RankStep,
    /// Head of the data channel (src, dst) arrives at dst.
    DeliverData { src: u32, dst: u32 },
    /// Head of the control channel (from, to) is handled by `to`.
    DeliverControl { from: Actor, to: Actor },
    /// Coordinator starts a checkpoint.
    BeginCheckpoint,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::RankStep => "rank-step",
            EventKind::DeliverData { .. } => "deliver-data",
            EventKind::DeliverControl { .. } => "deliver-control",
            EventKind::BeginCheckpoint => "begin-checkpoint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pending {
    pub actor: Actor,
    pub kind: EventKind,
}

/// Pending events keyed by issue order. Ids are never reused.
#[derive(Clone, Debug, Default)]
pub struct EventQueue {
    pending: BTreeMap<EventId, Pending>,
    next_id: u64,
    halted: bool,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn schedule_event(&mut self, actor: Actor, kind: EventKind) -> Result<EventId> {
        if self.halted {
            return Err(SimError::Halted);
        }
        let id = EventId(self.next_id);
        self.next_id += 1;
        self.pending.insert(id, Pending { actor, kind });
        Ok(id)
    }

    pub fn take(&mut self, id: EventId) -> Option<Pending> {
        self.pending.remove(&id)
    }

    pub fn get(&self, id: EventId) -> Option<&Pending> {
        self.pending.get(&id)
    }

    pub fn halt(&mut self) {
        self.halted = true;
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Pending events in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (EventId, &Pending)> {
        self.pending.iter().map(|(id, p)| (*id, p))
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }
}

/// Reliable FIFO channel. Each queued message remembers the id of the event
/// that will deliver it; only the head is ever deliverable.
#[derive(Clone, Debug)]
pub struct Channel<M> {
    queue: VecDeque<(EventId, M)>,
}

impl<M> Default for Channel<M> {
    fn default() -> Self {
        Self { queue: VecDeque::new() }
    }
}

impl<M> Channel<M> {
    pub fn push(&mut self, event: EventId, msg: M) {
        debug_assert!(self.queue.back().map_or(true, |(e, _)| *e < event));
        self.queue.push_back((event, msg));
    }

    pub fn head_event(&self) -> Option<EventId> {
        self.queue.front().map(|(e, _)| *e)
    }

    pub fn pop(&mut self) -> Option<(EventId, M)> {
        self.queue.pop_front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &M> {
        self.queue.iter().map(|(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Seeded(u64),
    Scripted(Vec<usize>),
}

/// Picks among the enabled events. Every decision taken is recorded so any
/// run can be replayed as a scripted schedule.
#[derive(Clone, Debug)]
pub struct Schedule {
    mode: ScheduleMode,
    cursor: usize,
    rng: Option<ChaCha8Rng>,
    taken: Vec<usize>,
}

impl Schedule {
    pub fn seeded(seed: u64) -> Self {
        Self {
            mode: ScheduleMode::Seeded(seed),
            cursor: 0,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            taken: Vec::new(),
        }
    }

    pub fn scripted(decisions: Vec<usize>) -> Self {
        Self { mode: ScheduleMode::Scripted(decisions), cursor: 0, rng: None, taken: Vec::new() }
    }

    pub fn mode(&self) -> &ScheduleMode {
        &self.mode
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Decisions made so far, as indices into the enabled lists.
    pub fn taken(&self) -> &[usize] {
        &self.taken
    }

    /// Chooses an index into an enabled list of length `n` (n >= 1). A
    /// singleton choice is taken without consuming a scripted decision.
    pub fn choose(&mut self, n: usize) -> Result<usize> {
        debug_assert!(n > 0);
        let pick = if n == 1 {
            0
        } else {
            match (&self.mode, self.rng.as_mut()) {
                (ScheduleMode::Seeded(_), Some(rng)) => rng.gen_range(0..n),
                (ScheduleMode::Scripted(d), _) => {
                    let index = d.get(self.cursor).copied().ok_or(SimError::ScheduleExhausted {
                        cursor: self.cursor,
                        index: usize::MAX,
                        enabled: n,
                    })?;
                    if index >= n {
                        return Err(SimError::ScheduleExhausted { cursor: self.cursor, index, enabled: n });
                    }
                    self.cursor += 1;
                    index
                }
                (ScheduleMode::Seeded(_), None) => unreachable!("seeded schedule without rng"),
            }
        };
        if n > 1 {
            self.taken.push(pick);
        }
        Ok(pick)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub actor: String,
    pub kind: String,
    pub detail: serde_json::Value,
}

/// Ordered trace of everything that happened. Several records may share an
/// event id when one event has several effects; file order is the total order.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    enabled: bool,
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Self { enabled, records: Vec::new() }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, id: EventId, actor: Actor, kind: &str, detail: impl FnOnce() -> serde_json::Value) {
        if self.enabled {
            self.records.push(TraceRecord { id: id.0, actor: actor.to_string(), kind: kind.to_string(), detail: detail() });
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn to_ndjson(&self) -> String {
        records_to_ndjson(&self.records)
    }

    pub fn parse_ndjson(text: &str) -> serde_json::Result<Vec<TraceRecord>> {
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
    }
}

/// One JSON object per line, in order.
pub fn records_to_ndjson(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_ids_are_sequential() {
        let mut q = EventQueue::new();
        assert_eq!(q.schedule_event(Actor::Rank(0), EventKind::RankStep).unwrap(), EventId(0));
        assert_eq!(q.schedule_event(Actor::Rank(0), EventKind::RankStep).unwrap(), EventId(1));
    }

    #[test]
    fn halted_queue_rejects() {
        let mut q = EventQueue::new();
        q.halt();
        assert_eq!(q.schedule_event(Actor::Coordinator, EventKind::BeginCheckpoint), Err(SimError::Halted));
    }

    #[test]
    fn scripted_schedule_picks_index() {
        let mut s = Schedule::scripted(vec![2]);
        assert_eq!(s.choose(3).unwrap(), 2);
        // singleton does not consume
        assert_eq!(s.choose(1).unwrap(), 0);
        assert!(matches!(s.choose(2), Err(SimError::ScheduleExhausted { .. })));
    }

    #[test]
    fn scripted_out_of_range() {
        let mut s = Schedule::scripted(vec![5]);
        assert!(matches!(s.choose(3), Err(SimError::ScheduleExhausted { index: 5, .. })));
    }

    #[test]
    fn seeded_schedule_is_reproducible() {
        let mut a = Schedule::seeded(42);
        let mut b = Schedule::seeded(42);
        let xs: Vec<_> = (0..100).map(|_| a.choose(7).unwrap()).collect();
        let ys: Vec<_> = (0..100).map(|_| b.choose(7).unwrap()).collect();
        assert_eq!(xs, ys);
        assert_eq!(a.taken(), &xs[..]);
    }

    #[test]
    fn channel_is_fifo() {
        let mut c = Channel::default();
        c.push(EventId(3), "a");
        c.push(EventId(9), "b");
        assert_eq!(c.head_event(), Some(EventId(3)));
        assert_eq!(c.pop(), Some((EventId(3), "a")));
        assert_eq!(c.pop(), Some((EventId(9), "b")));
        assert!(c.is_empty());
    }

    #[test]
    fn trace_line_shape() {
        let mut t = Trace::new(true);
        t.push(EventId(4), Actor::Rank(2), "deliver-control", || serde_json::json!({"k": 1}));
        assert_eq!(t.to_ndjson(), "{\"id\":4,\"actor\":\"rank-2\",\"kind\":\"deliver-control\",\"detail\":{\"k\":1}}\n");
        let back = Trace::parse_ndjson(&t.to_ndjson()).unwrap();
        assert_eq!(back, t.records());
    }
}
