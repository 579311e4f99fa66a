//! Checkpoint coordinator and the per-rank helper.
//!
//! The coordinator sends intend-to-checkpoint, collects one state report per
//! rank, repeats with extra-iteration rounds while anyone reports
//! exit-phase-2, then sends do-ckpt. Helpers answer from the rank's wrapper
//! phase; a rank inside phase 2 answers only after the collective returns.
//! After every rank reports its image written, the coordinator sends resume.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::drain::Bookmark;
use crate::error::{Result, SimError};
use crate::upperhalf::WrapperPhase;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportState {
    Ready,
    InPhase1,
    ExitPhase2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CtlKind {
    IntendToCheckpoint,
    ExtraIteration,
    DoCkpt,
    StateReport,
    /// Helper-to-helper send counts for the drain.
    Bookmark,
    /// Helper-to-coordinator: image written.
    CkptDone,
    /// Coordinator-to-helper: everyone is written, continue.
    Resume,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ControlMessage {
    pub kind: CtlKind,
    pub round: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bookmark: Option<Bookmark>,
}

impl ControlMessage {
    pub fn new(kind: CtlKind, round: u32) -> Self {
        debug_assert!(kind != CtlKind::StateReport && kind != CtlKind::Bookmark);
        Self { kind, round, report: None, bookmark: None }
    }

    pub fn report(state: ReportState, round: u32) -> Self {
        Self { kind: CtlKind::StateReport, round, report: Some(state), bookmark: None }
    }

    pub fn bookmark(b: Bookmark, round: u32) -> Self {
        Self { kind: CtlKind::Bookmark, round, report: None, bookmark: Some(b) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordPhase {
    Idle,
    Collecting,
    Committing,
    Done,
}

/// What the coordinator wants sent after handling a message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoordOutcome {
    /// Reply from an earlier round; dropped.
    Stale,
    Waiting,
    Broadcast(ControlMessage),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CoordinatorState {
    pub world_size: u32,
    pub phase: CoordPhase,
    pub round: u32,
    pub last_reports: BTreeMap<u32, ReportState>,
    done: BTreeSet<u32>,
    started: bool,
    pub completed: u32,
    skip_extra_iteration: bool,
}

impl CoordinatorState {
    pub fn new(world_size: u32) -> Self {
        Self {
            world_size,
            phase: CoordPhase::Idle,
            round: 0,
            last_reports: BTreeMap::new(),
            done: BTreeSet::new(),
            started: false,
            completed: 0,
            skip_extra_iteration: false,
        }
    }

    /// Test-only protocol mutant: commit after the first round regardless.
    pub fn with_skip_extra_iteration(mut self, skip: bool) -> Self {
        self.skip_extra_iteration = skip;
        self
    }

    pub fn is_busy(&self) -> bool {
        matches!(self.phase, CoordPhase::Collecting | CoordPhase::Committing)
    }

    /// Starts a checkpoint: intend-to-checkpoint for every rank.
    pub fn begin_checkpoint(&mut self) -> Result<ControlMessage> {
        if self.is_busy() {
            return Err(SimError::AlreadyInProgress);
        }
        if self.started {
            self.round += 1;
        }
        self.started = true;
        self.phase = CoordPhase::Collecting;
        self.last_reports.clear();
        self.done.clear();
        Ok(ControlMessage::new(CtlKind::IntendToCheckpoint, self.round))
    }

    pub fn on_report(&mut self, rank: u32, msg: &ControlMessage) -> Result<CoordOutcome> {
        let state = msg.report.ok_or_else(|| SimError::InvariantViolation("state report without state".into()))?;
        if self.phase != CoordPhase::Collecting || msg.round != self.round {
            return Ok(CoordOutcome::Stale);
        }
        self.last_reports.insert(rank, state);
        if self.last_reports.len() < self.world_size as usize {
            return Ok(CoordOutcome::Waiting);
        }
        let any_exit = self.last_reports.values().any(|s| *s == ReportState::ExitPhase2);
        if any_exit && !self.skip_extra_iteration {
            self.round += 1;
            self.last_reports.clear();
            return Ok(CoordOutcome::Broadcast(ControlMessage::new(CtlKind::ExtraIteration, self.round)));
        }
        self.phase = CoordPhase::Committing;
        Ok(CoordOutcome::Broadcast(ControlMessage::new(CtlKind::DoCkpt, self.round)))
    }

    pub fn on_done(&mut self, rank: u32, msg: &ControlMessage) -> Result<CoordOutcome> {
        if self.phase != CoordPhase::Committing || msg.round != self.round {
            return Ok(CoordOutcome::Stale);
        }
        self.done.insert(rank);
        if self.done.len() < self.world_size as usize {
            return Ok(CoordOutcome::Waiting);
        }
        self.phase = CoordPhase::Done;
        self.completed += 1;
        Ok(CoordOutcome::Broadcast(ControlMessage::new(CtlKind::Resume, self.round)))
    }
}

/// In-progress local checkpoint of one rank.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LocalCheckpoint {
    pub round: u32,
    pub bookmarks: BTreeMap<u32, Bookmark>,
    pub written: bool,
}

/// The rank's checkpoint helper. It runs while application logic is blocked.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct HelperState {
    /// Set by intend-to-checkpoint; the rank waits before its next
    /// collective until resume.
    pub hold_collectives: bool,
    /// Round whose report is deferred until phase 2 completes.
    pub owed_report: Option<u32>,
    pub quiesced: bool,
    pub local: Option<LocalCheckpoint>,
}

impl HelperState {
    /// Handles intend-to-checkpoint or extra-iteration. Returns the
    /// immediate reply, if any.
    pub fn on_request(&mut self, phase: WrapperPhase, msg: &ControlMessage) -> Result<Option<ControlMessage>> {
        if !matches!(msg.kind, CtlKind::IntendToCheckpoint | CtlKind::ExtraIteration) {
            return Err(SimError::InvariantViolation(format!("helper got {:?} as a request", msg.kind)));
        }
        self.hold_collectives = true;
        Ok(match phase {
            WrapperPhase::None => Some(ControlMessage::report(ReportState::Ready, msg.round)),
            WrapperPhase::Phase1 => Some(ControlMessage::report(ReportState::InPhase1, msg.round)),
            WrapperPhase::Phase2 => {
                self.owed_report = Some(msg.round);
                None
            }
        })
    }

    /// Called when the rank's phase-2 collective returns.
    pub fn on_collective_exit(&mut self) -> Option<ControlMessage> {
        self.owed_report.take().map(|r| ControlMessage::report(ReportState::ExitPhase2, r))
    }

    /// Handles do-ckpt: quiesces the rank. The drain and image write follow.
    pub fn on_do_ckpt(&mut self, phase: WrapperPhase, msg: &ControlMessage) -> Result<()> {
        if !self.hold_collectives {
            return Err(SimError::InvariantViolation("do-ckpt without a preceding intend-to-checkpoint".into()));
        }
        if phase == WrapperPhase::Phase2 || self.owed_report.is_some() {
            return Err(SimError::InvariantViolation("do-ckpt received inside a collective call".into()));
        }
        self.quiesced = true;
        self.local = Some(LocalCheckpoint { round: msg.round, bookmarks: BTreeMap::new(), written: false });
        Ok(())
    }

    pub fn on_resume(&mut self) {
        self.hold_collectives = false;
        self.quiesced = false;
        self.local = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(c: &mut CoordinatorState, rank: u32, s: ReportState) -> CoordOutcome {
        let round = c.round;
        c.on_report(rank, &ControlMessage::report(s, round)).unwrap()
    }

    #[test]
    fn all_ready_commits_without_extra_round() {
        let mut c = CoordinatorState::new(4);
        let intend = c.begin_checkpoint().unwrap();
        assert_eq!((intend.kind, intend.round), (CtlKind::IntendToCheckpoint, 0));
        for r in 0..3 {
            assert_eq!(report(&mut c, r, ReportState::Ready), CoordOutcome::Waiting);
        }
        assert_eq!(report(&mut c, 3, ReportState::Ready), CoordOutcome::Broadcast(ControlMessage::new(CtlKind::DoCkpt, 0)));
        assert_eq!(c.phase, CoordPhase::Committing);
    }

    #[test]
    fn exit_phase2_forces_extra_iteration() {
        let mut c = CoordinatorState::new(2);
        c.begin_checkpoint().unwrap();
        report(&mut c, 0, ReportState::Ready);
        let out = report(&mut c, 1, ReportState::ExitPhase2);
        assert_eq!(out, CoordOutcome::Broadcast(ControlMessage::new(CtlKind::ExtraIteration, 1)));
        // a late reply tagged with round 0 is discarded
        assert_eq!(c.on_report(0, &ControlMessage::report(ReportState::Ready, 0)).unwrap(), CoordOutcome::Stale);
        report(&mut c, 0, ReportState::InPhase1);
        assert!(matches!(report(&mut c, 1, ReportState::Ready), CoordOutcome::Broadcast(m) if m.kind == CtlKind::DoCkpt));
    }

    #[test]
    fn skip_mutant_commits_early() {
        let mut c = CoordinatorState::new(1).with_skip_extra_iteration(true);
        c.begin_checkpoint().unwrap();
        assert!(matches!(report(&mut c, 0, ReportState::ExitPhase2), CoordOutcome::Broadcast(m) if m.kind == CtlKind::DoCkpt));
    }

    #[test]
    fn reentrant_begin_rejected_and_rounds_advance() {
        let mut c = CoordinatorState::new(1);
        c.begin_checkpoint().unwrap();
        assert_eq!(c.begin_checkpoint(), Err(SimError::AlreadyInProgress));
        report(&mut c, 0, ReportState::Ready);
        assert!(matches!(c.on_done(0, &ControlMessage::new(CtlKind::CkptDone, 0)).unwrap(), CoordOutcome::Broadcast(m) if m.kind == CtlKind::Resume));
        assert_eq!(c.phase, CoordPhase::Done);
        assert_eq!(c.begin_checkpoint().unwrap().round, 1);
    }

    #[test]
    fn helper_replies_by_phase() {
        let intend = ControlMessage::new(CtlKind::IntendToCheckpoint, 0);
        let mut h = HelperState::default();
        assert_eq!(h.on_request(WrapperPhase::None, &intend).unwrap().unwrap().report, Some(ReportState::Ready));
        assert!(h.hold_collectives);
        let mut h = HelperState::default();
        assert_eq!(h.on_request(WrapperPhase::Phase1, &intend).unwrap().unwrap().report, Some(ReportState::InPhase1));
        let mut h = HelperState::default();
        assert_eq!(h.on_request(WrapperPhase::Phase2, &intend).unwrap(), None);
        assert!(h.on_do_ckpt(WrapperPhase::None, &ControlMessage::new(CtlKind::DoCkpt, 0)).is_err());
        assert_eq!(h.on_collective_exit().unwrap().report, Some(ReportState::ExitPhase2));
        assert_eq!(h.on_collective_exit(), None);
    }

    #[test]
    fn do_ckpt_while_idle_is_a_violation() {
        let mut h = HelperState::default();
        assert!(h.on_do_ckpt(WrapperPhase::None, &ControlMessage::new(CtlKind::DoCkpt, 0)).is_err());
    }
}
