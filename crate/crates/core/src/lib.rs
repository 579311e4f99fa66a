//! Deterministic simulated message-passing runtime with a split-process
//! checkpoint/restart layer.

pub mod ckptstore;
pub mod coordinator;
pub mod drain;
pub mod engine;
pub mod runtime;
pub mod error;
pub mod explore;
pub mod harness;
pub mod simnet;
pub mod upperhalf;
pub mod workload;
