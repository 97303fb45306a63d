//! Decoupled concurrency control as a service.
//!
//! Execution engines hand transaction read/write sets to a cluster of
//! concurrency-control nodes. Each node batches what it receives into
//! epochs, tags every transaction with a commit sequence number, shards it,
//! exchanges write intents with replicas, deterministically resolves
//! conflicts, durably logs committed writes, and pushes those logs down to
//! storage asynchronously or synchronously.
//!
//! The crate is organized sans-IO: the node types in [`coordinator`],
//! [`storage`], and [`proxy`] are state machines consuming ticks and
//! messages and emitting messages and decisions. The deterministic
//! simulator in [`harness`] and the TCP shells in the companion CLI crate
//! drive the same state machines, so every correctness property checked in
//! simulation holds for the networked deployment byte-for-byte.

pub mod codec;
pub mod conflict;
pub mod coordinator;
pub mod durability;
pub mod harness;
pub mod model;
pub mod proxy;
pub mod storage;
pub mod transport;
