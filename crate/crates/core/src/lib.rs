//! Round-robin atomic multicast over a replicated shared state table.
//!
//! Layers, bottom up: [`transport`] simulates one-sided writes between
//! registered memory regions; [`sst`] lays out the replicated table and
//! pushes row ranges; [`smc`] keeps per-sender ring buffers of message
//! slots inside the table; [`multicast`] runs the send, receive and
//! delivery predicates that turn slots into a totally ordered delivery
//! stream. [`oracle`] recomputes the expected order from commit logs.

pub mod digest;
pub mod multicast;
pub mod oracle;
pub mod records;
pub mod smc;
pub mod sst;
pub mod time;
pub mod transport;
