//! The atomic multicast protocol: sequence numbers, the predicate engine
//! with its three batched steps, the null-send rule and delivery modes.

mod engine;
mod lock;
mod seq;

pub use engine::{
    CostModel, Delivery, DeliveryHandler, DeliveryMode, Engine, EngineError, EngineMetrics, EngineOptions, Histogram,
    Payload, SendError,
};
pub use lock::{Parker, SgGuard, SgLock};
pub use seq::{compute_received_num, decode, null_count_decision, seq_num, SeqNum};
