//! Callback executors for pub/sub robotics workloads, with an overhead
//! benchmark comparing single-threaded, multi-threaded and callback-isolated
//! execution.

pub mod bench;
pub mod cli;
pub mod clock;
pub mod executors;
pub mod metrics;
pub mod model;
pub mod schedctl;
pub mod transport;
