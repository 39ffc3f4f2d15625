//! Workflow-based benchmarking of functions spread over IoT, edge and cloud
//! tiers.

pub mod clock;
pub mod gateway;
pub mod graph;
mod kv;
pub mod metrics;
pub mod runtime;
pub mod scheduler;
pub mod sim;
pub mod storage;
pub mod template;
pub mod topology;
pub mod workloads;
