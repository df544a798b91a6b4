//! Planning and simulation for synchronous pipelined training.
//!
//! Given per-layer profiles and a cluster description, [`planner::plan`]
//! searches stage partitions, replication factors and device placements
//! minimizing the estimated latency of one global batch. The closed-form
//! estimate lives in [`estimator`]; [`simulator`] replays the 1F1B and
//! GPipe schedules block by block to get exact latencies and memory peaks.

pub mod costmodel;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod model;
pub mod planner;
pub mod simulator;

pub use error::{Error, Result};
pub use model::{ClusterSpec, ModelProfile, PipelinePlan, Stage, StageCost, StageCostSequence};
