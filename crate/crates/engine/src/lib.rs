//! Worker transports, stub workers and the cached stage DAG.

pub mod pipeline;
pub mod runlog;
pub mod stages;
pub mod stub_service;
pub mod stub_worker;
pub mod worker;

pub use pipeline::{cache_key, plan, run, verify_cache, PipelineConfig, RunError, RunOptions, RunReport, StageKind, StagePlan};
pub use runlog::{EventKind, RunEvent};
pub use worker::{connect, WorkerClient, WorkerPool};
