//! Experiment orchestration: configuration, the scene/fixation/step
//! training protocol, greedy evaluation, policy probing, checkpointing and
//! artifact export. The training scalar is `f32`; reference-precision
//! invariants live in the core crate's `f64` tests.

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod metrics;
pub mod probe;
pub mod protocol;

pub use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] verge_core::env::EnvError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite learning state at step {step}; training aborted, checkpoints written so far are intact")]
    NonFinite { step: u64 },
    #[error("{0}")]
    Invalid(String),
}
