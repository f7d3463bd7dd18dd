//! Training loop, checkpointing, closed-loop evaluation, and the figure
//! artifacts built on top of the policy and simulator crates.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub mod ablate;
pub mod checkpoint;
pub mod data;
pub mod evalkit;
pub mod figures;
pub mod locality;
pub mod schedule;
pub mod trainer;

pub use schedule::Schedule;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(#[from] incom_core::io::FormatError),
    #[error("sim: {0}")]
    Sim(#[from] incom_sim::SimError),
    #[error("policy: {0}")]
    Policy(#[from] incom_policy::PolicyError),
    #[error("{term} became non-finite at step {step}")]
    NanLoss { term: &'static str, step: u64 },
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// FNV-1a over the resolved config text; stable across platforms so run
/// directories are reproducible.
pub fn config_hash(text: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `<root>/run-<confighash>-<unix seconds>`
pub fn run_dir(root: &Path, config_text: &str) -> PathBuf {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    root.join(format!("run-{:08x}-{ts}", config_hash(config_text) as u32))
}
