//! Token-bucket constrained edge offloading: trace generation, offloading
//! metrics, benchmark policies, deep Q-learning and evaluation.

pub mod cli;
pub mod config;
pub mod dqn;
pub mod error;
pub mod metric_map;
pub mod par;
pub mod policies;
pub mod scenario;
pub mod sim_eval;
pub mod token_bucket;
pub mod trace_gen;

pub use error::{Error, Result};
