pub mod adapter_cache;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod io;
pub mod kv_scheduler;
pub mod metrics;
pub mod placement;
pub mod schema;
pub mod predictor;
pub mod workload;

pub use error::{Error, Result};
