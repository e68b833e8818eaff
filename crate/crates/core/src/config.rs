//! Server configuration and the shipped coefficient preset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    EstimatorConfig, LatencyCoefficients, LoadLatencyTable, LoadSource, MemoryModel,
};

/// Environment variable naming the default server-config file.
pub const CONFIG_ENV: &str = "LORAPLACE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// vLLM admits requests of already-loaded adapters ahead of earlier
    /// requests whose adapter cannot get a slot. Turning this off gives
    /// strict FCFS, a rough stand-in for S-LoRA's dynamic slots.
    #[serde(default = "yes")]
    pub loaded_adapter_priority: bool,
    #[serde(default = "cpu")]
    pub load_source: LoadSource,
}

fn yes() -> bool {
    true
}

fn cpu() -> LoadSource {
    LoadSource::Cpu
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            loaded_adapter_priority: true,
            load_source: LoadSource::Cpu,
        }
    }
}

/// Knobs of the simulation run itself rather than of the modeled server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    /// Iterations after which the run stops and is flagged `truncated`.
    pub max_iterations: u64,
    /// Keep iterating after the arrival window until every request is done.
    pub drain: bool,
    /// Keep every token emission time (needed for exact ITL percentiles).
    pub record_token_times: bool,
    /// Assert ledger, lifecycle and token conservation every iteration.
    pub check_invariants: bool,
    /// Keep a per-iteration trace (large).
    pub trace_iterations: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            max_iterations: 100_000_000,
            drain: true,
            record_token_times: true,
            check_invariants: false,
            trace_iterations: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    /// Adapter slots G pre-allocated in GPU memory.
    pub slots: usize,
    pub estimators: EstimatorConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// Count prompt tokens in the ideal throughput as well as output tokens.
    #[serde(default)]
    pub ideal_includes_input: bool,
    #[serde(default)]
    pub sim: SimOptions,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::validation("slots", "must be >= 1"));
        }
        if self.sim.max_iterations == 0 {
            return Err(Error::validation("sim.max_iterations", "must be >= 1"));
        }
        self.estimators.validate()
    }

    pub fn with_slots(&self, slots: usize) -> ServerConfig {
        ServerConfig {
            slots,
            ..self.clone()
        }
    }

    pub fn from_json_str(s: &str) -> Result<ServerConfig> {
        let cfg: ServerConfig = crate::io::from_json_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ServerConfig> {
        let cfg: ServerConfig = crate::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Synthetic H100-class profile for an 8B model.
    ///
    /// These numbers are not measurements. They are chosen so that sweeps
    /// show the expected qualitative behavior: throughput rising with served
    /// adapters until compute and slot memory overheads cause starvation,
    /// and a single slot shared by three busy adapters starving.
    pub fn h100_synthetic(slots: usize) -> ServerConfig {
        ServerConfig {
            slots,
            estimators: EstimatorConfig {
                coefficients: LatencyCoefficients {
                    k1: 2.0e-5,
                    k2: 1.0e-5,
                    k3: 3.0e-5,
                    k4: 1.2e-4,
                    k5: 0.02,
                    k6: 0.002,
                    k7: 1.15,
                    sched_intercept: 0.0,
                },
                memory: MemoryModel {
                    total_kv_budget: 200_000,
                    kv_bytes_per_token: 131_072.0,
                    slot_cost_rank8_tokens: 200.0,
                    slot_cost_tokens: BTreeMap::new(),
                },
                load: LoadLatencyTable {
                    cpu_load_seconds: BTreeMap::from([
                        (4, 0.008),
                        (8, 0.012),
                        (16, 0.020),
                        (32, 0.035),
                        (64, 0.065),
                        (128, 0.125),
                    ]),
                    disk_multiplier: 1.7,
                },
            },
            policy: PolicyConfig::default(),
            ideal_includes_input: false,
            sim: SimOptions::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_is_valid_and_round_trips() {
        let cfg = ServerConfig::h100_synthetic(8);
        cfg.validate().unwrap();
        let s = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ServerConfig::from_json_str(&s).unwrap(), cfg);
    }

    #[test]
    fn zero_slots_rejected() {
        let err = ServerConfig::h100_synthetic(0).validate().unwrap_err().to_string();
        assert!(err.contains("`slots`"), "{err}");
    }

    #[test]
    fn schema_error_names_path() {
        let mut v = serde_json::to_value(ServerConfig::h100_synthetic(4)).unwrap();
        v["estimators"]["coefficients"]["k5"] = serde_json::json!("fast");
        let err = ServerConfig::from_json_str(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("estimators.coefficients.k5"), "{err}");
    }
}
