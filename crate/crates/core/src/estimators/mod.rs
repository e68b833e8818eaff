//! Analytic step-latency and KV-memory estimators.
//!
//! One loop iteration of the serving engine costs
//!
//! ```text
//! step  = sched + load + model * adapters
//! sched = k1 * R_running + k2 * R_waiting + k3 * R_waiting * G / N
//! model = k4 * R_running + k5
//! adapters = 1                       if A_running = 0
//!          = k6 * A_running + k7     otherwise
//! ```
//!
//! `load` sums the per-rank load latencies of the adapters brought into
//! GPU slots during the iteration. KV memory is accounted in tokens: the
//! capacity left after `G` adapter slots are carved out of the budget.

mod fit;

pub use fit::{
    fit_adapters, fit_linear, fit_load, fit_memory, fit_model, fit_sched, read_benchmark_csv,
    BenchmarkTable, FitOptions,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyCoefficients {
    /// Seconds per running request (scheduler).
    pub k1: f64,
    /// Seconds per waiting request (scheduler).
    pub k2: f64,
    /// Seconds per waiting request, scaled by slots / served adapters.
    pub k3: f64,
    /// Seconds per running request (forward pass).
    pub k4: f64,
    /// Forward-pass intercept, seconds.
    pub k5: f64,
    /// Overhead multiplier per unique adapter in the batch.
    pub k6: f64,
    /// Overhead multiplier intercept once any adapter is in the batch.
    pub k7: f64,
    /// Scheduler intercept; zero unless fitted with an intercept column.
    #[serde(default)]
    pub sched_intercept: f64,
}

impl LatencyCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("k4", self.k4),
            ("k5", self.k5),
            ("k6", self.k6),
            ("k7", self.k7),
            ("sched_intercept", self.sched_intercept),
        ];
        for (name, v) in all {
            if !v.is_finite() {
                return Err(Error::validation(
                    format!("estimators.coefficients.{name}"),
                    "must be finite",
                ));
            }
        }
        if self.k4 < 0.0 {
            return Err(Error::validation("estimators.coefficients.k4", "must be >= 0"));
        }
        if self.k5 <= 0.0 {
            return Err(Error::validation(
                "estimators.coefficients.k5",
                "a forward pass must take positive time (k5 > 0)",
            ));
        }
        if self.k6 < 0.0 {
            return Err(Error::validation("estimators.coefficients.k6", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryModel {
    /// KV capacity in tokens with no adapter slots allocated.
    pub total_kv_budget: u64,
    /// Bytes of KV per token. Informational only.
    #[serde(default)]
    pub kv_bytes_per_token: f64,
    /// Tokens of capacity one rank-8 slot costs; other ranks scale linearly.
    pub slot_cost_rank8_tokens: f64,
    /// Measured per-rank slot costs, overriding the linear rule.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub slot_cost_tokens: BTreeMap<u32, u64>,
}

impl MemoryModel {
    pub fn slot_cost_tokens(&self, rank: u32) -> u64 {
        if rank == 0 {
            return 0;
        }
        match self.slot_cost_tokens.get(&rank) {
            Some(&c) => c,
            None => (self.slot_cost_rank8_tokens * rank as f64 / 8.0).round() as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_kv_budget == 0 {
            return Err(Error::validation(
                "estimators.memory.total_kv_budget",
                "must be > 0",
            ));
        }
        if !(self.slot_cost_rank8_tokens.is_finite() && self.slot_cost_rank8_tokens > 0.0) {
            return Err(Error::validation(
                "estimators.memory.slot_cost_rank8_tokens",
                "must be finite and > 0",
            ));
        }
        let mut prev: Option<(u32, u64)> = None;
        for (&rank, &cost) in &self.slot_cost_tokens {
            if let Some((pr, pc)) = prev {
                if cost <= pc {
                    return Err(Error::validation(
                        format!("estimators.memory.slot_cost_tokens.{rank}"),
                        format!("slot cost must increase with rank ({pr}: {pc} >= {rank}: {cost})"),
                    ));
                }
            }
            prev = Some((rank, cost));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadSource {
    Cpu,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadLatencyTable {
    /// Seconds to copy an adapter of the given rank from host memory.
    pub cpu_load_seconds: BTreeMap<u32, f64>,
    /// Slowdown of loading from disk relative to host memory.
    #[serde(default = "default_disk_multiplier")]
    pub disk_multiplier: f64,
}

fn default_disk_multiplier() -> f64 {
    1.7
}

impl LoadLatencyTable {
    pub fn validate(&self) -> Result<()> {
        if !(self.disk_multiplier.is_finite() && self.disk_multiplier >= 1.0) {
            return Err(Error::validation(
                "estimators.load.disk_multiplier",
                "must be finite and >= 1",
            ));
        }
        let mut prev = None;
        for (&rank, &s) in &self.cpu_load_seconds {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::validation(
                    format!("estimators.load.cpu_load_seconds.{rank}"),
                    "must be finite and >= 0",
                ));
            }
            if let Some(p) = prev {
                if s <= p {
                    return Err(Error::validation(
                        format!("estimators.load.cpu_load_seconds.{rank}"),
                        "load latency must increase with rank",
                    ));
                }
            }
            prev = Some(s);
        }
        Ok(())
    }

    pub fn seconds(&self, rank: u32, source: LoadSource) -> Result<f64> {
        let cpu = self.cpu_load_seconds.get(&rank).ok_or_else(|| {
            Error::Config(format!("no load latency for adapter rank {rank}"))
        })?;
        Ok(match source {
            LoadSource::Cpu => *cpu,
            LoadSource::Disk => cpu * self.disk_multiplier,
        })
    }
}

/// The `estimators` section of a server config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub coefficients: LatencyCoefficients,
    pub memory: MemoryModel,
    pub load: LoadLatencyTable,
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.coefficients.validate()?;
        self.memory.validate()?;
        self.load.validate()
    }
}

/// KV capacity in tokens once slots with the given ranks are allocated.
/// Floors at zero; zero means the configuration cannot serve anything.
pub fn mem_max(mm: &MemoryModel, slot_ranks: &[u32]) -> u64 {
    let used: u64 = slot_ranks.iter().map(|&r| mm.slot_cost_tokens(r)).sum();
    mm.total_kv_budget.saturating_sub(used)
}

pub fn lat_sched(
    c: &LatencyCoefficients,
    r_running: usize,
    r_waiting: usize,
    slots: usize,
    served: usize,
) -> Result<f64> {
    if slots == 0 || served == 0 {
        return Err(Error::Domain(format!(
            "slot ratio undefined for G={slots}, N={served}"
        )));
    }
    // More slots than adapters behaves like G = N.
    let ratio = (slots as f64 / served as f64).min(1.0);
    let w = r_waiting as f64;
    let t = c.sched_intercept + c.k1 * r_running as f64 + c.k2 * w + c.k3 * w * ratio;
    Ok(t.max(0.0))
}

pub fn lat_model(c: &LatencyCoefficients, r_running: usize) -> f64 {
    c.k4 * r_running as f64 + c.k5
}

pub fn lat_adapters(c: &LatencyCoefficients, a_running: usize) -> f64 {
    if a_running == 0 {
        1.0
    } else {
        c.k6 * a_running as f64 + c.k7
    }
}

pub fn lat_load(t: &LoadLatencyTable, loads: &[(u32, LoadSource)]) -> Result<f64> {
    loads.iter().map(|&(rank, src)| t.seconds(rank, src)).sum()
}

#[allow(clippy::too_many_arguments)]
pub fn lat_step(
    c: &LatencyCoefficients,
    t: &LoadLatencyTable,
    r_running: usize,
    r_waiting: usize,
    slots: usize,
    served: usize,
    a_running: usize,
    loads: &[(u32, LoadSource)],
) -> Result<f64> {
    Ok(lat_sched(c, r_running, r_waiting, slots, served)?
        + lat_load(t, loads)?
        + lat_model(c, r_running) * lat_adapters(c, a_running))
}
