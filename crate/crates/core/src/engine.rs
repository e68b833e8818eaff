//! The iteration loop: arrivals, scheduling, adapter loads, one decode step.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter_cache::SlotCache;
use crate::config::ServerConfig;
use crate::error::{Error, Result};
use crate::estimators::{lat_step, mem_max, LoadSource};
use crate::kv_scheduler::{Phase, Scheduler};
use crate::metrics::{ideal_excluding_rejected, summarize, MetricsSummary};
use crate::workload::{generate_arrivals, AdapterId, LengthMode, Request, WorkloadSpec};

/// How request lengths are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Lengths as given by the workload, including empirical traces.
    Full,
    /// Lengths drawn from normal distributions with the traces' moments.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestRecord {
    pub request_id: u64,
    pub adapter_id: AdapterId,
    pub arrival_s: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub tokens_generated: u32,
    pub status: Phase,
    pub first_token_s: Option<f64>,
    pub last_token_s: Option<f64>,
    pub completion_s: Option<f64>,
    pub preemption_count: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_times_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadEvent {
    pub time_s: f64,
    pub adapter_id: AdapterId,
    pub rank: u32,
    pub source: LoadSource,
    pub latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evicted: Option<AdapterId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub time: f64,
    pub iteration: u64,
    pub r_running: usize,
    pub r_waiting: usize,
    pub a_running: usize,
    pub lat_step: f64,
    pub loads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationResult {
    pub metrics: MetricsSummary,
    pub mode: SimMode,
    pub config: ServerConfig,
    pub iterations: u64,
    /// The iteration cap was hit before the run ended.
    pub truncated: bool,
    /// Arrival window; throughput is measured over it.
    pub window_s: f64,
    /// Clock when the run ended (after draining, if enabled).
    pub end_time_s: f64,
    /// Time the clock jumped over with an empty batch.
    pub idle_time_s: f64,
    pub kv_capacity_tokens: u64,
    pub tokens_in_window: u64,
    pub tokens_total: u64,
    pub preemptions: u64,
    pub load_events: Vec<LoadEvent>,
    pub requests: Vec<RequestRecord>,
    #[serde(skip)]
    pub trace: Vec<IterationTrace>,
    /// Wall-clock seconds of the run; not part of the semantic output.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl SimulationResult {
    pub fn write_trace_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.trace {
            out.serialize(row)?;
        }
        out.flush().map_err(|e| Error::io("iteration trace", e))?;
        Ok(())
    }
}

/// Generates the workload's arrivals and runs them. In `Mean` mode the
/// workload's lengths are first reduced to their moments.
pub fn run_simulation(
    workload: &WorkloadSpec,
    config: &ServerConfig,
    mode: SimMode,
) -> Result<SimulationResult> {
    workload.validate()?;
    let wl = match mode {
        SimMode::Mean => workload.to_mean_mode()?,
        SimMode::Full => {
            let mean_specs = std::iter::once(&workload.lengths)
                .chain(workload.adapters.iter().filter_map(|a| a.lengths.as_ref()))
                .any(|l| l.mode == LengthMode::Mean);
            if mean_specs {
                return Err(Error::validation(
                    "lengths.mode",
                    "full-mode simulation needs full length traces",
                ));
            }
            workload.clone()
        }
    };
    let requests = generate_arrivals(&wl)?;
    run_requests(&wl, config, requests, mode)
}

/// Runs an explicit request list. `workload` supplies the adapters, the
/// arrival window and the ideal throughput.
pub fn run_requests(
    workload: &WorkloadSpec,
    config: &ServerConfig,
    mut requests: Vec<Request>,
    mode: SimMode,
) -> Result<SimulationResult> {
    config.validate()?;
    let started = Instant::now();
    requests.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then(a.request_id.cmp(&b.request_id))
    });
    for (i, r) in requests.iter().enumerate() {
        if !(r.arrival_time.is_finite() && r.arrival_time >= 0.0) {
            return Err(Error::validation(format!("requests[{i}].arrival_time"), "must be finite and >= 0"));
        }
        if r.input_tokens == 0 || r.output_tokens == 0 {
            return Err(Error::validation(format!("requests[{i}]"), "token counts must be >= 1"));
        }
    }

    let est = &config.estimators;
    let g = config.slots;
    let max_rank = workload.max_rank();
    let profile = if max_rank > 0 { vec![max_rank; g] } else { Vec::new() };
    let capacity = mem_max(&est.memory, &profile);
    if capacity == 0 {
        return Err(Error::Config(format!(
            "no KV memory left after {g} adapter slots of rank {max_rank}"
        )));
    }
    let served = workload.served_adapters().max(1);
    let adapters: Vec<(AdapterId, u32)> = workload.adapters.iter().map(|a| (a.adapter_id, a.rank)).collect();
    let sim = &config.sim;
    let mut sched = Scheduler::new(
        requests.clone(),
        &adapters,
        capacity,
        config.policy.loaded_adapter_priority,
        sim.record_token_times,
    )?;
    let mut cache = SlotCache::new(g, config.policy.load_source);

    let window = workload.duration_s;
    let mut clock = 0.0_f64;
    let mut next = 0usize;
    let mut iterations = 0u64;
    let mut truncated = false;
    let mut idle = 0.0;
    let mut tokens_in_window = 0u64;
    let mut tokens_total = 0u64;
    let mut preemptions = 0u64;
    let mut load_events = Vec::new();
    let mut trace = Vec::new();

    loop {
        while next < requests.len() && requests[next].arrival_time <= clock {
            sched.enqueue(next)?;
            next += 1;
        }
        sched.complete_finished(&mut cache)?;
        if !sim.drain && clock >= window {
            break;
        }
        if iterations >= sim.max_iterations {
            truncated = true;
            break;
        }

        let preempted = sched.decode_step_alloc(&mut cache)?;
        preemptions += preempted.len() as u64;
        let mut loads = Vec::new();
        if preempted.is_empty() {
            loads = sched.admit(&mut cache, clock)?.loads;
        }

        if sched.running().is_empty() {
            if next < requests.len() {
                let t = requests[next].arrival_time;
                idle += t - clock;
                clock = t;
                continue;
            }
            if sched.waiting_len() == 0 {
                break;
            }
            return Err(Error::Invariant(format!(
                "{} requests waiting with an empty batch at t={clock}",
                sched.waiting_len()
            )));
        }

        loads.extend(cache.ensure_loaded(&sched.running_adapters(), clock)?);
        if sim.check_invariants {
            sched.check_invariants(&cache, next)?;
        }
        let mut load_cost = Vec::with_capacity(loads.len());
        for l in &loads {
            let latency = est.load.seconds(l.rank, l.source)?;
            load_cost.push((l.rank, l.source));
            load_events.push(LoadEvent {
                time_s: clock,
                adapter_id: l.adapter_id,
                rank: l.rank,
                source: l.source,
                latency_s: latency,
                evicted: l.evicted,
            });
        }
        let r_running = sched.running().len();
        let r_waiting = sched.waiting_len();
        let a_running = sched.active_adapters();
        let lat = lat_step(&est.coefficients, &est.load, r_running, r_waiting, g, served, a_running, &load_cost)?;
        if !(lat > 0.0 && lat.is_finite()) {
            return Err(Error::Simulation(format!("non-positive step latency {lat} at t={clock}")));
        }
        let t = clock + lat;
        let emitted = sched.emit_tokens(t) as u64;
        tokens_total += emitted;
        if t <= window {
            tokens_in_window += emitted;
        }
        if sim.trace_iterations {
            trace.push(IterationTrace {
                time: clock,
                iteration: iterations,
                r_running,
                r_waiting,
                a_running,
                lat_step: lat,
                loads: loads.len(),
            });
        }
        clock = t;
        iterations += 1;
    }

    let records: Vec<RequestRecord> = sched
        .into_requests()
        .into_iter()
        .map(|st| RequestRecord {
            request_id: st.request.request_id,
            adapter_id: st.request.adapter_id,
            arrival_s: st.request.arrival_time,
            input_tokens: st.request.input_tokens,
            output_tokens: st.request.output_tokens,
            tokens_generated: st.tokens_generated,
            status: st.phase,
            first_token_s: st.first_token_time,
            last_token_s: st.last_token_time,
            completion_s: (st.phase == Phase::Finished).then_some(st.last_token_time).flatten(),
            preemption_count: st.preemption_count,
            token_times_s: st.token_emit_times,
        })
        .collect();
    let ideal = ideal_excluding_rejected(workload, config.ideal_includes_input, &records, window)?;
    let metrics = summarize(&records, tokens_in_window, window, ideal);
    Ok(SimulationResult {
        metrics,
        mode,
        config: config.clone(),
        iterations,
        truncated,
        window_s: window,
        end_time_s: clock,
        idle_time_s: idle,
        kv_capacity_tokens: capacity,
        tokens_in_window,
        tokens_total,
        preemptions,
        load_events,
        requests: records,
        trace,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
