//! Throughput, ITL, TTFT, starvation and SMAPE.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{RequestRecord, SimulationResult};
use crate::error::{Error, Result};
use crate::kv_scheduler::Phase;
use crate::workload::WorkloadSpec;

/// Throughput below this fraction of the ideal counts as starvation.
pub const STARVATION_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSummary {
    /// Output tokens emitted within the arrival window, per second.
    pub throughput_tok_s: f64,
    pub itl_mean_s: f64,
    pub itl_p50_s: f64,
    pub itl_p99_s: f64,
    pub ttft_mean_s: f64,
    pub ttft_p50_s: f64,
    pub ttft_p99_s: f64,
    pub ideal_throughput_tok_s: f64,
    pub starved: bool,
    pub finished_count: usize,
    pub rejected_count: usize,
    /// No request produced a token; latency fields are zero.
    pub degenerate: bool,
    pub window_s: f64,
    pub tokens_in_window: u64,
    /// False when token times were not recorded: ITL percentiles are then
    /// taken over per-request mean ITL. The ITL mean is exact either way.
    pub itl_percentiles_exact: bool,
}

/// Nearest-rank percentile of sorted data; 0 for an empty slice.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs
}

pub fn is_starved(throughput: f64, ideal: f64) -> bool {
    throughput < STARVATION_THRESHOLD * ideal
}

/// Aggregates per-request records. `ideal` should already exclude
/// rejected requests.
pub fn summarize(
    records: &[RequestRecord],
    tokens_in_window: u64,
    window_s: f64,
    ideal: f64,
) -> MetricsSummary {
    let finished_count = records.iter().filter(|r| r.status == Phase::Finished).count();
    let rejected_count = records.iter().filter(|r| r.status == Phase::Rejected).count();
    let ttft: Vec<f64> = records
        .iter()
        .filter_map(|r| r.first_token_s.map(|t| t - r.arrival_s))
        .collect();

    let exact = records
        .iter()
        .all(|r| r.token_times_s.len() == r.tokens_generated as usize);
    let (itl_mean, itl_sorted) = if exact {
        let itl: Vec<f64> = records
            .iter()
            .flat_map(|r| r.token_times_s.windows(2).map(|w| w[1] - w[0]))
            .collect();
        (mean(&itl), sorted(itl))
    } else {
        let mut span = 0.0;
        let mut gaps = 0u64;
        let mut per_request = Vec::new();
        for r in records.iter().filter(|r| r.tokens_generated >= 2) {
            if let (Some(a), Some(b)) = (r.first_token_s, r.last_token_s) {
                span += b - a;
                gaps += r.tokens_generated as u64 - 1;
                per_request.push((b - a) / (r.tokens_generated - 1) as f64);
            }
        }
        let m = if gaps == 0 { 0.0 } else { span / gaps as f64 };
        (m, sorted(per_request))
    };

    let throughput = if window_s > 0.0 {
        tokens_in_window as f64 / window_s
    } else {
        0.0
    };
    let degenerate = ttft.is_empty();
    let ttft_sorted = sorted(ttft);
    MetricsSummary {
        throughput_tok_s: throughput,
        itl_mean_s: itl_mean,
        itl_p50_s: percentile_nearest_rank(&itl_sorted, 50.0),
        itl_p99_s: percentile_nearest_rank(&itl_sorted, 99.0),
        ttft_mean_s: mean(&ttft_sorted),
        ttft_p50_s: percentile_nearest_rank(&ttft_sorted, 50.0),
        ttft_p99_s: percentile_nearest_rank(&ttft_sorted, 99.0),
        ideal_throughput_tok_s: ideal,
        starved: !degenerate && is_starved(throughput, ideal),
        finished_count,
        rejected_count,
        degenerate,
        window_s,
        tokens_in_window,
        itl_percentiles_exact: exact,
    }
}

/// Σ rate × mean output length (plus mean input length when
/// `include_input`), over the workload's adapters.
pub fn ideal_throughput(workload: &WorkloadSpec, include_input: bool) -> Result<f64> {
    let mut total = 0.0;
    for a in &workload.adapters {
        let m = workload.lengths_for(a).moments()?;
        let per_request = m.mean_output + if include_input { m.mean_input } else { 0.0 };
        total += a.rate * per_request;
    }
    Ok(total)
}

/// Ideal throughput less the token rate of rejected requests.
pub fn ideal_excluding_rejected(
    workload: &WorkloadSpec,
    include_input: bool,
    records: &[RequestRecord],
    window_s: f64,
) -> Result<f64> {
    let base = ideal_throughput(workload, include_input)?;
    if window_s <= 0.0 {
        return Ok(base);
    }
    let rejected: u64 = records
        .iter()
        .filter(|r| r.status == Phase::Rejected)
        .map(|r| r.output_tokens as u64 + if include_input { r.input_tokens as u64 } else { 0 })
        .sum();
    Ok((base - rejected as f64 / window_s).max(0.0))
}

/// Recomputes the summary of a simulation result from its request records.
pub fn compute_metrics(result: &SimulationResult, workload: &WorkloadSpec) -> Result<MetricsSummary> {
    let include_input = result.config.ideal_includes_input;
    let ideal = ideal_excluding_rejected(workload, include_input, &result.requests, result.window_s)?;
    let recorded = result
        .requests
        .iter()
        .all(|r| r.token_times_s.len() == r.tokens_generated as usize);
    let tokens = if recorded {
        result
            .requests
            .iter()
            .flat_map(|r| &r.token_times_s)
            .filter(|&&t| t <= result.window_s)
            .count() as u64
    } else {
        result.tokens_in_window
    };
    Ok(summarize(&result.requests, tokens, result.window_s, ideal))
}

/// Symmetric mean absolute percentage error, in percent.
pub fn smape(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::validation(
            "predicted",
            format!("length {} differs from actual length {}", predicted.len(), actual.len()),
        ));
    }
    if predicted.is_empty() {
        return Err(Error::validation("predicted", "series are empty"));
    }
    let total: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(&p, &a)| {
            let denom = (p.abs() + a.abs()) / 2.0;
            if denom == 0.0 {
                0.0
            } else {
                // Rounding can push opposite-sign pairs just past 200.
                (100.0 * (p - a).abs() / denom).min(200.0)
            }
        })
        .sum();
    Ok(total / predicted.len() as f64)
}

/// One request of an externally measured serving run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub adapter_id: u32,
    pub arrival_s: f64,
    pub first_token_s: f64,
    pub token_times_s: Vec<f64>,
}

/// A measured run: either a bare array of records, or records with an
/// explicit measurement window `[start_s, start_s + window_s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RealTrace {
    Windowed {
        window_s: f64,
        #[serde(default)]
        start_s: f64,
        requests: Vec<TraceRecord>,
    },
    Bare(Vec<TraceRecord>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub throughput_tok_s: f64,
    pub itl_mean_s: f64,
    pub ttft_mean_s: f64,
}

impl From<&MetricsSummary> for ScenarioMetrics {
    fn from(m: &MetricsSummary) -> Self {
        ScenarioMetrics {
            throughput_tok_s: m.throughput_tok_s,
            itl_mean_s: m.itl_mean_s,
            ttft_mean_s: m.ttft_mean_s,
        }
    }
}

impl RealTrace {
    /// Without an explicit window, the window runs from the first arrival to
    /// the last emitted token.
    pub fn scenario_metrics(&self) -> Result<ScenarioMetrics> {
        let (records, window, start) = match self {
            RealTrace::Windowed {
                window_s,
                start_s,
                requests,
            } => (requests, Some(*window_s), Some(*start_s)),
            RealTrace::Bare(r) => (r, None, None),
        };
        if records.is_empty() {
            return Err(Error::validation("requests", "trace has no requests"));
        }
        let start =
            start.unwrap_or_else(|| records.iter().map(|r| r.arrival_s).fold(f64::INFINITY, f64::min));
        for (i, r) in records.iter().enumerate() {
            if r.first_token_s < r.arrival_s {
                return Err(Error::validation(
                    format!("[{i}].first_token_s"),
                    "earlier than arrival_s",
                ));
            }
        }
        let end = records
            .iter()
            .flat_map(|r| r.token_times_s.iter().copied())
            .fold(start, f64::max);
        let window = window.unwrap_or(end - start);
        if window <= 0.0 {
            return Err(Error::validation("window_s", "must be positive"));
        }
        let tokens = records
            .iter()
            .flat_map(|r| &r.token_times_s)
            .filter(|&&t| t - start <= window)
            .count();
        let itl: Vec<f64> = records
            .iter()
            .flat_map(|r| r.token_times_s.windows(2).map(|w| w[1] - w[0]))
            .collect();
        let ttft: Vec<f64> = records.iter().map(|r| r.first_token_s - r.arrival_s).collect();
        Ok(ScenarioMetrics {
            throughput_tok_s: tokens as f64 / window,
            itl_mean_s: mean(&itl),
            ttft_mean_s: mean(&ttft),
        })
    }

    pub fn from_path(path: &Path) -> Result<RealTrace> {
        crate::io::read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub twin: ScenarioMetrics,
    pub real: ScenarioMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenarios: Vec<ScenarioRow>,
    pub smape_throughput: f64,
    pub smape_itl: f64,
    pub smape_ttft: f64,
}

/// SMAPE per metric across scenarios matched by key.
pub fn compare_traces(
    twin: &BTreeMap<String, ScenarioMetrics>,
    real: &BTreeMap<String, ScenarioMetrics>,
) -> Result<ComparisonReport> {
    let only_twin: Vec<&str> = twin.keys().filter(|k| !real.contains_key(*k)).map(|k| k.as_str()).collect();
    let only_real: Vec<&str> = real.keys().filter(|k| !twin.contains_key(*k)).map(|k| k.as_str()).collect();
    if !only_twin.is_empty() || !only_real.is_empty() {
        return Err(Error::validation(
            "scenarios",
            format!("unmatched scenarios: twin only {only_twin:?}, real only {only_real:?}"),
        ));
    }
    let scenarios: Vec<ScenarioRow> = twin
        .iter()
        .map(|(k, t)| ScenarioRow {
            scenario: k.clone(),
            twin: *t,
            real: real[k],
        })
        .collect();
    let series = |f: fn(&ScenarioMetrics) -> f64| -> Result<f64> {
        let p: Vec<f64> = scenarios.iter().map(|s| f(&s.twin)).collect();
        let a: Vec<f64> = scenarios.iter().map(|s| f(&s.real)).collect();
        smape(&p, &a)
    };
    Ok(ComparisonReport {
        smape_throughput: series(|m| m.throughput_tok_s)?,
        smape_itl: series(|m| m.itl_mean_s)?,
        smape_ttft: series(|m| m.ttft_mean_s)?,
        scenarios,
    })
}

impl ComparisonReport {
    pub fn to_table(&self) -> String {
        let w = self
            .scenarios
            .iter()
            .map(|s| s.scenario.len())
            .max()
            .unwrap_or(0)
            .max("scenario".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<w$}  {:>14} {:>14}  {:>12} {:>12}  {:>12} {:>12}",
            "scenario", "twin tok/s", "real tok/s", "twin ITL s", "real ITL s", "twin TTFT s", "real TTFT s"
        );
        for s in &self.scenarios {
            let _ = writeln!(
                out,
                "{:<w$}  {:>14.3} {:>14.3}  {:>12.6} {:>12.6}  {:>12.6} {:>12.6}",
                s.scenario,
                s.twin.throughput_tok_s,
                s.real.throughput_tok_s,
                s.twin.itl_mean_s,
                s.real.itl_mean_s,
                s.twin.ttft_mean_s,
                s.real.ttft_mean_s
            );
        }
        let _ = writeln!(
            out,
            "SMAPE %  throughput {:.2}  ITL {:.2}  TTFT {:.2}",
            self.smape_throughput, self.smape_itl, self.smape_ttft
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{AdapterSpec, LengthSpec};

    fn record(id: u64, arrival: f64, times: &[f64], output: u32) -> RequestRecord {
        RequestRecord {
            request_id: id,
            adapter_id: 0,
            arrival_s: arrival,
            input_tokens: 10,
            output_tokens: output,
            tokens_generated: times.len() as u32,
            status: if times.len() as u32 == output {
                Phase::Finished
            } else {
                Phase::Waiting
            },
            first_token_s: times.first().copied(),
            last_token_s: times.last().copied(),
            completion_s: (times.len() as u32 == output).then(|| *times.last().unwrap()),
            preemption_count: 0,
            token_times_s: times.to_vec(),
        }
    }

    #[test]
    fn single_request_example() {
        let r = record(0, 0.0, &[0.1, 0.2, 0.3], 3);
        let m = summarize(&[r], 3, 0.3, 10.0);
        assert!((m.ttft_mean_s - 0.1).abs() < 1e-12);
        assert!((m.itl_mean_s - 0.1).abs() < 1e-12);
        assert!((m.throughput_tok_s - 10.0).abs() < 1e-9);
        assert_eq!(m.finished_count, 1);
        assert!(!m.starved);
    }

    #[test]
    fn identical_requests_have_flat_percentiles() {
        let rs: Vec<_> = (0..7).map(|i| record(i, i as f64, &[i as f64 + 0.5, i as f64 + 0.75], 2)).collect();
        let m = summarize(&rs, 14, 10.0, 1.0);
        assert_eq!(m.itl_p50_s, m.itl_mean_s);
        assert_eq!(m.itl_p99_s, m.itl_mean_s);
        assert_eq!(m.ttft_p50_s, m.ttft_mean_s);
        assert_eq!(m.ttft_p99_s, m.ttft_mean_s);
    }

    #[test]
    fn staggered_three_requests() {
        // Computed by hand:
        // r0 arrives 0.0, tokens 0.2 0.5 0.6   -> ttft 0.2, gaps 0.3 0.1
        // r1 arrives 0.1, tokens 0.5 0.6       -> ttft 0.4, gap 0.1
        // r2 arrives 0.4, tokens 0.6 0.9 1.4 2.0 (window 1.5) -> ttft 0.2, gaps 0.3 0.5 0.6
        let rs = vec![
            record(0, 0.0, &[0.2, 0.5, 0.6], 3),
            record(1, 0.1, &[0.5, 0.6], 2),
            record(2, 0.4, &[0.6, 0.9, 1.4, 2.0], 4),
        ];
        let m = summarize(&rs, 8, 1.5, 6.0);
        assert!((m.ttft_mean_s - 0.8 / 3.0).abs() < 1e-12);
        assert!((m.ttft_p50_s - 0.2).abs() < 1e-12);
        assert!((m.ttft_p99_s - 0.4).abs() < 1e-12);
        // gaps sorted: .1 .1 .3 .3 .5 .6 -> mean 1.9/6, p50 = 3rd = .3, p99 = .6
        assert!((m.itl_mean_s - 1.9 / 6.0).abs() < 1e-12);
        assert!((m.itl_p50_s - 0.3).abs() < 1e-12);
        assert!((m.itl_p99_s - 0.6).abs() < 1e-12);
        assert!((m.throughput_tok_s - 8.0 / 1.5).abs() < 1e-12);
        // 5.333 < 0.9 * 6 = 5.4
        assert!(m.starved);
    }

    #[test]
    fn itl_mean_without_token_times_is_exact() {
        let mut rs = vec![
            record(0, 0.0, &[0.2, 0.5, 0.6], 3),
            record(1, 0.1, &[0.5, 0.6], 2),
            record(2, 0.4, &[0.6, 0.9, 1.4, 2.0], 4),
        ];
        let exact = summarize(&rs, 8, 1.5, 6.0);
        for r in &mut rs {
            r.token_times_s.clear();
        }
        let m = summarize(&rs, 8, 1.5, 6.0);
        assert!((m.itl_mean_s - exact.itl_mean_s).abs() < 1e-12);
        assert!(!m.itl_percentiles_exact);
        assert_eq!(m.ttft_mean_s, exact.ttft_mean_s);
    }

    #[test]
    fn empty_is_degenerate() {
        let m = summarize(&[], 0, 10.0, 5.0);
        assert!(m.degenerate);
        assert!(!m.starved);
        assert_eq!(m.finished_count, 0);
    }

    #[test]
    fn starvation_threshold_edges() {
        let ideal = 100.0;
        assert!(!is_starved(90.0 + 1e-6, ideal));
        assert!(is_starved(90.0 - 1e-6, ideal));
    }

    #[test]
    fn nearest_rank() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_nearest_rank(&xs, 50.0), 2.0);
        assert_eq!(percentile_nearest_rank(&xs, 99.0), 4.0);
        assert_eq!(percentile_nearest_rank(&xs, 0.0), 1.0);
    }

    fn workload(rates: &[f64], output: f64) -> WorkloadSpec {
        WorkloadSpec {
            adapters: rates
                .iter()
                .enumerate()
                .map(|(i, &r)| AdapterSpec::new(i as u32, 8, r))
                .collect(),
            lengths: LengthSpec::mean(250.0, 0.0, output, 0.0),
            duration_s: 60.0,
            seed: 1,
        }
    }

    #[test]
    fn ideal_throughput_examples() {
        assert!((ideal_throughput(&workload(&[0.1], 200.0), false).unwrap() - 20.0).abs() < 1e-12);
        let three = ideal_throughput(&workload(&[0.2, 0.1, 0.05], 231.0), false).unwrap();
        assert!((three - 80.85).abs() < 1e-9);
        assert_eq!(ideal_throughput(&workload(&[], 231.0), false).unwrap(), 0.0);
        let with_input = ideal_throughput(&workload(&[0.1], 200.0), true).unwrap();
        assert!((with_input - 45.0).abs() < 1e-12);
    }

    #[test]
    fn smape_examples() {
        assert_eq!(smape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(smape(&[3.0], &[1.0]).unwrap(), 100.0);
        assert_eq!(smape(&[0.0], &[0.0]).unwrap(), 0.0);
        assert!(smape(&[1.0], &[1.0, 2.0]).is_err());
        assert!(smape(&[], &[]).is_err());
        let s = smape(&[105.0, 210.0], &[100.0, 200.0]).unwrap();
        assert!((s - 100.0 * 0.05 / 1.025).abs() < 1e-9);
    }

    #[test]
    fn comparison_report() {
        let m = ScenarioMetrics {
            throughput_tok_s: 100.0,
            itl_mean_s: 0.02,
            ttft_mean_s: 0.3,
        };
        let twin = BTreeMap::from([("a".to_string(), m), ("b".to_string(), m)]);
        let rep = compare_traces(&twin, &twin.clone()).unwrap();
        assert_eq!(rep.smape_throughput, 0.0);
        assert!(rep.to_table().contains("SMAPE"));

        let real = BTreeMap::from([("a".to_string(), m), ("c".to_string(), m)]);
        let err = compare_traces(&twin, &real).unwrap_err().to_string();
        assert!(err.contains("\"b\"") && err.contains("\"c\""), "{err}");
    }

    #[test]
    fn trace_ingestion() {
        let json = r#"[
            {"adapter_id": 0, "arrival_s": 0.0, "first_token_s": 0.1, "token_times_s": [0.1, 0.2, 0.3]},
            {"adapter_id": 1, "arrival_s": 0.5, "first_token_s": 0.8, "token_times_s": [0.8, 1.0]}
        ]"#;
        let t: RealTrace = crate::io::from_json_str(json).unwrap();
        let m = t.scenario_metrics().unwrap();
        assert!((m.throughput_tok_s - 5.0).abs() < 1e-12);
        assert!((m.itl_mean_s - 0.4 / 3.0).abs() < 1e-12);
        assert!((m.ttft_mean_s - 0.2).abs() < 1e-12);

        let windowed = r#"{"window_s": 0.5, "requests": [
            {"adapter_id": 0, "arrival_s": 0.0, "first_token_s": 0.1, "token_times_s": [0.1, 0.2, 0.6]}
        ]}"#;
        let t: RealTrace = crate::io::from_json_str(windowed).unwrap();
        assert!((t.scenario_metrics().unwrap().throughput_tok_s - 4.0).abs() < 1e-12);
    }
}
