//! Placement sweeps over (served adapters N, slots G), workload feature
//! encoding, and dataset generation.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ServerConfig;
use crate::engine::{run_simulation, SimMode};
use crate::error::{Error, Result};
use crate::workload::{AdapterSpec, LengthMode, LengthSpec, WorkloadSpec};

/// One (rank, rate) pair of a condition's adapter mix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub rank: u32,
    pub rate: f64,
}

/// A workload condition: the adapter mix and the request lengths shared by
/// all adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub templates: Vec<Template>,
    pub lengths: LengthSpec,
}

impl Condition {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::validation("templates", "must not be empty"));
        }
        for (i, t) in self.templates.iter().enumerate() {
            if !(t.rate.is_finite() && t.rate >= 0.0) {
                return Err(Error::validation(format!("templates[{i}].rate"), "must be finite and >= 0"));
            }
        }
        self.lengths.validate("lengths")
    }

    /// N adapters with (rank, rate) assigned round-robin from the templates.
    pub fn instantiate(&self, n: usize, duration_s: f64, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            adapters: (0..n)
                .map(|i| {
                    let t = self.templates[i % self.templates.len()];
                    AdapterSpec::new(i as u32, t.rank, t.rate)
                })
                .collect(),
            lengths: self.lengths.clone(),
            duration_s,
            seed,
        }
    }

    /// Stable identifier of the condition under a sweep setting.
    pub fn hash(&self, duration_s: f64, seed: u64) -> String {
        let canon = serde_json::json!({
            "condition": self,
            "duration_s": duration_s,
            "seed": seed,
        });
        let digest = Sha256::digest(canon.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Slots tried for each N.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GPolicy {
    /// {N, N/2, N/4, 8}, clamped to [1, N].
    Geometric,
    /// Every value of the N grid up to N.
    Full,
    /// G = N only.
    Equal,
}

pub const DEFAULT_N_GRID: [usize; 17] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256, 384];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    pub n_grid: Vec<usize>,
    pub g_policy: GPolicy,
    /// Once a non-starved point exists, stop after this many consecutive N
    /// values without improving on it; `None` sweeps the whole grid.
    pub early_exit: Option<usize>,
    pub duration_s: f64,
    pub seed: u64,
    pub mode: SimMode,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            n_grid: DEFAULT_N_GRID.to_vec(),
            g_policy: GPolicy::Geometric,
            early_exit: Some(3),
            duration_s: 600.0,
            seed: 0,
            mode: SimMode::Full,
        }
    }
}

impl SweepOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::validation("n_grid", "must not be empty"));
        }
        if self.n_grid.contains(&0) || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("n_grid", "must be strictly ascending and >= 1"));
        }
        if self.early_exit == Some(0) {
            return Err(Error::validation("early_exit", "must be >= 1"));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::validation("duration_s", "must be positive"));
        }
        Ok(())
    }

    pub fn g_values(&self, n: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = match self.g_policy {
            GPolicy::Geometric => [n, n / 2, n / 4, 8].into_iter().map(|g| g.clamp(1, n)).collect(),
            GPolicy::Full => self.n_grid.iter().copied().filter(|&g| g <= n).chain([n]).collect(),
            GPolicy::Equal => [n].into(),
        };
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointStatus {
    Evaluated,
    /// No KV memory left after the slots; counted as starved.
    Infeasible,
    /// The simulation failed; counted as starved.
    Failed,
    /// Not run because of the early exit.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontierPoint {
    pub n: usize,
    pub g: usize,
    pub throughput_tok_s: f64,
    pub ideal_throughput_tok_s: f64,
    pub starved: bool,
    pub status: PointStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementResult {
    pub max_throughput_tok_s: f64,
    pub n_star: usize,
    pub g_star: usize,
    /// Every evaluated point starved; the optimum is reported at the
    /// smallest N.
    pub all_starved: bool,
    /// The optimum is the largest N of the grid, so the true optimum may lie
    /// beyond it.
    pub frontier_open: bool,
    pub frontier: Vec<FrontierPoint>,
}

/// Simulates one (N, G) point of a condition.
pub fn evaluate_point(
    condition: &Condition,
    base: &ServerConfig,
    opts: &SweepOptions,
    n: usize,
    g: usize,
) -> FrontierPoint {
    let workload = condition.instantiate(n, opts.duration_s, opts.seed);
    let mut cfg = base.with_slots(g);
    cfg.sim.drain = false;
    cfg.sim.record_token_times = false;
    cfg.sim.trace_iterations = false;
    let ideal = crate::metrics::ideal_throughput(&workload, cfg.ideal_includes_input).unwrap_or(0.0);
    let failed = |status, error: Option<String>| FrontierPoint {
        n,
        g,
        throughput_tok_s: 0.0,
        ideal_throughput_tok_s: ideal,
        starved: true,
        status,
        error,
    };
    match run_simulation(&workload, &cfg, opts.mode) {
        Ok(r) => FrontierPoint {
            n,
            g,
            throughput_tok_s: r.metrics.throughput_tok_s,
            ideal_throughput_tok_s: r.metrics.ideal_throughput_tok_s,
            starved: r.metrics.starved || r.metrics.degenerate || r.truncated,
            status: PointStatus::Evaluated,
            error: None,
        },
        Err(Error::Config(_)) => failed(PointStatus::Infeasible, None),
        Err(e) => failed(PointStatus::Failed, Some(e.to_string())),
    }
}

/// Finds the non-starved (N, G) with the highest throughput. Points of one
/// N run in parallel; ties go to the smaller N, then the smaller G.
pub fn sweep_optimal(condition: &Condition, base: &ServerConfig, opts: &SweepOptions) -> Result<PlacementResult> {
    condition.validate()?;
    opts.validate()?;
    base.validate()?;
    let mut frontier: Vec<FrontierPoint> = Vec::new();
    let mut best: Option<(f64, usize, usize)> = None;
    let mut stale = 0usize;
    for (i, &n) in opts.n_grid.iter().enumerate() {
        if best.is_some() && opts.early_exit.is_some_and(|k| stale >= k) {
            for &n in &opts.n_grid[i..] {
                for g in opts.g_values(n) {
                    frontier.push(FrontierPoint {
                        n,
                        g,
                        throughput_tok_s: 0.0,
                        ideal_throughput_tok_s: 0.0,
                        starved: true,
                        status: PointStatus::Skipped,
                        error: None,
                    });
                }
            }
            break;
        }
        let points: Vec<FrontierPoint> = opts
            .g_values(n)
            .into_par_iter()
            .map(|g| evaluate_point(condition, base, opts, n, g))
            .collect();
        let mut improved = false;
        for p in &points {
            if !p.starved && best.is_none_or(|b| p.throughput_tok_s > b.0) {
                best = Some((p.throughput_tok_s, p.n, p.g));
                improved = true;
            }
        }
        stale = if improved { 0 } else { stale + 1 };
        frontier.extend(points);
    }

    let last_n = *opts.n_grid.last().expect("validated non-empty");
    Ok(match best {
        Some((thr, n, g)) => PlacementResult {
            max_throughput_tok_s: thr,
            n_star: n,
            g_star: g,
            all_starved: false,
            frontier_open: n == last_n,
            frontier,
        },
        None => {
            let n0 = opts.n_grid[0];
            let p = frontier
                .iter()
                .filter(|p| p.n == n0)
                .fold(None::<&FrontierPoint>, |acc, p| match acc {
                    Some(a) if a.throughput_tok_s >= p.throughput_tok_s => Some(a),
                    _ => Some(p),
                })
                .expect("first N is always evaluated");
            PlacementResult {
                max_throughput_tok_s: p.throughput_tok_s,
                n_star: n0,
                g_star: p.g,
                all_starved: true,
                frontier_open: false,
                frontier,
            }
        }
    })
}

pub const FEATURE_NAMES: [&str; 16] = [
    "rate_max",
    "rate_min",
    "rate_mean",
    "rate_std",
    "rank_max",
    "rank_min",
    "rank_mean",
    "rank_std",
    "input_len_max",
    "input_len_min",
    "input_len_mean",
    "input_len_std",
    "output_len_max",
    "output_len_min",
    "output_len_mean",
    "output_len_std",
];

/// Max, min, mean and population std of each varying workload
/// characteristic, in [`FEATURE_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadFeatures(pub [f64; 16]);

impl WorkloadFeatures {
    pub fn names() -> &'static [&'static str; 16] {
        &FEATURE_NAMES
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }
}

fn stats(xs: impl IntoIterator<Item = f64>) -> [f64; 4] {
    let xs: Vec<f64> = xs.into_iter().collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    [max, min, mean, var.sqrt()]
}

/// Encodes a condition as its 16 features. Full-mode lengths use the
/// statistics of the trace; mean-mode lengths report the mean as max and
/// min, and the given std.
pub fn encode_workload(condition: &Condition) -> Result<WorkloadFeatures> {
    condition.validate()?;
    let mut f = [0.0; 16];
    f[0..4].copy_from_slice(&stats(condition.templates.iter().map(|t| t.rate)));
    f[4..8].copy_from_slice(&stats(condition.templates.iter().map(|t| t.rank as f64)));
    let l = &condition.lengths;
    match l.mode {
        LengthMode::Full => {
            let pairs = l.full_lengths.as_deref().unwrap_or_default();
            f[8..12].copy_from_slice(&stats(pairs.iter().map(|p| p.0 as f64)));
            f[12..16].copy_from_slice(&stats(pairs.iter().map(|p| p.1 as f64)));
        }
        LengthMode::Mean => {
            let m = l.moments()?;
            f[8..12].copy_from_slice(&[m.mean_input, m.mean_input, m.mean_input, m.std_input]);
            f[12..16].copy_from_slice(&[m.mean_output, m.mean_output, m.mean_output, m.std_output]);
        }
    }
    Ok(WorkloadFeatures(f))
}

pub const RATE_SET: [f64; 10] = [3.2, 1.6, 0.8, 0.4, 0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125];
pub const RANK_SET: [u32; 3] = [8, 16, 32];

/// Conditions formed from every size-`k` combination of rates and ranks,
/// paired position by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionGrid {
    pub rates: Vec<f64>,
    pub ranks: Vec<u32>,
    pub k: usize,
    pub rate_repetition: bool,
    pub rank_repetition: bool,
    pub lengths: LengthSpec,
}

impl Default for ConditionGrid {
    fn default() -> Self {
        ConditionGrid {
            rates: RATE_SET.to_vec(),
            ranks: RANK_SET.to_vec(),
            k: 3,
            rate_repetition: false,
            rank_repetition: true,
            lengths: LengthSpec::constant(250, 231),
        }
    }
}

fn combinations(n: usize, k: usize, repetition: bool) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, rep: bool, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(if rep { i } else { i + 1 }, n, k, rep, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k > 0 {
        rec(0, n, k, repetition, &mut Vec::new(), &mut out);
    }
    out
}

impl ConditionGrid {
    pub fn conditions(&self) -> Vec<Condition> {
        let rate_combos = combinations(self.rates.len(), self.k, self.rate_repetition);
        let rank_combos = combinations(self.ranks.len(), self.k, self.rank_repetition);
        let mut out = Vec::with_capacity(rate_combos.len() * rank_combos.len());
        for rc in &rate_combos {
            for kc in &rank_combos {
                out.push(Condition {
                    templates: rc
                        .iter()
                        .zip(kc)
                        .map(|(&r, &k)| Template {
                            rank: self.ranks[k],
                            rate: self.rates[r],
                        })
                        .collect(),
                    lengths: self.lengths.clone(),
                });
            }
        }
        out
    }
}

pub const TARGET_NAMES: [&str; 3] = ["max_throughput_tok_s", "n_star", "g_star"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub features: WorkloadFeatures,
    pub targets: [f64; 3],
    pub condition_hash: String,
    pub duration_s: f64,
    pub seed: u64,
}

impl DatasetRow {
    /// Deterministic split by condition hash: the row is held out when the
    /// hash falls in the first `test_fraction` of the hash space.
    pub fn is_test(&self, test_fraction: f64) -> bool {
        let v = u64::from_str_radix(&self.condition_hash, 16).unwrap_or(0);
        ((v % 10_000) as f64) < test_fraction * 10_000.0
    }
}

fn dataset_header() -> Vec<&'static str> {
    FEATURE_NAMES
        .iter()
        .chain(TARGET_NAMES.iter())
        .chain(["condition_hash", "duration_s", "seed"].iter())
        .copied()
        .collect()
}

fn row_record(row: &DatasetRow) -> Vec<String> {
    row.features
        .0
        .iter()
        .chain(row.targets.iter())
        .map(|v| v.to_string())
        .chain([row.condition_hash.clone(), row.duration_s.to_string(), row.seed.to_string()])
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::validation(format!("{}: column {name}", path.display()), "missing"))
    };
    let feat_cols = FEATURE_NAMES.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let target_cols = TARGET_NAMES.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let (hash_col, dur_col, seed_col) = (col("condition_hash")?, col("duration_s")?, col("seed")?);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec[c].parse::<f64>().map_err(|_| {
                Error::validation(
                    format!("{} row {} column {}", path.display(), line + 1, &headers[c]),
                    format!("not a number: {:?}", &rec[c]),
                )
            })
        };
        let mut f = [0.0; 16];
        for (i, &c) in feat_cols.iter().enumerate() {
            f[i] = num(c)?;
        }
        let mut t = [0.0; 3];
        for (i, &c) in target_cols.iter().enumerate() {
            t[i] = num(c)?;
        }
        rows.push(DatasetRow {
            features: WorkloadFeatures(f),
            targets: t,
            condition_hash: rec[hash_col].to_string(),
            duration_s: num(dur_col)?,
            seed: rec[seed_col].parse().map_err(|_| {
                Error::validation(format!("{} row {} column seed", path.display(), line + 1), "not an integer")
            })?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub conditions: usize,
    pub already_present: usize,
    pub written: usize,
    pub failed: Vec<String>,
}

/// Sweeps every condition and appends one row per condition to `out`.
/// Conditions whose hash is already in `out` are skipped, so an interrupted
/// run can be resumed. Rows are written in condition order.
pub fn generate_dataset(
    conditions: &[Condition],
    base: &ServerConfig,
    opts: &SweepOptions,
    out: &Path,
    mut progress: impl FnMut(usize, usize),
) -> Result<DatasetSummary> {
    let done: BTreeSet<String> = if out.exists() && std::fs::metadata(out).map_err(|e| Error::io(out, e))?.len() > 0 {
        read_dataset(out)?.into_iter().map(|r| r.condition_hash).collect()
    } else {
        BTreeSet::new()
    };
    let todo: Vec<&Condition> = conditions
        .iter()
        .filter(|c| !done.contains(&c.hash(opts.duration_s, opts.seed)))
        .collect();
    let mut summary = DatasetSummary {
        conditions: conditions.len(),
        already_present: conditions.len() - todo.len(),
        ..Default::default()
    };

    let fresh = done.is_empty();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out)
        .map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(dataset_header())?;
        w.flush().map_err(|e| Error::io(out, e))?;
    }
    let chunk = (rayon::current_num_threads() * 4).max(1);
    for batch in todo.chunks(chunk) {
        let rows: Vec<Result<DatasetRow>> = batch
            .par_iter()
            .map(|c| {
                let p = sweep_optimal(c, base, opts)?;
                Ok(DatasetRow {
                    features: encode_workload(c)?,
                    targets: [p.max_throughput_tok_s, p.n_star as f64, p.g_star as f64],
                    condition_hash: c.hash(opts.duration_s, opts.seed),
                    duration_s: opts.duration_s,
                    seed: opts.seed,
                })
            })
            .collect();
        for (c, row) in batch.iter().zip(rows) {
            match row {
                Ok(row) => {
                    w.write_record(row_record(&row))?;
                    summary.written += 1;
                }
                Err(e) => summary.failed.push(format!("{}: {e}", c.hash(opts.duration_s, opts.seed))),
            }
        }
        w.flush().map_err(|e| Error::io(out, e))?;
        progress(summary.written + summary.failed.len(), todo.len());
    }
    let mut f = w.into_inner().map_err(|e| Error::io(out, e.into_error()))?;
    f.flush().map_err(|e| Error::io(out, e))?;
    Ok(summary)
}
