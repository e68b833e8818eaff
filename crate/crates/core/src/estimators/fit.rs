//! Least-squares fitting of estimator coefficients from benchmark CSVs.
//!
//! Every benchmark file is a headed CSV, one measurement per row. Expected
//! columns per estimator:
//!
//! | estimator | columns |
//! |-----------|---------|
//! | sched     | `r_running,r_waiting,slots,served_adapters,latency_s` |
//! | model     | `r_running,latency_s` |
//! | adapters  | `a_running,multiplier` (rows with `a_running = 0` ignored) |
//! | load      | `rank,source,latency_s` (`source` is `cpu` or `disk`) |
//! | memory    | `slots,rank,kv_capacity_tokens` |

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{LoadLatencyTable, MemoryModel};
use crate::error::{Error, Result};

/// Relative pivot size below which a column counts as linearly dependent.
const RANK_TOL: f64 = 1e-10;

/// Ordinary least squares via Householder QR on column-normalized features.
///
/// `feature_names` labels the columns for diagnostics; a rank-deficient
/// design names the dependent feature and the features it is collinear with.
pub fn fit_linear(samples: &[(Vec<f64>, f64)], feature_names: &[&str]) -> Result<Vec<f64>> {
    let n = feature_names.len();
    if n == 0 {
        return Err(Error::Fit("no features".into()));
    }
    if let Some((i, _)) = samples.iter().enumerate().find(|(_, s)| s.0.len() != n) {
        return Err(Error::Fit(format!(
            "sample {i} has {} features, expected {n}",
            samples[i].0.len()
        )));
    }
    let m = samples.len();
    if m < n {
        return Err(Error::Fit(format!(
            "{m} samples cannot determine {n} coefficients"
        )));
    }
    let mut x = DMatrix::from_fn(m, n, |i, j| samples[i].0[j]);
    let y = DVector::from_iterator(m, samples.iter().map(|s| s.1));

    let mut scale = vec![1.0; n];
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = x.column(j).norm();
        if norm == 0.0 {
            return Err(Error::Fit(format!(
                "feature `{}` is identically zero",
                feature_names[j]
            )));
        }
        *s = norm;
        x.column_mut(j).scale_mut(1.0 / norm);
    }

    let qr = x.qr();
    let r = qr.r();
    let max_diag = (0..n).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    for j in 0..n {
        if r[(j, j)].abs() <= RANK_TOL * max_diag.max(1.0) {
            return Err(Error::Fit(collinearity_message(&r, j, feature_names)));
        }
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Fit("singular triangular system".into()))?;
    Ok((0..n).map(|j| beta[j] / scale[j]).collect())
}

fn collinearity_message(r: &DMatrix<f64>, j: usize, names: &[&str]) -> String {
    if j == 0 {
        return format!("feature `{}` carries no information", names[0]);
    }
    let head = r.view((0, 0), (j, j)).into_owned();
    let col = r.view((0, j), (j, 1)).into_owned();
    let partners: Vec<&str> = match head.solve_upper_triangular(&col) {
        Some(c) => (0..j)
            .filter(|&k| c[k].abs() > 1e-8)
            .map(|k| names[k])
            .collect(),
        None => names[..j].to_vec(),
    };
    format!(
        "rank-deficient design: feature `{}` is collinear with [{}]",
        names[j],
        partners.join(", ")
    )
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Add an intercept column to the scheduler fit.
    pub sched_intercept: bool,
}

/// A headed CSV loaded as strings, with typed column access.
#[derive(Debug, Clone)]
pub struct BenchmarkTable {
    pub source: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl BenchmarkTable {
    pub fn from_csv_str(source: &str, text: &str) -> Result<Self> {
        Self::from_reader(source, text.as_bytes())
    }

    fn from_reader<R: std::io::Read>(source: &str, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.iter().map(str::to_owned).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_owned).collect());
        }
        Ok(BenchmarkTable {
            source: source.to_owned(),
            headers,
            rows,
        })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::validation(format!("{}:{name}", self.source), "missing column")
        })
    }

    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row[j].parse::<f64>().map_err(|e| {
                    Error::validation(format!("{}:{name}[{}]", self.source, i + 1), e.to_string())
                })
            })
            .collect()
    }

    pub fn column_str(&self, name: &str) -> Result<Vec<&str>> {
        let j = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[j].as_str()).collect())
    }
}

pub fn read_benchmark_csv(path: &Path) -> Result<BenchmarkTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BenchmarkTable::from_reader(&path.display().to_string(), file)
}

/// Scheduler fit: returns `(k1, k2, k3, intercept)`.
pub fn fit_sched(t: &BenchmarkTable, opts: &FitOptions) -> Result<(f64, f64, f64, f64)> {
    let run = t.column_f64("r_running")?;
    let wait = t.column_f64("r_waiting")?;
    let g = t.column_f64("slots")?;
    let n = t.column_f64("served_adapters")?;
    let lat = t.column_f64("latency_s")?;
    let mut names = vec!["r_running", "r_waiting", "r_waiting*G/N"];
    if opts.sched_intercept {
        names.push("intercept");
    }
    let mut samples = Vec::with_capacity(lat.len());
    for i in 0..lat.len() {
        if g[i] <= 0.0 || n[i] <= 0.0 {
            return Err(Error::validation(
                format!("{}:slots/served_adapters[{}]", t.source, i + 1),
                "must be > 0",
            ));
        }
        let ratio = (g[i] / n[i]).min(1.0);
        let mut f = vec![run[i], wait[i], wait[i] * ratio];
        if opts.sched_intercept {
            f.push(1.0);
        }
        samples.push((f, lat[i]));
    }
    let b = fit_linear(&samples, &names)?;
    Ok((b[0], b[1], b[2], b.get(3).copied().unwrap_or(0.0)))
}

/// Base-model forward pass fit: returns `(k4, k5)`.
pub fn fit_model(t: &BenchmarkTable) -> Result<(f64, f64)> {
    let run = t.column_f64("r_running")?;
    let lat = t.column_f64("latency_s")?;
    let samples: Vec<_> = run.iter().zip(&lat).map(|(&r, &l)| (vec![r, 1.0], l)).collect();
    let b = fit_linear(&samples, &["r_running", "intercept"])?;
    Ok((b[0], b[1]))
}

/// Adapter overhead multiplier fit over batches with at least one adapter:
/// returns `(k6, k7)`.
pub fn fit_adapters(t: &BenchmarkTable) -> Result<(f64, f64)> {
    let a = t.column_f64("a_running")?;
    let mult = t.column_f64("multiplier")?;
    let samples: Vec<_> = a
        .iter()
        .zip(&mult)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &m)| (vec![a, 1.0], m))
        .collect();
    let b = fit_linear(&samples, &["a_running", "intercept"])?;
    Ok((b[0], b[1]))
}

/// Per-rank mean CPU load latency, and the mean disk/CPU ratio over ranks
/// measured both ways (`default_disk_multiplier` when no disk rows exist).
pub fn fit_load(t: &BenchmarkTable, default_disk_multiplier: f64) -> Result<LoadLatencyTable> {
    let rank = t.column_f64("rank")?;
    let source = t.column_str("source")?;
    let lat = t.column_f64("latency_s")?;
    let mut cpu: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut disk: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for i in 0..lat.len() {
        let bucket = match source[i].to_ascii_lowercase().as_str() {
            "cpu" => &mut cpu,
            "disk" => &mut disk,
            other => {
                return Err(Error::validation(
                    format!("{}:source[{}]", t.source, i + 1),
                    format!("expected cpu or disk, got `{other}`"),
                ))
            }
        };
        let e = bucket.entry(rank[i] as u32).or_insert((0.0, 0));
        e.0 += lat[i];
        e.1 += 1;
    }
    let mean = |(s, c): &(f64, usize)| s / *c as f64;
    let cpu_load_seconds: BTreeMap<u32, f64> = cpu.iter().map(|(&r, v)| (r, mean(v))).collect();
    if cpu_load_seconds.is_empty() {
        return Err(Error::Fit(format!("{}: no cpu load measurements", t.source)));
    }
    let ratios: Vec<f64> = disk
        .iter()
        .filter_map(|(r, v)| cpu_load_seconds.get(r).map(|c| mean(v) / c))
        .collect();
    let disk_multiplier = if ratios.is_empty() {
        default_disk_multiplier
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    let table = LoadLatencyTable {
        cpu_load_seconds,
        disk_multiplier,
    };
    table.validate()?;
    Ok(table)
}

/// Fits `capacity = budget - slots * cost(rank)` per rank. The budget is the
/// mean intercept across ranks; costs land in the explicit per-rank table.
pub fn fit_memory(t: &BenchmarkTable, kv_bytes_per_token: f64) -> Result<MemoryModel> {
    let slots = t.column_f64("slots")?;
    let rank = t.column_f64("rank")?;
    let cap = t.column_f64("kv_capacity_tokens")?;
    let mut per_rank: BTreeMap<u32, Vec<(Vec<f64>, f64)>> = BTreeMap::new();
    for i in 0..cap.len() {
        per_rank
            .entry(rank[i] as u32)
            .or_default()
            .push((vec![slots[i], 1.0], cap[i]));
    }
    if per_rank.is_empty() {
        return Err(Error::Fit(format!("{}: no memory measurements", t.source)));
    }
    let mut intercepts = Vec::new();
    let mut costs = BTreeMap::new();
    for (r, samples) in &per_rank {
        let b = fit_linear(samples, &["slots", "intercept"])?;
        intercepts.push(b[1]);
        costs.insert(*r, (-b[0]).round().max(1.0) as u64);
    }
    let budget = (intercepts.iter().sum::<f64>() / intercepts.len() as f64).round();
    let rank8 = costs
        .get(&8)
        .map(|&c| c as f64)
        .unwrap_or_else(|| {
            let (&r, &c) = costs.iter().next().expect("non-empty");
            c as f64 * 8.0 / r as f64
        });
    let mm = MemoryModel {
        total_kv_budget: budget.max(0.0) as u64,
        kv_bytes_per_token,
        slot_cost_rank8_tokens: rank8,
        slot_cost_tokens: costs,
    };
    mm.validate()?;
    Ok(mm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn two_point_line() {
        let s = vec![(vec![0.0, 1.0], 0.02), (vec![100.0, 1.0], 0.03)];
        let b = fit_linear(&s, &["r", "1"]).unwrap();
        assert!(rel(b[0], 1e-4) < 1e-9 && rel(b[1], 0.02) < 1e-9, "{b:?}");
    }

    #[test]
    fn noiseless_recovery() {
        let s: Vec<_> = (1..=50)
            .map(|r| (vec![r as f64, 1.0], 1e-4 * r as f64 + 0.02))
            .collect();
        let b = fit_linear(&s, &["r", "1"]).unwrap();
        assert!(rel(b[0], 1e-4) < 1e-9 && rel(b[1], 0.02) < 1e-9, "{b:?}");
    }

    #[test]
    fn small_noise_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 1e-5).unwrap();
        let s: Vec<_> = (1..=50)
            .map(|r| {
                let y = 1e-4 * r as f64 + 0.02 + noise.sample(&mut rng);
                (vec![r as f64, 1.0], y)
            })
            .collect();
        let b = fit_linear(&s, &["r", "1"]).unwrap();
        assert!(rel(b[0], 1e-4) < 0.05 && rel(b[1], 0.02) < 0.05, "{b:?}");
    }

    #[test]
    fn identical_samples_are_singular() {
        let s = vec![(vec![3.0, 1.0], 0.1), (vec![3.0, 1.0], 0.1)];
        let err = fit_linear(&s, &["r_running", "intercept"]).unwrap_err().to_string();
        assert!(err.contains("intercept") && err.contains("r_running"), "{err}");
    }

    #[test]
    fn collinear_feature_is_named() {
        let s: Vec<_> = (0..10)
            .map(|i| {
                let x = i as f64;
                (vec![x, 1.0, 2.0 * x + 3.0], x)
            })
            .collect();
        let err = fit_linear(&s, &["a", "b", "c"]).unwrap_err().to_string();
        assert!(err.contains("`c`") && err.contains("a, b"), "{err}");
    }

    #[test]
    fn sched_fit_round_trip() {
        let (k1, k2, k3) = (3e-5, 1.5e-5, 4e-5);
        let mut csv = String::from("r_running,r_waiting,slots,served_adapters,latency_s\n");
        for r in [1, 8, 32, 100] {
            for w in [0, 5, 50, 400] {
                for (g, n) in [(8, 8), (4, 16), (1, 3), (32, 64)] {
                    let ratio = (g as f64 / n as f64).min(1.0);
                    let y = k1 * r as f64 + k2 * w as f64 + k3 * w as f64 * ratio;
                    csv.push_str(&format!("{r},{w},{g},{n},{y}\n"));
                }
            }
        }
        let t = BenchmarkTable::from_csv_str("sched.csv", &csv).unwrap();
        let (a, b, c, d) = fit_sched(&t, &FitOptions::default()).unwrap();
        assert!(rel(a, k1) < 1e-9 && rel(b, k2) < 1e-9 && rel(c, k3) < 1e-9);
        assert_eq!(d, 0.0);
        let (_, _, _, d) = fit_sched(&t, &FitOptions { sched_intercept: true }).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn adapters_fit_skips_zero_rows() {
        let mut csv = String::from("a_running,multiplier\n0,1.0\n");
        for a in 1..=20 {
            csv.push_str(&format!("{a},{}\n", 0.005 * a as f64 + 1.1));
        }
        let t = BenchmarkTable::from_csv_str("adapters.csv", &csv).unwrap();
        let (k6, k7) = fit_adapters(&t).unwrap();
        assert!(rel(k6, 0.005) < 1e-9 && rel(k7, 1.1) < 1e-9);
    }

    #[test]
    fn load_fit_means_and_disk_ratio() {
        let csv = "rank,source,latency_s\n8,cpu,0.04\n8,cpu,0.06\n16,cpu,0.08\n8,disk,0.085\n16,disk,0.136\n";
        let t = BenchmarkTable::from_csv_str("load.csv", csv).unwrap();
        let table = fit_load(&t, 1.7).unwrap();
        assert!((table.cpu_load_seconds[&8] - 0.05).abs() < 1e-12);
        assert!((table.disk_multiplier - 1.7).abs() < 1e-12);
    }

    #[test]
    fn memory_fit_recovers_linear_costs() {
        let mut csv = String::from("slots,rank,kv_capacity_tokens\n");
        for (rank, cost) in [(8, 200), (16, 400), (32, 800)] {
            for g in [0, 8, 32, 64] {
                csv.push_str(&format!("{g},{rank},{}\n", 100_000 - g * cost));
            }
        }
        let t = BenchmarkTable::from_csv_str("memory.csv", &csv).unwrap();
        let mm = fit_memory(&t, 131072.0).unwrap();
        assert_eq!(mm.total_kv_budget, 100_000);
        assert_eq!(mm.slot_cost_tokens(16), 400);
        assert_eq!(mm.slot_cost_tokens(32), 800);
    }

    #[test]
    fn missing_column_is_named() {
        let t = BenchmarkTable::from_csv_str("model.csv", "r,latency_s\n1,0.1\n").unwrap();
        let err = fit_model(&t).unwrap_err().to_string();
        assert!(err.contains("model.csv:r_running"), "{err}");
    }
}
