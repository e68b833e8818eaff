//! Declarative workloads and the reproducible request streams they expand to.
//!
//! A [`WorkloadSpec`] names the served adapters (rank and Poisson arrival
//! rate), how request lengths are drawn, a duration and a seed. Every adapter
//! gets its own RNG substreams derived from `(seed, adapter_id)`, so adding
//! an adapter never perturbs the requests of another.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type AdapterId = u32;

/// One served adapter. Rank 0 denotes requests for the bare base model: they
/// occupy no adapter slot and add no adapter compute overhead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub adapter_id: AdapterId,
    pub rank: u32,
    /// Request arrivals per second.
    pub rate: f64,
    /// Per-adapter override of the workload-wide length settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengths: Option<LengthSpec>,
}

impl AdapterSpec {
    pub fn new(adapter_id: AdapterId, rank: u32, rate: f64) -> Self {
        AdapterSpec {
            adapter_id,
            rank,
            rate,
            lengths: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthMode {
    Full,
    Mean,
}

/// How `(input_tokens, output_tokens)` pairs are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthSpec {
    pub mode: LengthMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_lengths: Option<Vec<(u32, u32)>>,
    /// Two-column CSV (`input_tokens,output_tokens`) resolved relative to the
    /// workload file by [`WorkloadSpec::from_path`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_lengths_csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_input: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_input: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_output: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_output: Option<f64>,
}

/// First two moments of both length dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthMoments {
    pub mean_input: f64,
    pub std_input: f64,
    pub mean_output: f64,
    pub std_output: f64,
}

impl LengthSpec {
    pub fn full(lengths: Vec<(u32, u32)>) -> Self {
        LengthSpec {
            mode: LengthMode::Full,
            full_lengths: Some(lengths),
            full_lengths_csv: None,
            mean_input: None,
            std_input: None,
            mean_output: None,
            std_output: None,
        }
    }

    pub fn mean(mean_input: f64, std_input: f64, mean_output: f64, std_output: f64) -> Self {
        LengthSpec {
            mode: LengthMode::Mean,
            full_lengths: None,
            full_lengths_csv: None,
            mean_input: Some(mean_input),
            std_input: Some(std_input),
            mean_output: Some(mean_output),
            std_output: Some(std_output),
        }
    }

    /// Every request identical: `input`/`output` tokens, no variance.
    pub fn constant(input: u32, output: u32) -> Self {
        Self::full(vec![(input, output)])
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        match self.mode {
            LengthMode::Full => {
                let list = self.full_lengths.as_ref().ok_or_else(|| {
                    Error::validation(
                        format!("{field}.full_lengths"),
                        "full mode requires a length list",
                    )
                })?;
                if list.is_empty() {
                    return Err(Error::validation(
                        format!("{field}.full_lengths"),
                        "full mode requires a non-empty length list",
                    ));
                }
                if let Some(i) = list.iter().position(|&(i, o)| i == 0 || o == 0) {
                    return Err(Error::validation(
                        format!("{field}.full_lengths[{i}]"),
                        "token counts must be >= 1",
                    ));
                }
            }
            LengthMode::Mean => {
                for (name, value, positive) in [
                    ("mean_input", self.mean_input, true),
                    ("std_input", self.std_input, false),
                    ("mean_output", self.mean_output, true),
                    ("std_output", self.std_output, false),
                ] {
                    let v = value.ok_or_else(|| {
                        Error::validation(format!("{field}.{name}"), "required in mean mode")
                    })?;
                    if !v.is_finite() || v < 0.0 || (positive && v == 0.0) {
                        let want = if positive { "> 0" } else { ">= 0" };
                        return Err(Error::validation(
                            format!("{field}.{name}"),
                            format!("must be finite and {want}, got {v}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Moments of the distribution this spec describes. Full mode uses the
    /// population moments of the list.
    pub fn moments(&self) -> Result<LengthMoments> {
        self.validate("lengths")?;
        match self.mode {
            LengthMode::Mean => Ok(LengthMoments {
                mean_input: self.mean_input.unwrap_or_default(),
                std_input: self.std_input.unwrap_or_default(),
                mean_output: self.mean_output.unwrap_or_default(),
                std_output: self.std_output.unwrap_or_default(),
            }),
            LengthMode::Full => {
                let list = self.full_lengths.as_deref().unwrap_or_default();
                let (mi, si) = mean_std(list.iter().map(|p| p.0 as f64));
                let (mo, so) = mean_std(list.iter().map(|p| p.1 as f64));
                Ok(LengthMoments {
                    mean_input: mi,
                    std_input: si,
                    mean_output: mo,
                    std_output: so,
                })
            }
        }
    }

    /// The mean-mode equivalent of this spec.
    pub fn to_mean_mode(&self) -> Result<LengthSpec> {
        let m = self.moments()?;
        Ok(LengthSpec::mean(
            m.mean_input,
            m.std_input,
            m.mean_output,
            m.std_output,
        ))
    }

    fn resolve_csv(&mut self, base: &Path) -> Result<()> {
        if let Some(rel) = self.full_lengths_csv.take() {
            let path = base.join(&rel);
            self.full_lengths = Some(load_lengths_csv(&path)?);
        }
        Ok(())
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reads a two-column `input_tokens,output_tokens` CSV with a header row.
pub fn load_lengths_csv(path: &Path) -> Result<Vec<(u32, u32)>> {
    #[derive(Deserialize)]
    struct Row {
        input_tokens: u32,
        output_tokens: u32,
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        out.push((row.input_tokens, row.output_tokens));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub adapters: Vec<AdapterSpec>,
    pub lengths: LengthSpec,
    pub duration_s: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::validation("adapters", "at least one adapter is required"));
        }
        if !self.duration_s.is_finite() || self.duration_s < 0.0 {
            return Err(Error::validation(
                "duration_s",
                format!("must be finite and >= 0, got {}", self.duration_s),
            ));
        }
        self.lengths.validate("lengths")?;
        let mut seen = BTreeSet::new();
        for (i, a) in self.adapters.iter().enumerate() {
            if !seen.insert(a.adapter_id) {
                return Err(Error::validation(
                    format!("adapters[{i}].adapter_id"),
                    format!("duplicate adapter id {}", a.adapter_id),
                ));
            }
            if !(a.rate.is_finite() && a.rate > 0.0) {
                return Err(Error::validation(
                    format!("adapters[{i}].rate"),
                    format!("must be finite and > 0, got {}", a.rate),
                ));
            }
            if let Some(l) = &a.lengths {
                l.validate(&format!("adapters[{i}].lengths"))?;
            }
        }
        Ok(())
    }

    /// Length spec governing one adapter.
    pub fn lengths_for<'a>(&'a self, adapter: &'a AdapterSpec) -> &'a LengthSpec {
        adapter.lengths.as_ref().unwrap_or(&self.lengths)
    }

    /// Number of served adapters that occupy slots (rank > 0).
    pub fn served_adapters(&self) -> usize {
        self.adapters.iter().filter(|a| a.rank > 0).count()
    }

    pub fn max_rank(&self) -> u32 {
        self.adapters.iter().map(|a| a.rank).max().unwrap_or(0)
    }

    /// Same workload with every length spec converted to mean mode.
    pub fn to_mean_mode(&self) -> Result<WorkloadSpec> {
        let mut out = self.clone();
        out.lengths = self.lengths.to_mean_mode()?;
        for a in &mut out.adapters {
            if let Some(l) = &a.lengths {
                a.lengths = Some(l.to_mean_mode()?);
            }
        }
        Ok(out)
    }

    pub fn from_json_str(s: &str) -> Result<WorkloadSpec> {
        let spec: WorkloadSpec = crate::io::from_json_str(s)?;
        if spec.lengths.full_lengths_csv.is_some() {
            return Err(Error::validation(
                "lengths.full_lengths_csv",
                "CSV references need a base directory; load with from_path",
            ));
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Loads a workload JSON, resolving `full_lengths_csv` references
    /// relative to the file's directory.
    pub fn from_path(path: &Path) -> Result<WorkloadSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: WorkloadSpec = crate::io::from_json_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        spec.lengths.resolve_csv(base)?;
        for a in &mut spec.adapters {
            if let Some(l) = &mut a.lengths {
                l.resolve_csv(base)?;
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub adapter_id: AdapterId,
    pub arrival_time: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

const STREAM_ARRIVALS: u64 = 0xA331_7A15;
const STREAM_LENGTHS: u64 = 0x1E96_7485;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of an independent substream keyed by `(seed, parts...)`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Draws `n` length pairs. Full mode walks the list in passes, each pass a
/// fresh shuffle; mean mode samples a rounded normal per dimension, clamped
/// to at least one token.
pub fn sample_lengths(spec: &LengthSpec, n: usize, seed: u64) -> Result<Vec<(u32, u32)>> {
    spec.validate("lengths")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.mode {
        LengthMode::Full => {
            let list = spec.full_lengths.as_deref().unwrap_or_default();
            let mut out = Vec::with_capacity(n);
            let mut pass = list.to_vec();
            while out.len() < n {
                pass.shuffle(&mut rng);
                out.extend(pass.iter().take(n - out.len()).copied());
            }
            Ok(out)
        }
        LengthMode::Mean => {
            let m = spec.moments()?;
            let input = ClampedNormal::new(m.mean_input, m.std_input);
            let output = ClampedNormal::new(m.mean_output, m.std_output);
            Ok((0..n)
                .map(|_| (input.sample(&mut rng), output.sample(&mut rng)))
                .collect())
        }
    }
}

struct ClampedNormal {
    mean: f64,
    normal: Option<Normal<f64>>,
}

impl ClampedNormal {
    fn new(mean: f64, std: f64) -> Self {
        let normal = (std > 0.0).then(|| Normal::new(mean, std).expect("std validated"));
        ClampedNormal { mean, normal }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let x = match &self.normal {
            Some(n) => n.sample(rng),
            None => self.mean,
        };
        x.round().clamp(1.0, u32::MAX as f64) as u32
    }
}

/// Poisson arrivals per adapter within `[0, duration_s)`, merged and sorted by
/// `(arrival_time, adapter_id, per-adapter sequence)`. Request ids follow the
/// merged order.
pub fn generate_arrivals(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let mut keyed = Vec::new();
    for adapter in &spec.adapters {
        let id = adapter.adapter_id as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[STREAM_ARRIVALS, id]));
        let exp = Exp::new(adapter.rate).map_err(|e| {
            Error::validation(format!("adapters[{}].rate", adapter.adapter_id), e.to_string())
        })?;
        let mut times = Vec::new();
        let mut t = 0.0;
        loop {
            t += exp.sample(&mut rng);
            if t >= spec.duration_s {
                break;
            }
            times.push(t);
        }
        let lengths = sample_lengths(
            spec.lengths_for(adapter),
            times.len(),
            derive_seed(spec.seed, &[STREAM_LENGTHS, id]),
        )?;
        for (seq, (t, (input, output))) in times.into_iter().zip(lengths).enumerate() {
            keyed.push((t, adapter.adapter_id, seq, input, output));
        }
    }
    keyed.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    Ok(keyed
        .into_iter()
        .enumerate()
        .map(|(i, (t, adapter_id, _, input, output))| Request {
            request_id: i as u64,
            adapter_id,
            arrival_time: t,
            input_tokens: input,
            output_tokens: output,
        })
        .collect())
}
