//! Command-line interface.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{ServerConfig, CONFIG_ENV};
use crate::engine::{run_simulation, SimMode};
use crate::error::{Error, Result};
use crate::estimators::{fit_adapters, fit_load, fit_memory, fit_model, fit_sched, read_benchmark_csv, FitOptions};
use crate::io::{read_json, to_json_pretty};
use crate::metrics::{compare_traces, RealTrace, ScenarioMetrics};
use crate::placement::{
    encode_workload, generate_dataset, read_dataset, sweep_optimal, Condition, ConditionGrid, GPolicy, SweepOptions,
    Template,
};
use crate::predictor::{extract_rules, train_placement, ForestParams, PlacementModel, Target, TrainOptions, TreeParams};
use crate::schema::{schema, SCHEMAS};
use crate::workload::{LengthSpec, WorkloadSpec};

#[derive(Debug, Parser)]
#[command(name = "loraplace", version, about = "Multi-adapter LLM serving twin and placement predictor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit estimator coefficients from benchmark CSVs into a server config.
    Fit(FitArgs),
    /// Simulate a workload on a server config.
    Simulate(SimulateArgs),
    /// Find the best (served adapters, slots) for one workload condition.
    Sweep(SweepArgs),
    /// Sweep a grid of conditions into a training dataset (CSV).
    GenDataset(GenDatasetArgs),
    /// Train the placement forests on a dataset.
    Train(TrainArgs),
    /// Predict the placement for a workload.
    Predict(PredictArgs),
    /// Print the rules of a trained model.
    Rules(RulesArgs),
    /// Compare twin results against measured traces.
    Compare(CompareArgs),
    /// Print the built-in synthetic server config.
    Preset(PresetArgs),
    /// Print the JSON schema of a document type, or list the types.
    Schema(SchemaArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Server config JSON; defaults to $LORAPLACE_CONFIG, then the built-in preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ServerConfig> {
        let path = self
            .config
            .clone()
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            Some(p) => ServerConfig::from_path(&p),
            None => Ok(ServerConfig::h100_synthetic(1)),
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Config whose estimators are replaced; defaults to the built-in preset.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub sched: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub load: Option<PathBuf>,
    #[arg(long)]
    pub memory: Option<PathBuf>,
    /// Fit an intercept in the scheduler model.
    #[arg(long)]
    pub sched_intercept: bool,
    /// Disk/CPU load ratio used when the load CSV has no disk rows.
    #[arg(long, default_value_t = 1.7)]
    pub disk_multiplier: f64,
    #[arg(long, default_value_t = 131_072.0)]
    pub kv_bytes_per_token: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Full,
    Mean,
}

impl From<ModeArg> for SimMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => SimMode::Full,
            ModeArg::Mean => SimMode::Mean,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub workload: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum, default_value = "full")]
    pub mode: ModeArg,
    /// Overrides the workload's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's slot count.
    #[arg(long)]
    pub slots: Option<usize>,
    /// Check scheduler invariants every iteration.
    #[arg(long)]
    pub check: bool,
    /// Stop at the end of the arrival window instead of draining.
    #[arg(long)]
    pub no_drain: bool,
    /// Write a per-iteration trace CSV.
    #[arg(long)]
    pub trace_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GPolicyArg {
    Geometric,
    Full,
    Equal,
}

impl From<GPolicyArg> for GPolicy {
    fn from(g: GPolicyArg) -> Self {
        match g {
            GPolicyArg::Geometric => GPolicy::Geometric,
            GPolicyArg::Full => GPolicy::Full,
            GPolicyArg::Equal => GPolicy::Equal,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepSettings {
    /// Served-adapter grid, ascending.
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "geometric")]
    pub g_policy: GPolicyArg,
    /// Consecutive N values without improvement before stopping.
    #[arg(long, default_value_t = 3)]
    pub early_exit: usize,
    /// Sweep the whole N grid.
    #[arg(long)]
    pub no_early_exit: bool,
    /// Simulated seconds per point.
    #[arg(long, default_value_t = 600.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "full")]
    pub mode: ModeArg,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl SweepSettings {
    fn options(&self) -> SweepOptions {
        let d = SweepOptions::default();
        SweepOptions {
            n_grid: self.n_grid.clone().unwrap_or(d.n_grid),
            g_policy: self.g_policy.into(),
            early_exit: (!self.no_early_exit).then_some(self.early_exit),
            duration_s: self.duration,
            seed: self.seed,
            mode: self.mode.into(),
        }
    }
}

#[derive(Debug, Args)]
pub struct LengthArgs {
    #[arg(long, default_value_t = 250.0)]
    pub in_len_mean: f64,
    #[arg(long, default_value_t = 0.0)]
    pub in_len_std: f64,
    #[arg(long, default_value_t = 231.0)]
    pub out_len_mean: f64,
    #[arg(long, default_value_t = 0.0)]
    pub out_len_std: f64,
}

impl LengthArgs {
    /// Zero spread gives constant lengths; otherwise normal lengths.
    fn spec(&self) -> LengthSpec {
        if self.in_len_std == 0.0
            && self.out_len_std == 0.0
            && self.in_len_mean.fract() == 0.0
            && self.out_len_mean.fract() == 0.0
            && self.in_len_mean >= 1.0
            && self.out_len_mean >= 1.0
        {
            LengthSpec::constant(self.in_len_mean as u32, self.out_len_mean as u32)
        } else {
            LengthSpec::mean(self.in_len_mean, self.in_len_std, self.out_len_mean, self.out_len_std)
        }
    }
}

#[derive(Debug, Args)]
pub struct ConditionArgs {
    /// Condition JSON (`templates` and `lengths`).
    #[arg(long, conflicts_with_all = ["rates", "ranks"])]
    pub condition: Option<PathBuf>,
    /// Per-template request rates.
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    /// Per-template adapter ranks, paired with the rates.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<u32>>,
    #[command(flatten)]
    pub lengths: LengthArgs,
}

impl ConditionArgs {
    fn load(&self) -> Result<Condition> {
        let c = match (&self.condition, &self.rates, &self.ranks) {
            (Some(p), _, _) => read_json(p)?,
            (None, Some(rates), Some(ranks)) => {
                if rates.len() != ranks.len() {
                    return Err(Error::validation("--ranks", "needs one rank per rate"));
                }
                Condition {
                    templates: rates
                        .iter()
                        .zip(ranks)
                        .map(|(&rate, &rank)| Template { rank, rate })
                        .collect(),
                    lengths: self.lengths.spec(),
                }
            }
            _ => return Err(Error::validation("--condition", "give a condition file or --rates and --ranks")),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub condition: ConditionArgs,
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub sweep: SweepSettings,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    /// Condition grid JSON; defaults to rate triples from the 10-value rate
    /// set and rank triples from {8, 16, 32}.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub sweep: SweepSettings,
    /// Only the first N conditions of the grid.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Appended to if it exists; finished conditions are skipped.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub trees: usize,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    #[arg(long, default_value_t = 1)]
    pub min_leaf: usize,
    /// Features tried per split (all if omitted).
    #[arg(long)]
    pub feature_subset: Option<usize>,
    #[arg(long)]
    pub no_bootstrap: bool,
    /// Fraction of conditions held out for testing, chosen by hash.
    #[arg(long, default_value_t = 0.01)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Model JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluation report JSON; printed to stdout if omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Feature JSON object keyed by feature name.
    #[arg(long, conflicts_with_all = ["rates", "ranks", "condition"])]
    pub features: Option<PathBuf>,
    #[command(flatten)]
    pub condition: ConditionArgs,
    /// Output JSON; printed to stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Throughput,
    NStar,
    GStar,
    All,
}

#[derive(Debug, Args)]
pub struct RulesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub target: TargetArg,
    /// Emit JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Simulation result JSON; the file stem is the scenario key.
    #[arg(long, required = true)]
    pub dt: Vec<PathBuf>,
    /// Measured trace JSON; the file stem is the scenario key.
    #[arg(long, required = true)]
    pub real: Vec<PathBuf>,
    /// Report JSON; the text table goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PresetArgs {
    #[arg(long, default_value_t = 1)]
    pub slots: usize,
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    /// One of the names printed without an argument.
    pub name: Option<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json_file<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &to_json_pretty(v)?)
}

fn print(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).map_err(|e| Error::io("stdout", e))
}

/// `<out>.meta.json`: wall-clock and other non-semantic facts of a run.
fn write_meta(out: &Path, wall_time_s: f64, extra: serde_json::Value) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    let mut meta = serde_json::json!({
        "wall_time_s": wall_time_s,
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    write_json_file(Path::new(&name), &meta)
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if jobs == 0 {
        return Err(Error::validation("--jobs", "must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => fit(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::GenDataset(a) => gen_dataset(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Rules(a) => rules(a),
        Command::Compare(a) => compare(a),
        Command::Preset(a) => print(&to_json_pretty(&ServerConfig::h100_synthetic(a.slots))?),
        Command::Schema(a) => match a.name {
            None => print(&SCHEMAS.iter().map(|(n, _)| format!("{n}\n")).collect::<String>()),
            Some(n) => print(schema(&n).ok_or_else(|| Error::validation("name", format!("no schema `{n}`")))?),
        },
    }
}

fn fit(a: FitArgs) -> Result<()> {
    let mut cfg = match &a.base {
        Some(p) => ServerConfig::from_path(p)?,
        None => ServerConfig::h100_synthetic(1),
    };
    let c = &mut cfg.estimators.coefficients;
    if let Some(p) = &a.sched {
        let opts = FitOptions {
            sched_intercept: a.sched_intercept,
        };
        (c.k1, c.k2, c.k3, c.sched_intercept) = fit_sched(&read_benchmark_csv(p)?, &opts)?;
    }
    if let Some(p) = &a.model {
        (c.k4, c.k5) = fit_model(&read_benchmark_csv(p)?)?;
    }
    if let Some(p) = &a.adapters {
        (c.k6, c.k7) = fit_adapters(&read_benchmark_csv(p)?)?;
    }
    if let Some(p) = &a.load {
        cfg.estimators.load = fit_load(&read_benchmark_csv(p)?, a.disk_multiplier)?;
    }
    if let Some(p) = &a.memory {
        cfg.estimators.memory = fit_memory(&read_benchmark_csv(p)?, a.kv_bytes_per_token)?;
    }
    cfg.validate()?;
    write_json_file(&a.out, &cfg)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut workload = WorkloadSpec::from_path(&a.workload)?;
    if let Some(s) = a.seed {
        workload.seed = s;
    }
    let mut cfg = a.config.load()?;
    if let Some(g) = a.slots {
        cfg.slots = g;
    }
    cfg.sim.check_invariants |= a.check;
    cfg.sim.drain &= !a.no_drain;
    cfg.sim.trace_iterations |= a.trace_csv.is_some();
    let r = run_simulation(&workload, &cfg, a.mode.into())?;
    write_json_file(&a.out, &r)?;
    if let Some(p) = &a.trace_csv {
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        r.write_trace_csv(std::io::BufWriter::new(f))?;
    }
    write_meta(&a.out, r.wall_time_s, serde_json::json!({ "iterations": r.iterations }))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let started = Instant::now();
    let condition = a.condition.load()?;
    let cfg = a.config.load()?;
    let opts = a.sweep.options();
    let p = with_jobs(a.sweep.jobs, || sweep_optimal(&condition, &cfg, &opts))?;
    write_json_file(&a.out, &p)?;
    write_meta(
        &a.out,
        started.elapsed().as_secs_f64(),
        serde_json::json!({ "jobs": a.sweep.jobs }),
    )
}

fn gen_dataset(a: GenDatasetArgs) -> Result<()> {
    let started = Instant::now();
    let grid: ConditionGrid = match &a.grid {
        Some(p) => read_json(p)?,
        None => ConditionGrid::default(),
    };
    let mut conditions = grid.conditions();
    if let Some(n) = a.limit {
        conditions.truncate(n);
    }
    eprintln!("{} conditions", conditions.len());
    if conditions.is_empty() {
        eprintln!("warning: empty condition grid; dataset left empty");
    }
    let cfg = a.config.load()?;
    let opts = a.sweep.options();
    let summary = with_jobs(a.sweep.jobs, || {
        generate_dataset(&conditions, &cfg, &opts, &a.out, |done, total| {
            eprintln!("{done}/{total} conditions swept");
        })
    })?;
    for f in &summary.failed {
        eprintln!("failed: {f}");
    }
    write_meta(
        &a.out,
        started.elapsed().as_secs_f64(),
        serde_json::to_value(&summary)?,
    )
}

fn train(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let rows = read_dataset(&a.dataset)?;
    let opts = TrainOptions {
        forest: ForestParams {
            n_trees: a.trees,
            tree: TreeParams {
                max_depth: a.depth,
                min_leaf: a.min_leaf,
                feature_subset: a.feature_subset,
            },
            bootstrap: !a.no_bootstrap,
            seed: a.seed,
        },
        test_fraction: a.test_fraction,
    };
    let trained = with_jobs(a.jobs, || train_placement(&rows, &opts))?;
    write_json_file(&a.out, &trained.model)?;
    match &a.report {
        Some(p) => write_json_file(p, &trained.report)?,
        None => print(&to_json_pretty(&trained.report)?)?,
    }
    write_meta(&a.out, started.elapsed().as_secs_f64(), serde_json::json!({}))
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = PlacementModel::from_path(&a.model)?;
    let x: Vec<f64> = match &a.features {
        Some(p) => {
            let named: BTreeMap<String, f64> = read_json(p)?;
            model
                .throughput
                .feature_names
                .iter()
                .map(|n| {
                    named
                        .get(n)
                        .copied()
                        .ok_or_else(|| Error::validation(format!("features.{n}"), "missing"))
                })
                .collect::<Result<_>>()?
        }
        None => encode_workload(&a.condition.load()?)?.0.to_vec(),
    };
    let placement = model.predict(&x);
    let text = to_json_pretty(&placement)?;
    match &a.out {
        Some(p) => write_text(p, &text),
        None => print(&text),
    }
}

fn rules(a: RulesArgs) -> Result<()> {
    let model = PlacementModel::from_path(&a.model)?;
    let targets: Vec<Target> = match a.target {
        TargetArg::Throughput => vec![Target::Throughput],
        TargetArg::NStar => vec![Target::NStar],
        TargetArg::GStar => vec![Target::GStar],
        TargetArg::All => Target::ALL.to_vec(),
    };
    if a.json {
        let all: BTreeMap<Target, _> = targets.iter().map(|&t| (t, extract_rules(model.forest(t)))).collect();
        return print(&to_json_pretty(&all)?);
    }
    let mut text = String::new();
    for t in targets {
        text.push_str(&format!("# {}\n", t.name()));
        for r in extract_rules(model.forest(t)) {
            text.push_str(&r.to_string());
            text.push('\n');
        }
    }
    print(&text)
}

fn scenario_key(p: &Path) -> Result<String> {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::validation(p.display().to_string(), "no file name"))
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut twin = BTreeMap::new();
    for p in &a.dt {
        let r: crate::engine::SimulationResult = read_json(p)?;
        twin.insert(scenario_key(p)?, ScenarioMetrics::from(&r.metrics));
    }
    let mut real = BTreeMap::new();
    for p in &a.real {
        real.insert(scenario_key(p)?, RealTrace::from_path(p)?.scenario_metrics()?);
    }
    let report = compare_traces(&twin, &real)?;
    if let Some(p) = &a.out {
        write_json_file(p, &report)?;
    }
    print(&report.to_table())
}

/// One-line JSON error description for stderr.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}
