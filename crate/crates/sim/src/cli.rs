//! Command-line interface: argument definitions and the five subcommands.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use splitcache_core::cache::CacheSnapshot;
use splitcache_core::{
    derive_timing, generate_trace, vram_allocation, ActivationTrace, DeviceSpec, EngineError, Mode, ModelSpec, Policy,
    RunOptions, SimReport, Simulation, StatsAccumulator,
};

use crate::config::{read_json, ResolvedConfig, RunConfig, SpecSource, TraceSource};
use crate::output::{
    write_json, write_layer_csv, write_rows, write_token_csv, CompareRow, ConfigureDocument, ReportDocument,
    SnapshotDocument, StatsDocument, SweepRow, SCHEMA_VERSION,
};
use crate::tracefile::{write_trace, write_trace_to};

#[derive(Debug, Parser)]
#[command(name = "splitcache", version, about = "Trace-driven simulator for MoE expert caching and prefetching")]
pub struct Cli {
    /// JSON run configuration; command-line flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory [default: config `output_dir`, then $SPLITCACHE_OUT_DIR, then `.`].
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic activation trace.
    Gen(GenArgs),
    /// Simulate one configuration and write its report.
    Run(RunArgs),
    /// Simulate a grid of modes, policies and budgets.
    Compare(CompareArgs),
    /// Sweep the split ratio in `fixed_split` mode.
    SweepTheta(SweepArgs),
    /// Allocate VRAM across layers from a statistics dump.
    Configure(ConfigureArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SpecArgs {
    /// Built-in model name or JSON file [default: qwen-like].
    #[arg(long)]
    pub model: Option<String>,
    /// Built-in device name or JSON file [default: a6000].
    #[arg(long)]
    pub device: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenFlags {
    /// Decode tokens.
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub prompt_tokens: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Popularity skew.
    #[arg(long)]
    pub zipf: Option<f64>,
    /// Probability of re-activating each of the previous token's experts.
    #[arg(long)]
    pub repeat: Option<f64>,
    /// Predictor top-K accuracy: one value, or one per layer.
    #[arg(long, value_delimiter = ',')]
    pub accuracy: Option<Vec<f64>>,
    /// Predicted ranking length P.
    #[arg(long)]
    pub prediction_len: Option<usize>,
}

impl GenFlags {
    fn is_empty(&self) -> bool {
        self.tokens.is_none()
            && self.prompt_tokens.is_none()
            && self.seed.is_none()
            && self.zipf.is_none()
            && self.repeat.is_none()
            && self.accuracy.is_none()
            && self.prediction_len.is_none()
    }

    fn apply(&self, source: &mut TraceSource) {
        if self.is_empty() {
            return;
        }
        let mut cfg = match source {
            TraceSource::Generate(cfg) => cfg.clone(),
            TraceSource::File(_) => Default::default(),
        };
        set(&mut cfg.tokens, self.tokens);
        set(&mut cfg.prompt_tokens, self.prompt_tokens);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.zipf_exponent, self.zipf);
        set(&mut cfg.repeat_prob, self.repeat);
        set(&mut cfg.predictor_accuracy, self.accuracy.clone());
        if self.prediction_len.is_some() {
            cfg.prediction_len = self.prediction_len;
        }
        *source = TraceSource::Generate(cfg);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TraceArgs {
    /// Read the trace from a JSON-Lines file instead of generating one.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["tokens", "prompt_tokens", "seed", "zipf", "repeat", "accuracy", "prediction_len"])]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Replacement policy: lcp, lru, lfu or rnd.
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<Policy>,
    /// Split ratio for fixed_split, initial ratio for moepic.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Per-layer VRAM budget in expert units [default: device budget / L].
    #[arg(long)]
    pub budget: Option<f64>,
    /// Pin the split ratio in moepic mode.
    #[arg(long)]
    pub force_theta: Option<f64>,
    /// Enable or disable the configurator in moepic mode.
    #[arg(long)]
    pub configurator: Option<bool>,
    /// Allocation granularity.
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Decode tokens between reconfigurations.
    #[arg(long)]
    pub tau: Option<usize>,
    /// LCP observation window in tokens.
    #[arg(long)]
    pub omega: Option<u32>,
    /// LCP decay per window.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Seed of the random replacement policy.
    #[arg(long)]
    pub policy_seed: Option<u64>,
}

impl RunFlags {
    fn apply(&self, opts: &mut RunOptions) {
        set(&mut opts.mode, self.mode);
        set(&mut opts.policy, self.policy);
        set(&mut opts.theta, self.theta);
        set(&mut opts.zeta, self.zeta);
        set(&mut opts.tau, self.tau);
        set(&mut opts.lcp.omega, self.omega);
        set(&mut opts.lcp.rho, self.rho);
        set(&mut opts.seed, self.policy_seed);
        if self.budget.is_some() {
            opts.budget_per_layer = self.budget;
        }
        if self.force_theta.is_some() {
            opts.force_theta = self.force_theta;
        }
        if self.configurator.is_some() {
            opts.configurator = self.configurator;
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub gen: GenFlags,
    /// Output file, `-` for stdout [default: <out-dir>/trace.jsonl].
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub trace: TraceArgs,
    #[command(flatten)]
    pub run: RunFlags,
    /// Also write the final cache contents of every layer.
    #[arg(long)]
    pub snapshots: bool,
    /// Write the accumulated routing statistics, for `configure`.
    #[arg(long, value_name = "FILE")]
    pub stats_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub trace: TraceArgs,
    #[command(flatten)]
    pub run: RunFlags,
    /// Modes to compare [default: all].
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Vec<Mode>,
    /// Policies to compare [default: the configured policy].
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    pub policies: Vec<Policy>,
    /// Per-layer budgets to compare [default: the configured budget].
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub trace: TraceArgs,
    #[command(flatten)]
    pub run: RunFlags,
    /// `start:end:step` or a comma-separated list.
    #[arg(long, default_value = "0.1:1.0:0.1", value_parser = parse_thetas)]
    pub thetas: ThetaGrid,
}

#[derive(Debug, Args)]
pub struct ConfigureArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Statistics dump written by `run --stats-out`.
    #[arg(long, value_name = "FILE")]
    pub stats: PathBuf,
    /// Total expert budget in expert units [default: the device budget].
    #[arg(long)]
    pub total_budget: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Output file [default: stdout].
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: splitcache_core::cache::UnknownPolicy| e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrid(pub Vec<f64>);

/// Parses `start:end:step` (inclusive, values rounded to 12 decimals so the
/// grid prints cleanly) or a comma-separated list.
pub fn parse_thetas(s: &str) -> Result<ThetaGrid, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    let values: Vec<f64> = match s.split(':').collect::<Vec<_>>()[..] {
        [start, end, step] => {
            let (start, end, step) = (num(start)?, num(end)?, num(step)?);
            if !(step > 0.0) || !(end >= start) {
                return Err("need step > 0 and end >= start".into());
            }
            let count = ((end - start) / step + 1e-9).floor() as usize + 1;
            (0..count).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect()
        }
        [_] => s.split(',').map(num).collect::<Result<_, _>>()?,
        _ => return Err("expected start:end:step or a list".into()),
    };
    if values.is_empty() || values.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err("split ratios must lie in (0, 1]".into());
    }
    Ok(ThetaGrid(values))
}

/// A failed command. Configuration problems exit with 1, failures while
/// running with 2.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    /// One JSON object on one line: `{"error":"config","message":"..."}`.
    pub fn to_line(&self) -> String {
        let (kind, err) = match self {
            Failure::Config(e) => ("config", e),
            Failure::Runtime(e) => ("runtime", e),
        };
        // Several error types already print their source; skip causes the
        // message so far already contains.
        let mut message = String::new();
        for cause in err.chain() {
            let text = cause.to_string();
            if !message.contains(&text) {
                if !message.is_empty() {
                    message.push_str(": ");
                }
                message.push_str(&text);
            }
        }
        let message = message.replace('\n', " ");
        serde_json::json!({ "error": kind, "message": message }).to_string()
    }
}

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Result of one simulation, with the end-of-run state `run` can dump.
pub struct RunOutcome {
    pub report: SimReport,
    pub snapshots: Vec<CacheSnapshot>,
    pub stats: StatsAccumulator,
}

pub fn simulate(
    trace: &ActivationTrace,
    model: &ModelSpec,
    device: &DeviceSpec,
    opts: &RunOptions,
) -> Result<RunOutcome, EngineError> {
    trace.check_model(model)?;
    let mut sim = Simulation::new(model, device, trace.header.prediction_len, opts.clone())?;
    if !trace.prompt().is_empty() {
        sim.simulate_prefill(trace.prompt())?;
    }
    for record in trace.decode() {
        sim.decode_token(record)?;
    }
    Ok(RunOutcome { report: sim.report(), snapshots: sim.cache_snapshots(), stats: sim.stats().clone() })
}

fn base_config(cli: &Cli, spec: &SpecArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).config()?,
        None => RunConfig::default(),
    };
    if let Some(model) = &spec.model {
        cfg.model = SpecSource::from_arg(model).config()?;
    }
    if let Some(device) = &spec.device {
        cfg.device = SpecSource::from_arg(device).config()?;
    }
    if cli.out_dir.is_some() {
        cfg.output_dir = cli.out_dir.clone();
    }
    Ok(cfg)
}

fn run_config(cli: &Cli, spec: &SpecArgs, trace: &TraceArgs, flags: &RunFlags) -> Result<RunConfig, Failure> {
    let mut cfg = base_config(cli, spec)?;
    if let Some(path) = &trace.trace {
        cfg.trace = TraceSource::File(path.clone());
    }
    trace.gen.apply(&mut cfg.trace);
    flags.apply(&mut cfg.run);
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
    Ok(dir)
}

fn write_csv_file(path: &Path, write: impl FnOnce(fs::File) -> csv::Result<()>) -> Result<(), Failure> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display())).runtime()?;
    write(file).with_context(|| format!("writing {}", path.display())).runtime()
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_json(path, value).with_context(|| format!("writing {}", path.display())).runtime()
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(cli, args),
        Command::Run(args) => cmd_run(cli, args),
        Command::Compare(args) => cmd_compare(cli, args),
        Command::SweepTheta(args) => cmd_sweep_theta(cli, args),
        Command::Configure(args) => cmd_configure(cli, args),
    }
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> Result<(), Failure> {
    let mut cfg = base_config(cli, &args.spec)?;
    args.gen.apply(&mut cfg.trace);
    let gen = match &cfg.trace {
        TraceSource::Generate(gen) => gen,
        TraceSource::File(_) => return Err(Failure::Config(anyhow!("gen needs a generator config, not a trace file"))),
    };
    let model = cfg.model.model().config()?;
    let trace = generate_trace(&model, gen).config()?;
    match &args.output {
        Some(path) if path.as_os_str() == "-" => {
            write_trace_to(io::BufWriter::new(io::stdout().lock()), &trace).context("writing stdout").runtime()?;
        }
        output => {
            let path = match output {
                Some(path) => path.clone(),
                None => output_dir(&cfg)?.join("trace.jsonl"),
            };
            write_trace(&path, &trace).runtime()?;
            info!("wrote {} tokens to {}", trace.tokens.len(), path.display());
        }
    }
    Ok(())
}

fn load(cfg: &RunConfig) -> Result<(ResolvedConfig, ActivationTrace), Failure> {
    let mut resolved = cfg.resolve().config()?;
    let trace = resolved.load_trace().config()?;
    Ok((resolved, trace))
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = run_config(cli, &args.spec, &args.trace, &args.run)?;
    cfg.cache_snapshots |= args.snapshots;
    let (resolved, trace) = load(&cfg)?;
    info!("simulating {} tokens in {} mode", trace.tokens.len(), resolved.run.mode);
    let outcome = simulate(&trace, &resolved.model, &resolved.device, &resolved.run).runtime()?;
    let report = &outcome.report;
    info!("TPOT mean {:.3} ms (compute floor {:.3} ms)", report.tpot_mean, report.compute_floor);

    let dir = output_dir(&cfg)?;
    write_csv_file(&dir.join("tokens.csv"), |f| write_token_csv(f, report))?;
    write_csv_file(&dir.join("layers.csv"), |f| write_layer_csv(f, report))?;
    if cfg.cache_snapshots {
        let doc = SnapshotDocument { schema_version: SCHEMA_VERSION, layers: outcome.snapshots };
        write_json_file(&dir.join("cache_snapshots.json"), &doc)?;
    }
    if let Some(path) = &args.stats_out {
        let doc = StatsDocument { schema_version: SCHEMA_VERSION, stats: outcome.stats };
        write_json_file(path, &doc)?;
    }
    let path = dir.join("report.json");
    write_json_file(&path, &ReportDocument::new(resolved, outcome.report))?;
    info!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareDocument {
    pub schema_version: u32,
    pub runs: Vec<ReportDocument>,
}

/// Runs every option set against the same trace in parallel, keeping input order.
fn fan_out(resolved: &ResolvedConfig, trace: &ActivationTrace, jobs: &[RunOptions]) -> Result<Vec<SimReport>, Failure> {
    for opts in jobs {
        opts.validate().config()?;
    }
    info!("running {} simulations of {} tokens", jobs.len(), trace.tokens.len());
    jobs.par_iter()
        .map(|opts| simulate(trace, &resolved.model, &resolved.device, opts).map(|o| o.report))
        .collect::<Result<Vec<_>, _>>()
        .runtime()
}

fn print_rows<T: Serialize>(rows: &[T]) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    write_rows(&mut out, rows).context("writing stdout").runtime()?;
    out.flush().context("writing stdout").runtime()
}

fn cmd_compare(cli: &Cli, args: &CompareArgs) -> Result<(), Failure> {
    let cfg = run_config(cli, &args.spec, &args.trace, &args.run)?;
    let (resolved, trace) = load(&cfg)?;
    let base = &resolved.run;
    let modes = if args.modes.is_empty() { Mode::ALL.to_vec() } else { args.modes.clone() };
    let policies = if args.policies.is_empty() { vec![base.policy] } else { args.policies.clone() };
    let budgets: Vec<Option<f64>> =
        if args.budgets.is_empty() { vec![base.budget_per_layer] } else { args.budgets.iter().map(|&b| Some(b)).collect() };

    let mut jobs = Vec::new();
    for &mode in &modes {
        for &policy in &policies {
            for &budget_per_layer in &budgets {
                jobs.push(RunOptions { mode, policy, budget_per_layer, ..base.clone() });
            }
        }
    }
    let reports = fan_out(&resolved, &trace, &jobs)?;
    let rows: Vec<CompareRow> = reports.iter().map(CompareRow::new).collect();
    let runs = jobs
        .into_iter()
        .zip(reports)
        .map(|(run, report)| ReportDocument::new(ResolvedConfig { run, ..resolved.clone() }, report))
        .collect();

    let dir = output_dir(&cfg)?;
    write_csv_file(&dir.join("compare.csv"), |f| write_rows(f, &rows))?;
    write_json_file(&dir.join("compare.json"), &CompareDocument { schema_version: SCHEMA_VERSION, runs })?;
    print_rows(&rows)
}

fn cmd_sweep_theta(cli: &Cli, args: &SweepArgs) -> Result<(), Failure> {
    let cfg = run_config(cli, &args.spec, &args.trace, &args.run)?;
    let (resolved, trace) = load(&cfg)?;
    let budget = resolved
        .run
        .budget_per_layer
        .unwrap_or(resolved.device.vram_budget_experts / resolved.model.layers as f64);
    let jobs: Vec<RunOptions> = args
        .thetas
        .0
        .iter()
        .map(|&theta| RunOptions { mode: Mode::FixedSplit, theta, budget_per_layer: Some(budget), ..resolved.run.clone() })
        .collect();
    let reports = fan_out(&resolved, &trace, &jobs)?;
    let rows: Vec<SweepRow> =
        args.thetas.0.iter().zip(&reports).map(|(&theta, report)| SweepRow::new(theta, budget, report)).collect();

    let dir = output_dir(&cfg)?;
    write_csv_file(&dir.join("sweep_theta.csv"), |f| write_rows(f, &rows))?;
    print_rows(&rows)
}

fn cmd_configure(cli: &Cli, args: &ConfigureArgs) -> Result<(), Failure> {
    let cfg = base_config(cli, &args.spec)?;
    let model = cfg.model.model().config()?;
    let device = cfg.device.device().config()?;
    let doc: StatsDocument = read_json(&args.stats).config()?;
    let stats = doc.stats;
    stats.check().config()?;
    if (stats.layers(), stats.experts(), stats.activated())
        != (model.layers, model.experts_per_layer, model.activated_per_token)
    {
        return Err(Failure::Config(anyhow!(
            "stats shape (L={}, N={}, K={}) does not match the model (L={}, N={}, K={})",
            stats.layers(),
            stats.experts(),
            stats.activated(),
            model.layers,
            model.experts_per_layer,
            model.activated_per_token
        )));
    }
    let snapshot = stats.snapshot().config()?;
    let timing = derive_timing(&model, &device).config()?;
    let total = args.total_budget.unwrap_or(device.vram_budget_experts);
    let zeta = args.zeta.unwrap_or(cfg.run.zeta);
    let res = vram_allocation(total, zeta, &snapshot, &timing, model.buffer_experts).config()?;
    info!("allocation finished after {} moves (converged: {})", res.iterations, res.converged);
    let doc = ConfigureDocument::new(total, zeta, &res);
    match &args.output {
        Some(path) => write_json_file(path, &doc),
        None => {
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &doc).context("writing stdout").runtime()?;
            writeln!(out).context("writing stdout").runtime()
        }
    }
}
