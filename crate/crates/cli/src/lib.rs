//! Command-line front end for `npcox`.

pub mod dataset;
pub mod error;
pub mod output;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use npcox::bootstrap_infer::bootstrap;
use npcox::config::{resolve_workers, with_workers, Config};
use npcox::em_fit::fit_npmle;
use npcox::gaussian::ConditionalLaw;
use npcox::lasso_path::tune_path;
use npcox::sim_bench::{self, gen_dataset, run_benchmark, BenchConfig, Method, SimDesign};
use serde::Serialize;

use crate::dataset::{aligned_rows, parse_dataset, write_dataset_string, AlignedRow, ParsedDataset};
use crate::error::{CliError, ErrorKind};
use crate::output::FitOutput;

#[derive(Debug, Parser)]
#[command(name = "npcox", version, about = "Cox regression with missing Gaussian covariates (NPMLE via EM)")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Unpenalized NPMLE, optionally with bootstrap inference.
    Fit(FitArgs),
    /// LASSO-penalized NPMLE over a γ path with BIC selection.
    FitLasso(LassoArgs),
    /// Draws one dataset from a simulation design.
    Simulate(SimulateArgs),
    /// Replicated simulation study producing table-shaped reports.
    Benchmark(BenchmarkArgs),
    /// NPMLE with bootstrap standard errors and percentile intervals.
    Bootstrap(FitArgs),
    /// Risk scores from a saved fit, with the C-index when outcomes are present.
    Predict(PredictArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML configuration; its entries override command-line flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: NPCOX_WORKERS, else all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quad_order: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Output file (directory for `benchmark`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Always-observed columns entering only through β.
    #[arg(long, value_delimiter = ',')]
    pub condition_on: Vec<String>,
}

#[derive(Debug, Args, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Bootstrap replicates (0 disables).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub ci_level: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct LassoArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated decreasing γ values replacing the automatic grid.
    #[arg(long, value_delimiter = ',')]
    pub gamma_grid: Vec<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Built-in design name or a design TOML file.
    #[arg(long)]
    pub design: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub missing_fraction: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub design: String,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub missing_fraction: Option<f64>,
    /// Bootstrap replicates per simulation replicate for NPMLE.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Bootstrap only the first this-many simulation replicates.
    #[arg(long)]
    pub bootstrap_limit: Option<usize>,
    #[arg(long)]
    pub ci_level: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    /// A document written by `fit`, `fit-lasso` or `bootstrap`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

/// What a command produced: text for stdout and files already written.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub warnings: Vec<String>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Flags first, then the configuration file on top.
pub fn build_config(common: &Common, bootstrap: Option<usize>, ci_level: Option<f64>) -> Result<Config, CliError> {
    let mut cfg = Config::default();
    if let Some(v) = common.quad_order {
        cfg.quadrature.order = v;
    }
    if let Some(v) = common.tol {
        cfg.em.tol = v;
    }
    if let Some(v) = common.max_iter {
        cfg.em.max_iter = v;
    }
    if let Some(v) = bootstrap {
        cfg.bootstrap.replicates = v;
    }
    if let Some(v) = ci_level {
        cfg.bootstrap.level = v;
    }
    cfg.run.workers = common.workers;
    cfg.run.seed = common.seed;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: toml::Value =
            toml::from_str(&text).map_err(|e| CliError::new(ErrorKind::Config, format!("{}: {e}", path.display())))?;
        let mut base = toml::Value::try_from(&cfg).expect("config serializes");
        merge(&mut base, file);
        cfg = base.try_into().map_err(|e| CliError::new(ErrorKind::Config, format!("{}: {e}", path.display())))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn sidecar(path: &Path, command: &str, started: SystemTime, elapsed: f64) -> Result<(), CliError> {
    let unix = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut log = path.as_os_str().to_owned();
    log.push(".log");
    let text = format!("command = {command:?}\nstarted_unix = {unix}\nwall_clock_secs = {elapsed:.3}\n");
    write_atomic(Path::new(&log), &text)
}

fn emit(common: &Common, json: String, table: String) -> Result<String, CliError> {
    if let Some(out) = &common.out {
        write_atomic(out, &json)?;
    }
    Ok(if common.json { json } else { table })
}

fn load(data: &DataArgs) -> Result<ParsedDataset, CliError> {
    let parsed = parse_dataset(&data.data, &data.condition_on)?;
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    Ok(parsed)
}

fn cmd_fit(args: &FitArgs, force_bootstrap: bool) -> Result<Outcome, CliError> {
    let cfg = build_config(&args.common, args.bootstrap, args.ci_level)?;
    let parsed = load(&args.data)?;
    let data = &parsed.data;
    let started = SystemTime::now();
    let clock = Instant::now();
    let workers = resolve_workers(cfg.run.workers)?;
    let fit_cfg = cfg.fit();
    let replicates = if force_bootstrap || args.bootstrap.is_some() { cfg.bootstrap.replicates } else { 0 };
    let seed = cfg.run.seed.unwrap_or(1);
    let doc = with_workers(workers, || -> Result<FitOutput, CliError> {
        let fit = fit_npmle(data, &fit_cfg, None)?;
        if !fit.converged {
            log::warn!("EM stopped after {} iterations without meeting the tolerance", fit.iterations);
        }
        let mut doc = FitOutput::from_fit("npmle", data.n(), &parsed.names, data.p(), &parsed.missing_fractions, &fit);
        if replicates > 0 {
            let b = bootstrap(data, &fit.params, &fit_cfg, replicates, cfg.bootstrap.level, seed)?;
            doc = doc.with_bootstrap(&b, seed);
        }
        Ok(doc)
    })??;
    let stdout = emit(&args.common, doc.to_json(), doc.to_table())?;
    if let Some(out) = &args.common.out {
        sidecar(out, "fit", started, clock.elapsed().as_secs_f64())?;
    }
    Ok(Outcome { stdout, warnings: parsed.warnings })
}

fn cmd_fit_lasso(args: &LassoArgs) -> Result<Outcome, CliError> {
    let mut cfg = build_config(&args.common, None, None)?;
    if !args.gamma_grid.is_empty() {
        cfg.lasso.gamma_grid = Some(args.gamma_grid.clone());
        cfg.lasso.validate()?;
    }
    let parsed = load(&args.data)?;
    let data = &parsed.data;
    let started = SystemTime::now();
    let clock = Instant::now();
    let workers = resolve_workers(cfg.run.workers)?;
    let doc = with_workers(workers, || -> Result<FitOutput, CliError> {
        let path = tune_path(data, &cfg.fit(), &cfg.lasso)?;
        Ok(FitOutput::from_fit("lasso", data.n(), &parsed.names, data.p(), &parsed.missing_fractions, &path.refit)
            .with_path(&path, &parsed.names))
    })??;
    let stdout = emit(&args.common, doc.to_json(), doc.to_table())?;
    if let Some(out) = &args.common.out {
        sidecar(out, "fit-lasso", started, clock.elapsed().as_secs_f64())?;
    }
    Ok(Outcome { stdout, warnings: parsed.warnings })
}

pub fn load_design(spec: &str) -> Result<SimDesign, CliError> {
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "toml") || path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(SimDesign::from_toml_str(&text)?)
    } else {
        Ok(sim_bench::builtin(spec)?)
    }
}

fn adjust_design(
    mut d: SimDesign,
    n: Option<usize>,
    p_m: Option<f64>,
    seed: Option<u64>,
) -> Result<SimDesign, CliError> {
    if let Some(n) = n {
        d.n = n;
    }
    if let Some(p) = p_m {
        d.missing_fraction = p;
    }
    if let Some(s) = seed {
        d.seed = s;
    }
    d.validate()?;
    Ok(d)
}

#[derive(Serialize)]
struct SimulateSummary {
    design: String,
    seed: u64,
    n: usize,
    events: usize,
    censoring_rate: f64,
    missing_share: f64,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<Outcome, CliError> {
    let design = adjust_design(load_design(&args.design)?, args.n, args.missing_fraction, args.common.seed)?;
    let sim = gen_dataset(&design, design.seed)?;
    let names: Vec<String> = sim.data.names().to_vec();
    let csv = write_dataset_string(&sim.data, &names);
    let summary = SimulateSummary {
        design: design.name.clone(),
        seed: design.seed,
        n: sim.data.n(),
        events: sim.data.n_events(),
        censoring_rate: sim.censoring_rate(),
        missing_share: sim.missing_share(),
    };
    let stdout = match &args.common.out {
        Some(out) => {
            write_atomic(out, &csv)?;
            if args.common.json {
                serde_json::to_string_pretty(&summary)? + "\n"
            } else {
                format!(
                    "wrote {} subjects ({} events, {:.1}% censored, {:.1}% with missing covariates) to {}\n",
                    summary.n,
                    summary.events,
                    100.0 * summary.censoring_rate,
                    100.0 * summary.missing_share,
                    out.display()
                )
            }
        }
        None if args.common.json => serde_json::to_string_pretty(&summary)? + "\n",
        None => csv,
    };
    Ok(Outcome { stdout, warnings: Vec::new() })
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<Outcome, CliError> {
    let cfg = build_config(&args.common, args.bootstrap, args.ci_level)?;
    let design = adjust_design(load_design(&args.design)?, args.n, args.missing_fraction, None)?;
    let mut bench = BenchConfig {
        fit: cfg.fit(),
        lasso: cfg.lasso.clone(),
        cox: cfg.cox,
        seed: cfg.run.seed,
        workers: resolve_workers(cfg.run.workers)?,
        bootstrap: args.bootstrap.map_or(0, |_| cfg.bootstrap.replicates),
        bootstrap_limit: args.bootstrap_limit,
        ci_level: cfg.bootstrap.level,
        ..BenchConfig::default()
    };
    if let Some(r) = args.replicates {
        bench.replicates = r;
    }
    if !args.methods.is_empty() {
        bench.methods = args.methods.iter().map(|m| m.parse::<Method>()).collect::<Result<_, _>>()?;
    } else if design.p > 20 {
        bench.methods = vec![Method::PenalizedNpmle, Method::CompleteCase, Method::SingleImputation];
    }
    let started = SystemTime::now();
    let report = run_benchmark(&design, &bench)?;
    let json = report.to_json();
    if let Some(dir) = &args.common.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let stem = dir.join(&design.name);
        let with = |ext: &str| PathBuf::from(format!("{}{ext}", stem.display()));
        write_atomic(&with(".json"), &json)?;
        write_atomic(&with(".csv"), &report.to_csv())?;
        write_atomic(&with("_lambda.dat"), &report.lambda_dat())?;
        sidecar(&with(".json"), "benchmark", started, report.wall_clock_secs)?;
    }
    let stdout = if args.common.json { json } else { report.to_csv() };
    Ok(Outcome { stdout, warnings: Vec::new() })
}

#[derive(Serialize)]
struct Prediction {
    scores: Vec<f64>,
    c_index: Option<f64>,
}

fn cmd_predict(args: &PredictArgs) -> Result<Outcome, CliError> {
    let text = std::fs::read_to_string(&args.model).map_err(|e| CliError::io(&args.model, e))?;
    let model = FitOutput::from_json(&text)?;
    let params = model.params()?;
    let parsed = parse_dataset(&args.data, &model.condition_on)?;
    let rows = aligned_rows(&parsed, &model.gaussian, &model.condition_on)?;
    let p = model.gaussian.len();
    let mut laws: std::collections::BTreeMap<Vec<bool>, ConditionalLaw<f64>> = Default::default();
    let mut scores = Vec::with_capacity(rows.len());
    for AlignedRow { mask, observed: obs, fixed } in &rows {
        let mut x = vec![0.0; p];
        for (&j, &v) in mask.observed().iter().zip(obs) {
            x[j] = v;
        }
        if !mask.is_complete() {
            let key = mask.flags().to_vec();
            if !laws.contains_key(&key) {
                laws.insert(key.clone(), ConditionalLaw::new(&params.mu, &params.sigma, mask)?);
            }
            for (&j, v) in mask.missing().iter().zip(laws[&key].mean(obs)) {
                x[j] = v;
            }
        }
        let s: f64 = x.iter().chain(fixed).zip(&params.beta).map(|(a, b)| a * b).sum();
        scores.push(s);
    }
    let y: Vec<f64> = parsed.data.subjects().iter().map(|s| s.y).collect();
    let delta: Vec<bool> = parsed.data.subjects().iter().map(|s| s.delta).collect();
    let c_index = sim_bench::c_index(&scores, &y, &delta).ok();
    let pred = Prediction { scores, c_index };
    let mut csv = String::from("row,score\n");
    for (i, s) in pred.scores.iter().enumerate() {
        csv.push_str(&format!("{},{s}\n", i + 1));
    }
    if let Some(out) = &args.common.out {
        write_atomic(out, &csv)?;
    }
    let stdout = if args.common.json {
        serde_json::to_string_pretty(&pred)? + "\n"
    } else {
        let c = pred.c_index.map_or("undefined".to_string(), |c| format!("{c:.4}"));
        format!("{} risk scores; C-index = {c}\n", pred.scores.len())
    };
    Ok(Outcome { stdout, warnings: parsed.warnings })
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, false),
        Command::Bootstrap(a) => cmd_fit(a, true),
        Command::FitLasso(a) => cmd_fit_lasso(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Predict(a) => cmd_predict(a),
    }
}
