//! Command-line interface: reproducible experiment runs, the regularizer and
//! noise-estimator ablation, posterior diagnostics, synthetic dataset
//! generation, and scoring new rows with a saved model.
//!
//! Conventions: logs go to standard error; data goes to files; standard
//! output carries exactly one machine-readable JSON summary line per
//! invocation. Exit codes: 0 success, 1 fatal error, 2 partial method
//! failures (the run completed, some methods did not).

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use claps_core::conformal::{claps_interval, Method};
use claps_core::data::{load_csv, synth_heteroscedastic, synth_linear_gaussian, Dataset, TargetColumn};
use claps_core::diagnostics::{decompose, select_method, spearman, SelectionThresholds, SplitLabel};
use claps_core::eval::{
    run_ablation, run_experiment, write_ablation_outputs, write_experiment_outputs,
    ExperimentConfig, ExperimentRun, SavedModel, DEFAULT_LAMBDA_GRID,
};
use claps_core::linalg::DenseMatrix;
use claps_core::llla::Sigma2Estimator;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable naming the default output directory (used when
/// --out-dir is absent; last resort is ./runs).
const OUT_DIR_ENV: &str = "CLAPS_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "claps",
    version,
    about = "Posterior-aware conformal regression: runs, ablations, diagnostics, scoring"
)]
struct Cli {
    /// Increase log verbosity on standard error (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config file.
    Run(RunArgs),
    /// Sweep ridge strength and noise estimator over the config's data.
    Ablate(AblateArgs),
    /// Variance decomposition and method selection for a saved model on a CSV.
    Diagnose(DiagnoseArgs),
    /// Generate a synthetic dataset and write it as CSV.
    Synth(SynthArgs),
    /// Score a CSV with a saved model: one calibrated interval per row.
    Score(ScoreArgs),
}

/// Flag-level overrides applied on top of the JSON config (flags win).
#[derive(Args)]
struct ConfigOverrides {
    /// Override the config's run_name.
    #[arg(long)]
    run_name: Option<String>,
    /// Override the config's seed list (comma-separated, e.g. 0,1,2).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Seed-level parallelism; values above 32 are capped.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the nominal coverage level.
    #[arg(long)]
    target_cov: Option<f64>,
    /// Override the ridge regularizer strength.
    #[arg(long)]
    lambda: Option<f64>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(name) = &self.run_name {
            cfg.run_name = name.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(tc) = self.target_cov {
            cfg.target_cov = tc;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output root; precedence: this flag, then $CLAPS_OUT_DIR, then ./runs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct AblateArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output root; precedence: this flag, then $CLAPS_OUT_DIR, then ./runs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Ridge grid (comma-separated), default 0.1,0.3,1,3,10.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    lambdas: Option<Vec<f64>>,
    /// Noise estimators to sweep: residual, evidence (default both).
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Saved model: a model.json file or a directory containing one.
    #[arg(long)]
    model: PathBuf,
    /// CSV with the model's feature columns plus a target column.
    #[arg(long)]
    data: PathBuf,
    /// Target column name, or a zero-based index.
    #[arg(long)]
    target: String,
    /// CSV field delimiter.
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// Output path for the diagnostics JSON.
    #[arg(long, default_value = "diagnostics.json")]
    out: PathBuf,
    /// Epistemic-share threshold for the selection rule.
    #[arg(long, default_value_t = 0.02)]
    eps_r: f64,
    /// Posterior-trace threshold for the selection rule.
    #[arg(long, default_value_t = 1.0)]
    eps_t: f64,
    /// Residual/scale rank-correlation threshold for the selection rule.
    #[arg(long, default_value_t = 0.2)]
    tau_rho: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// y = w'x + Gaussian noise with constant variance.
    LinearGaussian,
    /// One-dimensional x with noise scale base + slope * |x|.
    Heteroscedastic,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    /// Number of rows.
    #[arg(long)]
    n: usize,
    /// Input dimension (linear-gaussian only).
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Noise standard deviation (linear-gaussian only).
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Base noise scale (heteroscedastic only).
    #[arg(long, default_value_t = 0.1)]
    base: f64,
    /// Noise growth per unit |x| (heteroscedastic only).
    #[arg(long, default_value_t = 0.5)]
    slope: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Saved model: a model.json file or a directory containing one.
    #[arg(long)]
    model: PathBuf,
    /// Input CSV; must contain every feature column the model was trained
    /// on (matched by header name; extra columns are ignored).
    #[arg(long)]
    input: PathBuf,
    /// Output CSV of intervals (lo, hi, mu, v, epi per input row).
    #[arg(long, default_value = "intervals.csv")]
    out: PathBuf,
    /// Guard: must equal the coverage level the model was calibrated at.
    #[arg(long)]
    target_cov: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run(args) => cmd_run(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Score(args) => cmd_score(args),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("config file {} is not a valid experiment config", path.display()))
}

fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn print_summary(value: serde_json::Value) {
    println!("{value}");
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    args.overrides.apply(&mut cfg);
    let dir = resolve_out_dir(args.out_dir).join(&cfg.run_name);
    let run = run_experiment(&cfg)?;
    write_experiment_outputs(&run.report, &dir)?;
    export_models(&run, &dir)?;
    let failures = run.report.failures.len();
    print_summary(serde_json::json!({
        "subcommand": "run",
        "run_name": cfg.run_name,
        "out_dir": dir,
        "seeds": cfg.seeds.len(),
        "rows": run.report.rows.len(),
        "failures": failures,
    }));
    Ok(ExitCode::from(if failures > 0 { 2 } else { 0 }))
}

/// Writes models/seed<k>/{model.json, cal.csv} under the run directory. The
/// calibration CSV holds the raw feature columns plus a final "target"
/// column, ready to feed back into `score` or `diagnose`.
fn export_models(run: &ExperimentRun, dir: &Path) -> Result<()> {
    for art in &run.artifacts {
        let mdir = dir.join("models").join(format!("seed{}", art.seed));
        fs::create_dir_all(&mdir)?;
        let mut text = serde_json::to_string_pretty(&art.model)?;
        text.push('\n');
        fs::write(mdir.join("model.json"), text)?;

        let mut w = csv::Writer::from_path(mdir.join("cal.csv"))?;
        let mut header = art.model.feature_names.clone();
        header.push("target".into());
        w.write_record(&header)?;
        for i in 0..art.cal_y.len() {
            let mut rec: Vec<String> = art.cal_x.row(i).iter().map(|v| format!("{v}")).collect();
            rec.push(format!("{}", art.cal_y[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn parse_estimator(name: &str) -> Result<Sigma2Estimator> {
    match name.trim() {
        "residual" => Ok(Sigma2Estimator::Residual),
        "evidence" => Ok(Sigma2Estimator::Evidence),
        other => bail!("unknown estimator {other:?}; expected residual or evidence"),
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    args.overrides.apply(&mut cfg);
    let lambdas = args.lambdas.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
    let estimators = match &args.estimators {
        Some(names) => names
            .iter()
            .map(|n| parse_estimator(n))
            .collect::<Result<Vec<_>>>()?,
        None => vec![Sigma2Estimator::Residual, Sigma2Estimator::Evidence],
    };
    let dir = resolve_out_dir(args.out_dir).join(&cfg.run_name);
    let report = run_ablation(&cfg, &lambdas, &estimators)?;
    write_ablation_outputs(&report, &dir)?;
    print_summary(serde_json::json!({
        "subcommand": "ablate",
        "run_name": cfg.run_name,
        "out_dir": dir,
        "cells": report.cells.len(),
        "rows": report.rows.len(),
    }));
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

fn load_model(path: &Path) -> Result<SavedModel> {
    let file = if path.is_dir() { path.join("model.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file)
        .with_context(|| format!("cannot read model file {}", file.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("model file {} is not a valid saved model", file.display()))
}

fn parse_target(s: &str) -> TargetColumn {
    match s.parse::<usize>() {
        Ok(i) => TargetColumn::Index(i),
        Err(_) => TargetColumn::Name(s.to_string()),
    }
}

/// Column indices of the model's features inside the dataset, matched by
/// header name so column order never matters.
fn feature_indices(model: &SavedModel, names: &[String]) -> Result<Vec<usize>> {
    model
        .feature_names
        .iter()
        .map(|want| {
            names.iter().position(|have| have == want).with_context(|| {
                format!("input data is missing feature column {want:?} expected by the model")
            })
        })
        .collect()
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<ExitCode> {
    if !args.delimiter.is_ascii() {
        bail!("delimiter must be a single ASCII character");
    }
    let model = load_model(&args.model)?;
    let target = parse_target(&args.target);
    let ds = load_csv(&args.data, &target, args.delimiter as u8)?;
    let idx = feature_indices(&model, &ds.feature_names)?;

    let n = ds.n();
    let d = model.posterior.d;
    let mut flat = Vec::with_capacity(n * d);
    let mut mus = Vec::with_capacity(n);
    let mut sds = Vec::with_capacity(n);
    for i in 0..n {
        let row = ds.x.row(i);
        let x_raw: Vec<f64> = idx.iter().map(|&j| row[j]).collect();
        let phi = model.features_row(&x_raw)?;
        let pred = model.posterior.predictive(&phi, model.standardizer.y_mean)?;
        mus.push(pred.mu);
        sds.push(pred.v.sqrt());
        flat.extend(phi);
    }
    let phis = DenseMatrix::from_vec(n, d, flat)?;
    let (_, summary) = decompose(&model.posterior, &phis, SplitLabel::Test)?;
    let abs_err: Vec<f64> = ds.y.iter().zip(&mus).map(|(y, m)| (y - m).abs()).collect();
    let sp = spearman(&abs_err, &sds)?;
    let thresholds =
        SelectionThresholds { eps_r: args.eps_r, eps_t: args.eps_t, tau_rho: args.tau_rho };
    let verdict = select_method(&summary, &sp, thresholds);

    #[derive(serde::Serialize)]
    struct DiagnoseFile<'a> {
        n_rows: usize,
        dropped_rows: usize,
        summary: &'a claps_core::diagnostics::DecompositionSummary,
        spearman: &'a claps_core::diagnostics::SpearmanResult,
        verdict: &'a claps_core::diagnostics::SelectionVerdict,
    }
    let out = DiagnoseFile {
        n_rows: n,
        dropped_rows: ds.dropped_rows,
        summary: &summary,
        spearman: &sp,
        verdict: &verdict,
    };
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, text)?;

    print_summary(serde_json::json!({
        "subcommand": "diagnose",
        "n_rows": n,
        "verdict": verdict.choice.to_string(),
        "out": args.out,
    }));
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn write_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = ds.feature_names.clone();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v}")).collect();
        rec.push(format!("{}", ds.y[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let ds = match args.kind {
        SynthKind::LinearGaussian => {
            if args.d == 0 {
                bail!("d must be positive");
            }
            let w = vec![1.0 / (args.d as f64).sqrt(); args.d];
            synth_linear_gaussian(args.n, args.d, &w, args.sigma, args.seed)
        }
        SynthKind::Heteroscedastic => synth_heteroscedastic(args.n, args.seed, args.base, args.slope),
    };
    write_dataset_csv(&ds, &args.out)?;
    print_summary(serde_json::json!({
        "subcommand": "synth",
        "rows": ds.n(),
        "cols": ds.dim() + 1,
        "out": args.out,
    }));
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

fn cmd_score(args: ScoreArgs) -> Result<ExitCode> {
    let model = load_model(&args.model)?;
    let cal = model
        .calibration_for(Method::Claps)
        .context("saved model carries no calibrated threshold for the posterior-aware method")?;
    if let Some(tc) = args.target_cov {
        if (tc - model.target_cov).abs() > 1e-12 {
            bail!(
                "model was calibrated at target_cov = {}; requested {tc}. \
                 Re-run the experiment at the desired level.",
                model.target_cov
            );
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&args.input)
        .with_context(|| format!("cannot read input CSV {}", args.input.display()))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let idx = feature_indices(&model, &headers)?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["lo", "hi", "mu", "v", "epi"])?;
    let mut n = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let x_raw: Vec<f64> = idx
            .iter()
            .map(|&j| {
                let cell = record.get(j).unwrap_or("");
                cell.trim().parse::<f64>().with_context(|| {
                    format!(
                        "row {}: column {:?} value {cell:?} is not numeric",
                        line + 2,
                        headers[j]
                    )
                })
            })
            .collect::<Result<_>>()?;
        let pred = model.predictive(&x_raw)?;
        let interval = claps_interval(&pred, cal.threshold);
        w.write_record([
            format!("{}", interval.lo),
            format!("{}", interval.hi),
            format!("{}", pred.mu),
            format!("{}", pred.v),
            format!("{}", pred.epi),
        ])?;
        n += 1;
    }
    w.flush()?;

    print_summary(serde_json::json!({
        "subcommand": "score",
        "rows": n,
        "target_cov": model.target_cov,
        "out": args.out,
    }));
    Ok(ExitCode::SUCCESS)
}
