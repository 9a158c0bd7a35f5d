use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ridgecrest::experiment::{
    fit_models, metric_from_files, run_experiment, sweep_csv, write_atomic, write_failures, write_run_outputs,
    ExperimentConfig, FileMetric, Method,
};

#[derive(Parser)]
#[command(name = "ridgecrest", version, about = "Mode-seeking clustering and density ridge estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the gradient (and Hessian) models and write them as JSON.
    Fit(RunArgs),
    /// Cluster by mode seeking; writes labels.csv and metrics.json.
    Cluster(RunArgs),
    /// Estimate density ridges; writes ridge_points.csv and metrics.json.
    Ridge(RunArgs),
    /// Run a sweep over n or D; writes sweep.csv and metrics.json.
    Benchmark(RunArgs),
    /// Compare a prediction file with a reference file.
    Metrics(MetricArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method, or a comma-separated list; overrides the config.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// Ridge dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Number of kernel centers (default min(n, 100)).
    #[arg(long)]
    centers: Option<usize>,
    /// Use the standard deviation rather than the variance in the normal-reference bandwidth.
    #[arg(long)]
    nr_sqrt: bool,
    /// Constrain the fitted coefficients to be non-negative.
    #[arg(long)]
    nonneg_beta: bool,
}

#[derive(Args)]
struct MetricArgs {
    /// ari, ridge_error, hausdorff or mean_log_kde.
    #[arg(long)]
    metric: FileMetric,
    /// Predicted labels or points.
    #[arg(long)]
    pred: PathBuf,
    /// Reference labels, truth grid or reference samples.
    #[arg(long)]
    reference: PathBuf,
    /// KDE bandwidth for mean_log_kde.
    #[arg(long)]
    bandwidth: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if self.d.is_some() {
            cfg.ridge_dim = self.d;
        }
        if self.centers.is_some() {
            cfg.centers = self.centers;
        }
        cfg.nr_sqrt |= self.nr_sqrt;
        cfg.nonneg_beta |= self.nonneg_beta;
        let out = match self.out.clone().or_else(|| cfg.output_dir.clone()) {
            Some(o) => o,
            None => bail!("no output directory: pass --out or set output_dir"),
        };
        cfg.validate()?;
        Ok((cfg, out))
    }
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run_cmd(args: &RunArgs, ridge: Option<bool>) -> anyhow::Result<bool> {
    let (cfg, out) = args.load()?;
    if let Some(ridge) = ridge {
        if let Some(m) = cfg.methods.iter().find(|m| m.is_ridge() != ridge) {
            bail!("method {} does not belong to this command", m.name());
        }
    }
    let result = run_experiment(&cfg, args.jobs)?;
    report(&write_run_outputs(&out, &result)?);
    Ok(result.succeeded())
}

fn benchmark(args: &RunArgs) -> anyhow::Result<bool> {
    let (cfg, out) = args.load()?;
    if cfg.sweep.is_none() {
        bail!("benchmark needs a sweep in the config");
    }
    let result = run_experiment(&cfg, args.jobs)?;
    let mut paths = vec![
        write_atomic(&out, "sweep.csv", &sweep_csv(&cfg, &result))?,
        write_atomic(&out, "metrics.json", &ridgecrest::experiment::metrics_json(&result))?,
    ];
    paths.extend(write_failures(&out, &result)?);
    report(&paths);
    Ok(result.succeeded())
}

fn fit(args: &RunArgs) -> anyhow::Result<bool> {
    let (cfg, out) = args.load()?;
    match fit_models(&cfg, &out, args.jobs) {
        Ok(paths) => {
            report(&paths);
            Ok(true)
        }
        Err(e) => {
            write_fit_failure(&out, &cfg, &e.to_string())?;
            Err(e.into())
        }
    }
}

fn write_fit_failure(out: &Path, cfg: &ExperimentConfig, message: &str) -> anyhow::Result<()> {
    let doc = serde_json::json!({
        "provenance": ridgecrest::experiment::Provenance::new(cfg),
        "failures": [{ "command": "fit", "error": message }],
    });
    write_atomic(out, "failures.json", &serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RIDGECREST_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Cluster(a) => run_cmd(a, Some(false)),
        Command::Ridge(a) => run_cmd(a, Some(true)),
        Command::Benchmark(a) => benchmark(a),
        Command::Metrics(a) => metric_from_files(a.metric, &a.pred, &a.reference, a.bandwidth)
            .map(|v| {
                println!("{}", serde_json::json!({ "metric": a.metric, "value": v }));
                true
            })
            .map_err(Into::into),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("some repetitions failed; see failures.json");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
