use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use snowlink::estimators::{fit_total, FitOptions, Method};
use snowlink::experiment::{emit_reports, run_experiment, ExperimentConfig, ReportPaths};
use snowlink::link_model::{AnyLinkModel, LinkParams, ModelSpec};
use snowlink::simulator::{draw_sample, replicate_rng, PopulationConfig};
use snowlink::variance::{asymptotic_matrices, variance_report, Design, VarianceSource, Which};
use snowlink::SampleData;

const MATRIX_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "snowlink",
    version,
    about = "Hidden-population size estimation from link-tracing samples"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Umle,
    Cmle,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Umle => Method::Umle,
            MethodArg::Cmle => Method::Cmle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Sigma1,
    Psi1,
    Sigma2,
}

impl From<WhichArg> for Which {
    fn from(w: WhichArg) -> Self {
        match w {
            WhichArg::Sigma1 => Which::Sigma1,
            WhichArg::Psi1 => Which::Psi1,
            WhichArg::Sigma2 => Which::Sigma2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceArg {
    Analytic,
    Empirical,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one sample from a population configuration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the hidden ground truth here.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Estimate τ₁, τ₂ and τ from a sample file.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// A model spec used for both sub-populations, or {"model1", "model2"}.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
        /// Confidence level of the Wald intervals.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, value_enum, default_value = "analytic")]
        variance: VarianceArg,
    },
    /// Evaluate an asymptotic precision matrix and its inverse.
    Matrices {
        #[arg(long)]
        model: PathBuf,
        /// JSON array with the parameter vector.
        #[arg(long)]
        theta: PathBuf,
        /// Design as "n,N".
        #[arg(long)]
        design: Design,
        #[arg(long, value_enum)]
        which: WhichArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo experiment.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the worker count of the configuration.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the output directory of the configuration.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ModelFile {
    Pair { model1: ModelSpec, model2: ModelSpec },
    Single(ModelSpec),
}

impl ModelFile {
    fn load(path: &Path) -> Result<(ModelSpec, ModelSpec)> {
        let file: ModelFile = read_json(path)?;
        Ok(match file {
            ModelFile::Pair { model1, model2 } => (model1, model2),
            ModelFile::Single(spec) => (spec.clone(), spec),
        })
    }
}

#[derive(Serialize)]
struct MatrixFile {
    schema_version: u32,
    which: Which,
    design: Design,
    theta: Vec<f64>,
    inverse_form: Vec<Vec<f64>>,
    covariance_form: Vec<Vec<f64>>,
    condition_number: f64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(config: &Path, seed: u64, out: &Path, truth: Option<&Path>) -> Result<()> {
    let cfg = PopulationConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let (data, gt) = draw_sample(&cfg, &mut replicate_rng(seed, 0))?;
    data.save(out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = truth {
        write_json(path, &gt)?;
    }
    Ok(())
}

fn estimate(data: &Path, model: &Path, method: Method, out: &Path, level: f64, source: VarianceSource) -> Result<()> {
    let sample = SampleData::load(data).with_context(|| format!("loading {}", data.display()))?;
    let (spec1, spec2) = ModelFile::load(model)?;
    let model1: AnyLinkModel<f64> = spec1.build()?;
    let model2: AnyLinkModel<f64> = spec2.build()?;
    let mut report = fit_total(&sample, &model1, &model2, method, &FitOptions::default())?;
    report.variance = Some(variance_report(&report, &sample, &model1, &model2, level, source)?);
    write_json(out, &report)
}

fn matrices(model: &Path, theta: &Path, design: Design, which: Which, out: &Path) -> Result<()> {
    let (spec1, spec2) = ModelFile::load(model)?;
    let spec = if which == Which::Sigma2 { spec2 } else { spec1 };
    let model: AnyLinkModel<f64> = spec.build()?;
    let theta: Vec<f64> = read_json(theta)?;
    let m = asymptotic_matrices(which, &LinkParams::new(theta.clone()), &model, &design)?;
    write_json(
        out,
        &MatrixFile {
            schema_version: MATRIX_SCHEMA_VERSION,
            which,
            design,
            theta,
            inverse_form: m.inverse_form.to_rows(),
            covariance_form: m.covariance_form.to_rows(),
            condition_number: m.condition_number,
        },
    )
}

fn experiment(config: &Path, workers: Option<usize>, out_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(w) = workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        cfg.workers = w;
    }
    let dir = out_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let result = run_experiment(&cfg)?;
    emit_reports(&result, &ReportPaths::in_dir(&dir))?;
    for m in &result.summary.methods {
        eprintln!("{}: {} ok, {} failed", m.method, m.successes, m.failures);
    }
    eprintln!("reports written to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            seed,
            out,
            truth,
        } => simulate(&config, seed, &out, truth.as_deref()),
        Command::Estimate {
            data,
            model,
            method,
            out,
            level,
            variance,
        } => {
            let source = match variance {
                VarianceArg::Analytic => VarianceSource::Analytic,
                VarianceArg::Empirical => VarianceSource::EmpiricalV,
            };
            estimate(&data, &model, method.into(), &out, level, source)
        }
        Command::Matrices {
            model,
            theta,
            design,
            which,
            out,
        } => matrices(&model, &theta, design, which.into(), &out),
        Command::Experiment {
            config,
            workers,
            out_dir,
        } => experiment(&config, workers, out_dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
