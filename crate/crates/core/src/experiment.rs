//! Monte Carlo experiments: simulate, estimate, attach variances and
//! intervals, aggregate.
//!
//! Replicates run on a dedicated thread pool; results are collected in
//! replicate order and folded sequentially, so output is identical for any
//! worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{fit_total, FitOptions, Method};
use crate::link_model::{AnyLinkModel, LinkParams};
use crate::simulator::{draw_sample, replicate_rng, GroundTruth, PopulationConfig};
use crate::variance::{
    normal_quantile, theta_covariance_1, theta_covariance_2, variance_report, Design, VarianceSource,
};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

/// Column names of the per-replicate CSV, in order.
pub const CSV_HEADER: [&str; 31] = [
    "replicate",
    "method",
    "status",
    "tau1_true",
    "tau2_true",
    "tau_true",
    "tau1_hat",
    "tau2_hat",
    "tau_hat",
    "tau1_real",
    "tau2_real",
    "sigma1_sq",
    "sigma2_sq",
    "sigma_sq",
    "tau1_lower",
    "tau1_upper",
    "tau2_lower",
    "tau2_upper",
    "tau_lower",
    "tau_upper",
    "tau1_covered",
    "tau2_covered",
    "tau_covered",
    "tau1_z",
    "tau2_z",
    "tau_z",
    "theta1",
    "theta2",
    "theta1_sd",
    "theta2_sd",
    "error",
];

fn default_schema() -> u32 {
    EXPERIMENT_SCHEMA_VERSION
}

fn default_methods() -> Vec<Method> {
    vec![Method::Umle, Method::Cmle]
}

fn default_workers() -> usize {
    1
}

fn default_level() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub population: PopulationConfig,
    pub replicates: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub master_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub fit: FitOptions,
    /// Directory for the reports; relative paths resolve against the
    /// working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no estimation methods requested".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level {} is not in (0, 1)", self.level)));
        }
        self.population.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One CSV row: a replicate fitted by one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    pub method: Method,
    /// `ok` or the failure kind.
    pub status: String,
    pub tau1_true: u64,
    pub tau2_true: u64,
    pub tau_true: u64,
    pub tau1_hat: Option<u64>,
    pub tau2_hat: Option<u64>,
    pub tau_hat: Option<u64>,
    pub tau1_real: Option<f64>,
    pub tau2_real: Option<f64>,
    pub sigma1_sq: Option<f64>,
    pub sigma2_sq: Option<f64>,
    pub sigma_sq: Option<f64>,
    pub tau1_lower: Option<f64>,
    pub tau1_upper: Option<f64>,
    pub tau2_lower: Option<f64>,
    pub tau2_upper: Option<f64>,
    pub tau_lower: Option<f64>,
    pub tau_upper: Option<f64>,
    pub tau1_covered: Option<bool>,
    pub tau2_covered: Option<bool>,
    pub tau_covered: Option<bool>,
    pub tau1_z: Option<f64>,
    pub tau2_z: Option<f64>,
    pub tau_z: Option<f64>,
    /// `;`-separated coordinates.
    pub theta1: String,
    pub theta2: String,
    /// `;`-separated asymptotic standard deviations of the coordinates.
    pub theta1_sd: String,
    pub theta2_sd: String,
    pub error: String,
}

impl ReplicateRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Aggregate statistics of one estimated quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: String,
    pub count: u64,
    pub mean: Option<f64>,
    pub truth_mean: Option<f64>,
    pub bias: Option<f64>,
    /// Mean of estimate / truth (population sizes only).
    pub mean_ratio: Option<f64>,
    /// Standard deviation of estimate − truth.
    pub empirical_sd: Option<f64>,
    pub mean_asymptotic_sd: Option<f64>,
    pub sd_ratio: Option<f64>,
    pub coverage: Option<f64>,
    /// Moments and Kolmogorov–Smirnov distance of the standardized residuals.
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub ks_statistic: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub successes: u64,
    pub failures: u64,
    pub failure_kinds: BTreeMap<String, u64>,
    pub targets: Vec<TargetSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub schema_version: u32,
    pub replicates: u64,
    pub master_seed: u64,
    pub level: f64,
    pub methods: Vec<MethodSummary>,
}

impl MonteCarloSummary {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

impl MethodSummary {
    pub fn target(&self, name: &str) -> Option<&TargetSummary> {
        self.targets.iter().find(|t| t.target == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub summary: MonteCarloSummary,
    /// Ordered by replicate, then by the configured method order.
    pub records: Vec<ReplicateRecord>,
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn split(values: &str) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    values.split(';').map(|v| v.parse().unwrap_or(f64::NAN)).collect()
}

fn failed(replicate: u64, method: Method, truth: &GroundTruth, error: &Error) -> ReplicateRecord {
    ReplicateRecord {
        replicate,
        method,
        status: error.kind().to_string(),
        tau1_true: truth.tau1,
        tau2_true: truth.tau2,
        tau_true: truth.tau,
        tau1_hat: None,
        tau2_hat: None,
        tau_hat: None,
        tau1_real: None,
        tau2_real: None,
        sigma1_sq: None,
        sigma2_sq: None,
        sigma_sq: None,
        tau1_lower: None,
        tau1_upper: None,
        tau2_lower: None,
        tau2_upper: None,
        tau_lower: None,
        tau_upper: None,
        tau1_covered: None,
        tau2_covered: None,
        tau_covered: None,
        tau1_z: None,
        tau2_z: None,
        tau_z: None,
        theta1: String::new(),
        theta2: String::new(),
        theta1_sd: String::new(),
        theta2_sd: String::new(),
        error: error.to_string(),
    }
}

fn standardized(estimate: u64, truth: u64, sigma_sq: f64) -> Option<f64> {
    let scale = (truth as f64 * sigma_sq).sqrt();
    (scale > 0.0).then(|| (estimate as f64 - truth as f64) / scale)
}

fn sds(cov: Result<crate::linalg::Matrix<f64>>, tau: u64) -> Vec<f64> {
    match cov {
        Ok(c) => (0..c.rows())
            .map(|j| (c[(j, j)].max(0.0) / tau as f64).sqrt())
            .collect(),
        Err(_) => Vec::new(),
    }
}

struct Models {
    model1: AnyLinkModel<f64>,
    model2: AnyLinkModel<f64>,
}

fn run_one(config: &ExperimentConfig, models: &Models, replicate: u64) -> Result<Vec<ReplicateRecord>> {
    let mut rng = replicate_rng(config.master_seed, replicate);
    let (data, truth) = draw_sample(&config.population, &mut rng)?;
    let design = Design::of(&data);
    let mut out = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let fitted = fit_total(&data, &models.model1, &models.model2, method, &config.fit).and_then(|report| {
            let v = variance_report(
                &report,
                &data,
                &models.model1,
                &models.model2,
                config.level,
                VarianceSource::Analytic,
            )?;
            Ok((report, v))
        });
        let (report, v) = match fitted {
            Ok(ok) => ok,
            Err(e) => {
                out.push(failed(replicate, method, &truth, &e));
                continue;
            }
        };
        let theta1_sd = sds(
            theta_covariance_1(method, &report.u1.theta, &models.model1, &design),
            report.u1.tau_floor,
        );
        let theta2_sd = sds(
            theta_covariance_2(&report.u2.theta, &models.model2),
            report.u2.tau_floor,
        );
        out.push(ReplicateRecord {
            replicate,
            method,
            status: "ok".into(),
            tau1_true: truth.tau1,
            tau2_true: truth.tau2,
            tau_true: truth.tau,
            tau1_hat: Some(report.u1.tau_floor),
            tau2_hat: Some(report.u2.tau_floor),
            tau_hat: Some(report.tau),
            tau1_real: Some(report.u1.tau),
            tau2_real: Some(report.u2.tau),
            sigma1_sq: Some(v.sigma1_sq),
            sigma2_sq: Some(v.sigma2_sq),
            sigma_sq: Some(v.sigma_sq),
            tau1_lower: Some(v.tau1_interval.lower),
            tau1_upper: Some(v.tau1_interval.upper),
            tau2_lower: Some(v.tau2_interval.lower),
            tau2_upper: Some(v.tau2_interval.upper),
            tau_lower: Some(v.tau_interval.lower),
            tau_upper: Some(v.tau_interval.upper),
            tau1_covered: Some(v.tau1_interval.contains(truth.tau1 as f64)),
            tau2_covered: Some(v.tau2_interval.contains(truth.tau2 as f64)),
            tau_covered: Some(v.tau_interval.contains(truth.tau as f64)),
            tau1_z: standardized(report.u1.tau_floor, truth.tau1, v.sigma1_sq),
            tau2_z: standardized(report.u2.tau_floor, truth.tau2, v.sigma2_sq),
            tau_z: standardized(report.tau, truth.tau, v.sigma_sq),
            theta1: join(report.u1.theta.values()),
            theta2: join(report.u2.theta.values()),
            theta1_sd: join(&theta1_sd),
            theta2_sd: join(&theta2_sd),
            error: String::new(),
        });
    }
    Ok(out)
}

/// Runs all replicates and aggregates them.
///
/// Estimation failures are recorded per replicate; configuration and
/// simulation errors abort the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let models = Models {
        model1: config.population.model1.build()?,
        model2: config.population.model2.build()?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let per_replicate: Vec<Result<Vec<ReplicateRecord>>> = pool.install(|| {
        (0..config.replicates)
            .into_par_iter()
            .map(|i| run_one(config, &models, i))
            .collect()
    });
    let mut records = Vec::with_capacity(per_replicate.len() * config.methods.len());
    for r in per_replicate {
        records.extend(r?);
    }
    let summary = summarize(config, &records);
    Ok(ExperimentResult { summary, records })
}

/// Estimate, truth, σ² and covered flag of one τ target in a record.
type TauGetter = fn(&ReplicateRecord) -> (u64, u64, f64, bool);

/// Sample of one target: estimate, truth, asymptotic SD, covered flag.
#[derive(Default)]
struct Sample {
    estimate: Vec<f64>,
    truth: Vec<f64>,
    asym_sd: Vec<f64>,
    covered: Vec<bool>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Sample skewness and excess kurtosis (moment estimators).
pub fn shape_statistics(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.len() < 3 {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return (None, None);
    }
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (Some(m3 / m2.powf(1.5)), Some(m4 / (m2 * m2) - 3.0))
}

/// Kolmogorov–Smirnov distance between the sample and the standard normal.
pub fn ks_statistic(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let d = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    Some(d)
}

fn summarize_target(name: String, s: &Sample, with_ratio: bool) -> TargetSummary {
    let errors: Vec<f64> = s.estimate.iter().zip(&s.truth).map(|(e, t)| e - t).collect();
    let z: Vec<f64> = errors
        .iter()
        .zip(&s.asym_sd)
        .filter(|(_, &sd)| sd > 0.0 && sd.is_finite())
        .map(|(e, sd)| e / sd)
        .collect();
    let ratios: Vec<f64> = s
        .estimate
        .iter()
        .zip(&s.truth)
        .filter(|(_, &t)| t != 0.0)
        .map(|(e, t)| e / t)
        .collect();
    let empirical_sd = sd(&errors);
    let asym: Vec<f64> = s.asym_sd.iter().copied().filter(|v| v.is_finite()).collect();
    let mean_asymptotic_sd = mean(&asym);
    let (skewness, excess_kurtosis) = shape_statistics(&z);
    TargetSummary {
        target: name,
        count: s.estimate.len() as u64,
        mean: mean(&s.estimate),
        truth_mean: mean(&s.truth),
        bias: mean(&errors),
        mean_ratio: if with_ratio { mean(&ratios) } else { None },
        sd_ratio: match (empirical_sd, mean_asymptotic_sd) {
            (Some(e), Some(a)) if a > 0.0 => Some(e / a),
            _ => None,
        },
        empirical_sd,
        mean_asymptotic_sd,
        coverage: (!s.covered.is_empty())
            .then(|| s.covered.iter().filter(|&&c| c).count() as f64 / s.covered.len() as f64),
        skewness,
        excess_kurtosis,
        ks_statistic: ks_statistic(&z),
    }
}

fn summarize(config: &ExperimentConfig, records: &[ReplicateRecord]) -> MonteCarloSummary {
    let z = normal_quantile(config.level).expect("validated level");
    let q1 = config.population.theta1.len();
    let q2 = config.population.theta2.len();
    let mut methods = Vec::new();
    for &method in &config.methods {
        let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method).collect();
        let ok: Vec<&&ReplicateRecord> = rows.iter().filter(|r| r.is_ok()).collect();
        let mut failure_kinds = BTreeMap::new();
        for r in rows.iter().filter(|r| !r.is_ok()) {
            *failure_kinds.entry(r.status.clone()).or_insert(0) += 1;
        }
        let mut targets = Vec::new();
        let tau_targets: [(&str, TauGetter); 3] = [
            ("tau1", |r| {
                (
                    r.tau1_hat.unwrap(),
                    r.tau1_true,
                    r.sigma1_sq.unwrap(),
                    r.tau1_covered.unwrap(),
                )
            }),
            ("tau2", |r| {
                (
                    r.tau2_hat.unwrap(),
                    r.tau2_true,
                    r.sigma2_sq.unwrap(),
                    r.tau2_covered.unwrap(),
                )
            }),
            ("tau", |r| {
                (
                    r.tau_hat.unwrap(),
                    r.tau_true,
                    r.sigma_sq.unwrap(),
                    r.tau_covered.unwrap(),
                )
            }),
        ];
        for (name, get) in tau_targets {
            let mut s = Sample::default();
            for r in &ok {
                let (est, truth, sigma_sq, covered) = get(r);
                s.estimate.push(est as f64);
                s.truth.push(truth as f64);
                s.asym_sd.push((truth as f64 * sigma_sq).sqrt());
                s.covered.push(covered);
            }
            targets.push(summarize_target(name.to_string(), &s, true));
        }
        let theta_sets = [
            ("theta1", q1, &config.population.theta1),
            ("theta2", q2, &config.population.theta2),
        ];
        for (label, q, truth) in theta_sets {
            for j in 0..q {
                let mut s = Sample::default();
                for r in &ok {
                    let (values, sds) = if label == "theta1" {
                        (split(&r.theta1), split(&r.theta1_sd))
                    } else {
                        (split(&r.theta2), split(&r.theta2_sd))
                    };
                    let est = values[j];
                    let asym = sds.get(j).copied().unwrap_or(f64::NAN);
                    s.estimate.push(est);
                    s.truth.push(truth[j]);
                    s.asym_sd.push(asym);
                    s.covered.push(asym.is_finite() && (est - truth[j]).abs() <= z * asym);
                }
                targets.push(summarize_target(format!("{label}[{j}]"), &s, false));
            }
        }
        methods.push(MethodSummary {
            method,
            successes: ok.len() as u64,
            failures: (rows.len() - ok.len()) as u64,
            failure_kinds,
            targets,
        });
    }
    MonteCarloSummary {
        schema_version: EXPERIMENT_SCHEMA_VERSION,
        replicates: config.replicates,
        master_seed: config.master_seed,
        level: config.level,
        methods,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text digest of a summary.
pub fn digest(summary: &MonteCarloSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "replicates {}  seed {}  level {}",
        summary.replicates, summary.master_seed, summary.level
    );
    for m in &summary.methods {
        let _ = writeln!(out, "\n{}: {} ok, {} failed", m.method, m.successes, m.failures);
        for (kind, count) in &m.failure_kinds {
            let _ = writeln!(out, "  failure {kind}: {count}");
        }
        let _ = writeln!(
            out,
            "  {:<10} {:>12} {:>10} {:>8} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "target", "mean", "bias", "ratio", "emp_sd", "asym_sd", "sd_rat", "cover", "skew", "kurt", "ks"
        );
        for t in &m.targets {
            let _ = writeln!(
                out,
                "  {:<10} {:>12} {:>10} {:>8} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}",
                t.target,
                fmt_opt(t.mean),
                fmt_opt(t.bias),
                fmt_opt(t.mean_ratio),
                fmt_opt(t.empirical_sd),
                fmt_opt(t.mean_asymptotic_sd),
                fmt_opt(t.sd_ratio),
                fmt_opt(t.coverage),
                fmt_opt(t.skewness),
                fmt_opt(t.excess_kurtosis),
                fmt_opt(t.ks_statistic),
            );
        }
    }
    out
}

/// Paths written by [`emit_reports`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub summary: PathBuf,
    pub replicates: PathBuf,
    pub digest: PathBuf,
}

impl ReportPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            summary: dir.join("summary.json"),
            replicates: dir.join("replicates.csv"),
            digest: dir.join("digest.txt"),
        }
    }
}

/// Per-replicate rows as CSV text with the [`CSV_HEADER`] columns.
pub fn records_csv(records: &[ReplicateRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(CSV_HEADER).map_err(|e| Error::Parse(e.to_string()))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Parses CSV text produced by [`records_csv`].
pub fn parse_records_csv(text: &str) -> Result<Vec<ReplicateRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

/// Writes the JSON summary, the per-replicate CSV and the text digest.
pub fn emit_reports(result: &ExperimentResult, paths: &ReportPaths) -> Result<()> {
    for p in [&paths.summary, &paths.replicates, &paths.digest] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&paths.summary, serde_json::to_string_pretty(&result.summary)? + "\n")?;
    std::fs::write(&paths.replicates, records_csv(&result.records)?)?;
    std::fs::write(&paths.digest, digest(&result.summary))?;
    Ok(())
}

/// Parameters of a record, for callers that need them back as vectors.
pub fn record_theta(record: &ReplicateRecord) -> (LinkParams<f64>, LinkParams<f64>) {
    (
        LinkParams::new(split(&record.theta1)),
        LinkParams::new(split(&record.theta2)),
    )
}
