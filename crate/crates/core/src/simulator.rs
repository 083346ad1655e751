//! Synthetic populations and link-tracing samples.
//!
//! A frame of `N` sites holds the covered population; `n` sites are drawn
//! without replacement. Persons in a sampled site report their links to the
//! other sampled sites; persons elsewhere in the frame and persons outside it
//! are observed only when linked to at least one sampled site.
//!
//! Random streams: [`replicate_rng`] derives replicate `i` of a run as the
//! ChaCha8 generator seeded from the master seed with stream number `i`, so
//! replicates are independent of scheduling.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link_model::{AnyLinkModel, LinkModel, LinkParams, ModelSpec};
use crate::patterns::{OutcomePattern, PatternCounts, SampleData};
use crate::scalar::logistic;

pub const TRUTH_SCHEMA_VERSION: u32 = 1;

/// Law of the cluster sizes `M₁..M_N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClusterMode {
    /// Independent Poisson sizes with mean `lambda`.
    PoissonMean { lambda: f64 },
    /// Multinomial allocation of exactly `tau1` persons over the frame.
    ConditionalMultinomial { tau1: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    #[serde(rename = "N")]
    pub frame_size: usize,
    pub n: usize,
    pub cluster_mode: ClusterMode,
    pub tau2: u64,
    pub model1: ModelSpec,
    pub model2: ModelSpec,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > self.frame_size {
            return Err(Error::Config(format!(
                "need 1 ≤ n ≤ N, got n = {}, N = {}",
                self.n, self.frame_size
            )));
        }
        if let ClusterMode::PoissonMean { lambda } = self.cluster_mode {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(Error::Config(format!("Poisson mean {lambda} must be positive")));
            }
        }
        for (label, spec, theta) in [
            ("model1", &self.model1, &self.theta1),
            ("model2", &self.model2, &self.theta2),
        ] {
            if spec.n != self.n {
                return Err(Error::Config(format!(
                    "{label} has n = {}, design has n = {}",
                    spec.n, self.n
                )));
            }
            let model = spec.build::<f64>()?;
            model
                .validate_params(&LinkParams::new(theta.clone()))
                .map_err(|e| Error::Config(format!("{label} parameters: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Hidden quantities behind one simulated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub schema_version: u32,
    pub tau1: u64,
    pub tau2: u64,
    pub tau: u64,
    pub cluster_sizes: Vec<u64>,
    /// Frame indices of the sampled sites, ascending; sampled site `j` of the
    /// data is frame site `sampled_sites[j]`.
    pub sampled_sites: Vec<usize>,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
}

/// Generator for replicate `replicate` of a run seeded with `master_seed`.
pub fn replicate_rng(master_seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replicate);
    rng
}

pub fn draw_cluster_sizes<R: Rng + ?Sized>(config: &PopulationConfig, rng: &mut R) -> Result<Vec<u64>> {
    let big_n = config.frame_size;
    match config.cluster_mode {
        ClusterMode::PoissonMean { lambda } => {
            let poisson = Poisson::new(lambda).map_err(|e| Error::Config(e.to_string()))?;
            Ok((0..big_n).map(|_| poisson.sample(rng) as u64).collect())
        }
        ClusterMode::ConditionalMultinomial { tau1 } => {
            // Sequential conditional binomials of an equal-probability multinomial.
            let mut remaining = tau1;
            let mut sizes = Vec::with_capacity(big_n);
            for i in 0..big_n {
                let left = (big_n - i) as f64;
                let draw = if i + 1 == big_n || remaining == 0 {
                    remaining
                } else {
                    Binomial::new(remaining, 1.0 / left)
                        .map_err(|e| Error::Config(e.to_string()))?
                        .sample(rng)
                };
                remaining -= draw;
                sizes.push(draw);
            }
            Ok(sizes)
        }
    }
}

/// Draws one person's link pattern from the generative model: independent
/// per-site Bernoulli links, given a normal person effect for the mixed model.
fn draw_pattern<R: Rng + ?Sized>(
    model: &AnyLinkModel<f64>,
    theta: &[f64],
    own_site: Option<usize>,
    rng: &mut R,
) -> OutcomePattern {
    let n = model.sites();
    let shift = match model {
        AnyLinkModel::Homogeneous(_) => 0.0,
        AnyLinkModel::Rasch(_) => {
            let z: f64 = StandardNormal.sample(rng);
            theta[n] * z
        }
    };
    let mut bits = 0u64;
    for (i, &eta) in theta.iter().enumerate().take(n) {
        if own_site == Some(i) {
            continue;
        }
        if rng.random::<f64>() < logistic(eta + shift) {
            bits |= 1 << i;
        }
    }
    OutcomePattern::new(bits, n).expect("bits within n sites")
}

fn record(counts: &mut PatternCounts, x: OutcomePattern) {
    if !x.is_zero() {
        *counts.entry(x).or_insert(0) += 1;
    }
}

/// Simulates one population and the sample drawn from it.
pub fn draw_sample<R: Rng + ?Sized>(config: &PopulationConfig, rng: &mut R) -> Result<(SampleData, GroundTruth)> {
    config.validate()?;
    let model1 = config.model1.build::<f64>()?;
    let model2 = config.model2.build::<f64>()?;
    let sizes = draw_cluster_sizes(config, rng)?;
    let mut sampled = sample_indices(rng, config.frame_size, config.n).into_vec();
    sampled.sort_unstable();

    let n = config.n;
    let site_sizes: Vec<u64> = sampled.iter().map(|&s| sizes[s]).collect();
    let mut within = vec![PatternCounts::new(); n];
    for (l, &m_l) in site_sizes.iter().enumerate() {
        for _ in 0..m_l {
            record(&mut within[l], draw_pattern(&model1, &config.theta1, Some(l), rng));
        }
    }
    let tau1: u64 = sizes.iter().sum();
    let m: u64 = site_sizes.iter().sum();
    let mut between1 = PatternCounts::new();
    for _ in 0..(tau1 - m) {
        record(&mut between1, draw_pattern(&model1, &config.theta1, None, rng));
    }
    let mut between2 = PatternCounts::new();
    for _ in 0..config.tau2 {
        record(&mut between2, draw_pattern(&model2, &config.theta2, None, rng));
    }
    let data = SampleData::new(n, config.frame_size, site_sizes, between1, within, between2)?;
    let truth = GroundTruth {
        schema_version: TRUTH_SCHEMA_VERSION,
        tau1,
        tau2: config.tau2,
        tau: tau1 + config.tau2,
        cluster_sizes: sizes,
        sampled_sites: sampled,
        theta1: config.theta1.clone(),
        theta2: config.theta2.clone(),
    };
    Ok((data, truth))
}
