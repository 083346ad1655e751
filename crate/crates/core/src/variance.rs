//! Asymptotic covariance of the estimators.
//!
//! Three precision matrices are available, each computed by enumerating the
//! pattern spaces:
//!
//! * `Sigma1` (UMLE, covered population), index 0 is the τ₁ coordinate;
//! * `Psi1` (CMLE θ-part, covered population), built from the zero-truncated
//!   probabilities `π̃_x = π_x / (1 − π₀)`;
//! * `Sigma2` (uncovered population), index 0 is τ₂.
//!
//! The same matrices can be estimated empirically as sample covariances of
//! per-person score vectors ("V-vectors"), which needs no enumeration.
//! Scalar variances refer to the `√τ` scale: `Var(τ̂) ≈ τ̂ σ²`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{EstimateReport, Method};
use crate::linalg::{Matrix, MAX_CONDITION};
use crate::link_model::{LinkModel, LinkParams, Scope};
use crate::patterns::{enumerate_patterns, OutcomePattern, SampleData};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Sigma1,
    Psi1,
    Sigma2,
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Sigma1 => "sigma1",
            Which::Psi1 => "psi1",
            Which::Sigma2 => "sigma2",
        })
    }
}

impl FromStr for Which {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigma1" => Ok(Which::Sigma1),
            "psi1" => Ok(Which::Psi1),
            "sigma2" => Ok(Which::Sigma2),
            other => Err(Error::Config(format!("unknown matrix {other:?}"))),
        }
    }
}

/// Sampling design: `n` sampled sites out of a frame of `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Design {
    pub n: usize,
    #[serde(rename = "N")]
    pub big_n: usize,
}

impl Design {
    pub fn new(n: usize, big_n: usize) -> Result<Self> {
        if n == 0 || n > big_n {
            return Err(Error::InvalidParameter(format!(
                "design needs 1 ≤ n ≤ N, got n = {n}, N = {big_n}"
            )));
        }
        Ok(Self { n, big_n })
    }

    pub fn of(data: &SampleData) -> Self {
        Self {
            n: data.sites(),
            big_n: data.frame_size(),
        }
    }

    /// `1 − n/N`.
    pub fn outside_fraction<T: Real>(&self) -> T {
        T::one() - T::count(self.n as u64) / T::count(self.big_n as u64)
    }
}

impl FromStr for Design {
    type Err = Error;
    /// Parses `"n,N"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [n, big_n] = parts.as_slice() else {
            return Err(Error::Parse(format!("design {s:?} is not of the form n,N")));
        };
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|e| Error::Parse(format!("design {s:?}: {e}")))
        };
        Self::new(parse(n)?, parse(big_n)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticMatrices<T> {
    pub which: Which,
    pub inverse_form: Matrix<T>,
    pub covariance_form: Matrix<T>,
    pub condition_number: f64,
}

impl<T: Real> AsymptoticMatrices<T> {
    fn from_inverse(which: Which, mut inverse_form: Matrix<T>) -> Result<Self> {
        inverse_form.symmetrize();
        if !inverse_form.is_finite() {
            return Err(Error::NonFiniteLikelihood(format!("{which} has non-finite entries")));
        }
        let condition_number = inverse_form.condition_number().as_f64();
        if !(condition_number <= MAX_CONDITION) {
            return Err(Error::SingularMatrix {
                condition: condition_number,
            });
        }
        let covariance_form = inverse_form.symmetric_inverse()?;
        Ok(Self {
            which,
            inverse_form,
            covariance_form,
            condition_number,
        })
    }
}

/// Enumerated information pieces shared by the three matrices.
struct Pieces<T> {
    pi0: T,
    grad0: Vec<T>,
    /// `Σ_{x∈Ω} ∇π_x ∇π_xᵀ / π_x`.
    between: Matrix<T>,
    /// `Σ_{x≠0} ∇π̃_x ∇π̃_xᵀ / π̃_x`.
    truncated: Matrix<T>,
    /// `Σ_l Σ_{x∈Ω₋ₗ} ∇π_x^(A_l) ∇π_x^(A_l)ᵀ / π_x^(A_l)`.
    within: Matrix<T>,
}

fn checked_prob<T: Real>(p: T, x: OutcomePattern) -> Result<T> {
    if p > T::zero() && p.is_finite() {
        Ok(p)
    } else {
        Err(Error::NonFiniteLikelihood(format!("pattern {x} has probability {p}")))
    }
}

fn pieces<T: Real, M: LinkModel<T> + ?Sized>(theta: &LinkParams<T>, model: &M, with_within: bool) -> Result<Pieces<T>> {
    model.validate_params(theta)?;
    let n = model.sites();
    let q = model.dim();
    let th = theta.values();
    let (pi0, grad0) = model.eval_unchecked(th, OutcomePattern::zero(n), Scope::Between);
    let pi0 = checked_prob(pi0, OutcomePattern::zero(n))?;
    let linked = T::one() - pi0;
    if !(linked > T::zero()) {
        return Err(Error::NonFiniteLikelihood("linked-pattern mass is zero".into()));
    }
    let mut between = Matrix::zeros(q, q);
    let mut truncated = Matrix::zeros(q, q);
    for x in enumerate_patterns(n, None)? {
        let (p, dp) = model.eval_unchecked(th, x, Scope::Between);
        let p = checked_prob(p, x)?;
        between.add_outer(T::one() / p, &dp, &dp);
        if !x.is_zero() {
            let pt = p / linked;
            let dpt: Vec<T> = dp
                .iter()
                .zip(&grad0)
                .map(|(&d, &d0)| d / linked + p * d0 / (linked * linked))
                .collect();
            truncated.add_outer(T::one() / pt, &dpt, &dpt);
        }
    }
    let mut within = Matrix::zeros(q, q);
    if with_within {
        for l in 0..n {
            for x in enumerate_patterns(n, Some(l))? {
                let (p, dp) = model.eval_unchecked(th, x, Scope::Within(l));
                let p = checked_prob(p, x)?;
                within.add_outer(T::one() / p, &dp, &dp);
            }
        }
    }
    Ok(Pieces {
        pi0,
        grad0,
        between,
        truncated,
        within,
    })
}

/// Bordered `(q+1)×(q+1)` matrix with τ in position 0.
fn bordered<T: Real>(corner: T, grad0: &[T], pi0: T, block: &Matrix<T>) -> Matrix<T> {
    let q = grad0.len();
    let mut m = Matrix::zeros(q + 1, q + 1);
    m[(0, 0)] = corner;
    for j in 0..q {
        let v = -grad0[j] / pi0;
        m[(0, j + 1)] = v;
        m[(j + 1, 0)] = v;
        for i in 0..q {
            m[(i + 1, j + 1)] = block[(i, j)];
        }
    }
    m
}

fn sigma1_block<T: Real>(p: &Pieces<T>, design: &Design) -> Matrix<T> {
    let c = design.outside_fraction::<T>();
    p.between
        .scaled(c)
        .add(&p.within.scaled(T::one() / T::count(design.big_n as u64)))
}

fn psi1_block<T: Real>(p: &Pieces<T>, design: &Design) -> Matrix<T> {
    let c = design.outside_fraction::<T>();
    p.truncated
        .scaled(c * (T::one() - p.pi0))
        .add(&p.within.scaled(T::one() / T::count(design.big_n as u64)))
}

fn check_design<T: Real, M: LinkModel<T> + ?Sized>(model: &M, design: &Design) -> Result<()> {
    Design::new(design.n, design.big_n)?;
    if model.sites() != design.n {
        return Err(Error::DimensionMismatch {
            expected: design.n,
            found: model.sites(),
        });
    }
    Ok(())
}

/// Precision matrix of the UMLE `(τ₁, θ₁)`; requires `n < N`.
pub fn sigma1_inverse<T: Real, M: LinkModel<T> + ?Sized>(
    theta: &LinkParams<T>,
    model: &M,
    design: &Design,
) -> Result<AsymptoticMatrices<T>> {
    check_design(model, design)?;
    let p = pieces(theta, model, true)?;
    let c_pi0 = design.outside_fraction::<T>() * p.pi0;
    if c_pi0.as_f64() <= 1e-12 {
        return Err(Error::DegenerateDenominator(c_pi0.as_f64()));
    }
    let corner = (T::one() - c_pi0) / c_pi0;
    AsymptoticMatrices::from_inverse(
        Which::Sigma1,
        bordered(corner, &p.grad0, p.pi0, &sigma1_block(&p, design)),
    )
}

/// Precision matrix of the CMLE θ₁.
pub fn psi1_inverse<T: Real, M: LinkModel<T> + ?Sized>(
    theta: &LinkParams<T>,
    model: &M,
    design: &Design,
) -> Result<AsymptoticMatrices<T>> {
    check_design(model, design)?;
    let p = pieces(theta, model, true)?;
    AsymptoticMatrices::from_inverse(Which::Psi1, psi1_block(&p, design))
}

/// Precision matrix of `(τ₂, θ₂)`.
pub fn sigma2_inverse<T: Real, M: LinkModel<T> + ?Sized>(
    theta: &LinkParams<T>,
    model: &M,
) -> Result<AsymptoticMatrices<T>> {
    let p = pieces(theta, model, false)?;
    let corner = (T::one() - p.pi0) / p.pi0;
    AsymptoticMatrices::from_inverse(Which::Sigma2, bordered(corner, &p.grad0, p.pi0, &p.between))
}

/// Dispatches on `which`; `design` is ignored for `Sigma2`.
pub fn asymptotic_matrices<T: Real, M: LinkModel<T> + ?Sized>(
    which: Which,
    theta: &LinkParams<T>,
    model: &M,
    design: &Design,
) -> Result<AsymptoticMatrices<T>> {
    match which {
        Which::Sigma1 => sigma1_inverse(theta, model, design),
        Which::Psi1 => psi1_inverse(theta, model, design),
        Which::Sigma2 => sigma2_inverse(theta, model),
    }
}

/// `c/(1−cπ₀) · {π₀ + c ∇π₀ᵀ S ∇π₀ / (1−cπ₀)}` with `S` the covariance of θ̂.
fn tau_variance<T: Real>(c: T, pi0: T, grad0: &[T], theta_cov: &Matrix<T>) -> Result<T> {
    let denom = T::one() - c * pi0;
    if denom.as_f64() <= 1e-12 {
        return Err(Error::DegenerateDenominator(denom.as_f64()));
    }
    let quad = theta_cov.quad_form(grad0, grad0);
    Ok((c / denom * (pi0 + c * quad / denom)).max(T::zero()))
}

/// Lower-right block of the covariance matrix from the precision block by
/// the Schur complement of the τ corner.
fn theta_block_covariance<T: Real>(block: &Matrix<T>, c: T, pi0: T, grad0: &[T]) -> Result<Matrix<T>> {
    let mut s = block.clone();
    s.add_outer(-(c / (pi0 * (T::one() - c * pi0))), grad0, grad0);
    s.symmetric_inverse()
}

fn theta_cov_1<T: Real>(method: Method, p: &Pieces<T>, design: &Design) -> Result<Matrix<T>> {
    match method {
        Method::Umle => {
            let c = design.outside_fraction::<T>();
            theta_block_covariance(&sigma1_block(p, design), c, p.pi0, &p.grad0)
        }
        Method::Cmle => psi1_block(p, design).symmetric_inverse(),
    }
}

/// Asymptotic covariance of `√τ₁ (θ̂₁ − θ₁)` for the given method.
pub fn theta_covariance_1<T: Real, M: LinkModel<T> + ?Sized>(
    method: Method,
    theta: &LinkParams<T>,
    model: &M,
    design: &Design,
) -> Result<Matrix<T>> {
    check_design(model, design)?;
    theta_cov_1(method, &pieces(theta, model, true)?, design)
}

/// Asymptotic covariance of `√τ₂ (θ̂₂ − θ₂)`; identical for both methods.
pub fn theta_covariance_2<T: Real, M: LinkModel<T> + ?Sized>(theta: &LinkParams<T>, model: &M) -> Result<Matrix<T>> {
    let p = pieces(theta, model, false)?;
    theta_block_covariance(&p.between, T::one(), p.pi0, &p.grad0)
}

/// `σ₁²` for the given method: `σ₁U²` (UMLE) or `σ₁C²` (CMLE). Zero when
/// every site is sampled.
pub fn sigma1_sq<T: Real, M: LinkModel<T> + ?Sized>(
    method: Method,
    theta: &LinkParams<T>,
    model: &M,
    design: &Design,
) -> Result<T> {
    check_design(model, design)?;
    let c = design.outside_fraction::<T>();
    if c == T::zero() {
        return Ok(T::zero());
    }
    let p = pieces(theta, model, true)?;
    tau_variance(c, p.pi0, &p.grad0, &theta_cov_1(method, &p, design)?)
}

/// `σ₂²`; identical for both methods.
pub fn sigma2_sq<T: Real, M: LinkModel<T> + ?Sized>(theta: &LinkParams<T>, model: &M) -> Result<T> {
    let p = pieces(theta, model, false)?;
    let cov = theta_block_covariance(&p.between, T::one(), p.pi0, &p.grad0)?;
    tau_variance(T::one(), p.pi0, &p.grad0, &cov)
}

/// `(σ₁², σ₂²)` at the estimated parameters, matched to `method`.
pub fn scalar_variances<T: Real, M1, M2>(
    method: Method,
    theta1: &LinkParams<T>,
    model1: &M1,
    theta2: &LinkParams<T>,
    model2: &M2,
    design: &Design,
) -> Result<(T, T)>
where
    M1: LinkModel<T> + ?Sized,
    M2: LinkModel<T> + ?Sized,
{
    Ok((sigma1_sq(method, theta1, model1, design)?, sigma2_sq(theta2, model2)?))
}

/// One distinct V-vector and how many population members carry it.
struct Weighted<T> {
    weight: T,
    v: Vec<T>,
}

fn v_vectors<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    theta: &LinkParams<T>,
    tau: T,
    model: &M,
    which: Which,
) -> Result<(Vec<Weighted<T>>, u64)> {
    if model.sites() != data.sites() {
        return Err(Error::DimensionMismatch {
            expected: data.sites(),
            found: model.sites(),
        });
    }
    model.validate_params(theta)?;
    let th = theta.values();
    let n = data.sites();
    let zero = OutcomePattern::zero(n);
    let observed = match which {
        Which::Sigma1 | Which::Psi1 => data.m() + data.r1(),
        Which::Sigma2 => data.r2(),
    };
    let total = tau.floor().to_u64().unwrap_or(0);
    if !(tau.is_finite()) || total < observed {
        return Err(Error::Domain(format!(
            "τ̂ = {tau} is below the {observed} observed persons"
        )));
    }
    let unseen = T::count(total - observed);
    let (pi0, g0) = model.eval_unchecked(th, zero, Scope::Between);
    let pi0 = checked_prob(pi0, zero)?;
    let linked = T::one() - pi0;
    let c = match which {
        Which::Sigma2 => T::one(),
        _ => Design::of(data).outside_fraction(),
    };
    let score = |x: OutcomePattern, scope: Scope| -> Result<Vec<T>> {
        let (p, dp) = model.eval_unchecked(th, x, scope);
        let p = checked_prob(p, x)?;
        Ok(dp.into_iter().map(|d| d / p).collect())
    };
    let with_tau = |lead: T, rest: Vec<T>| -> Vec<T> { std::iter::once(lead).chain(rest).collect() };
    let mut out = Vec::new();
    let between = match which {
        Which::Sigma2 => data.between2(),
        _ => data.between1(),
    };
    for (&x, &r) in between {
        let s = score(x, Scope::Between)?;
        let v = match which {
            Which::Psi1 => {
                // ∇π̃/π̃ = ∇π/π + ∇π₀/(1−π₀)
                s.iter().zip(&g0).map(|(&a, &b)| a + b / linked).collect()
            }
            _ => with_tau(T::one(), s),
        };
        out.push(Weighted { weight: T::count(r), v });
    }
    let zero_v = match which {
        Which::Psi1 => vec![T::zero(); model.dim()],
        _ => {
            let c_pi0 = c * pi0;
            if c_pi0.as_f64() <= 1e-12 {
                return Err(Error::DegenerateDenominator(c_pi0.as_f64()));
            }
            with_tau(-(T::one() - c_pi0) / c_pi0, g0.iter().map(|&d| d / pi0).collect())
        }
    };
    out.push(Weighted {
        weight: unseen,
        v: zero_v,
    });
    if which != Which::Sigma2 {
        for l in 0..n {
            if data.site_sizes()[l] == 0 {
                continue;
            }
            let scope = Scope::Within(l);
            let entries = data
                .within(l)
                .iter()
                .map(|(&x, &r)| (x, r))
                .chain(std::iter::once((zero, data.within_zero(l))));
            for (x, r) in entries {
                if r == 0 {
                    continue;
                }
                let s = score(x, scope)?;
                let v = if which == Which::Psi1 { s } else { with_tau(T::one(), s) };
                out.push(Weighted { weight: T::count(r), v });
            }
        }
    }
    Ok((out, total))
}

/// Sample covariance (divisor `count − 1`) of the V-vectors of all `⌊τ̂⌋`
/// estimated population members, as an estimate of the precision matrix
/// `which`. Unobserved members carry the zero-pattern vector.
pub fn empirical_v_covariance<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    theta: &LinkParams<T>,
    tau: T,
    model: &M,
    which: Which,
) -> Result<AsymptoticMatrices<T>> {
    let (vs, total) = v_vectors(data, theta, tau, model, which)?;
    let dim = vs.first().map_or(0, |w| w.v.len());
    let need = model.dim() as u64 + 2;
    if total < need {
        return Err(Error::InsufficientData { have: total, need });
    }
    let count = T::count(total);
    let mut mean = vec![T::zero(); dim];
    for w in &vs {
        for (m, &v) in mean.iter_mut().zip(&w.v) {
            *m = *m + w.weight * v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut cov = Matrix::zeros(dim, dim);
    for w in &vs {
        let d: Vec<T> = w.v.iter().zip(&mean).map(|(&v, &m)| v - m).collect();
        cov.add_outer(w.weight, &d, &d);
    }
    AsymptoticMatrices::from_inverse(which, cov.scaled(T::one() / (count - T::one())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    Analytic,
    EmpiricalV,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Real> Interval<T> {
    pub fn contains(&self, v: T) -> bool {
        self.lower <= v && v <= self.upper
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport<T> {
    pub source: VarianceSource,
    pub sigma1_sq: T,
    pub sigma2_sq: T,
    /// `α̂₁σ₁² + α̂₂σ₂²` with `α̂_k = τ̂_k/τ̂`.
    pub sigma_sq: T,
    pub var_tau1: T,
    pub var_tau2: T,
    pub var_tau: T,
    pub level: f64,
    pub tau1_interval: Interval<T>,
    pub tau2_interval: Interval<T>,
    pub tau_interval: Interval<T>,
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("interval level {level} is not in (0, 1)")))
    }
}

/// Two-sided normal quantile `z_{1−a/2}` for coverage `level = 1 − a`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    check_level(level)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// `estimate ± z √variance`.
pub fn wald_interval<T: Real>(estimate: T, variance: T, level: f64) -> Result<Interval<T>> {
    if !variance.is_finite() || variance < T::zero() {
        return Err(Error::InvalidParameter(format!("variance {variance}")));
    }
    let half = T::lit(normal_quantile(level)?) * variance.sqrt();
    Ok(Interval {
        lower: estimate - half,
        upper: estimate + half,
    })
}

/// Combines the component variances with the point estimates into
/// `Var(τ̂_k) = τ̂_k σ_k²` and Wald intervals for τ₁, τ₂ and τ.
pub fn wald_intervals<T: Real>(
    tau1: u64,
    tau2: u64,
    sigma1_sq: T,
    sigma2_sq: T,
    level: f64,
    source: VarianceSource,
) -> Result<VarianceReport<T>> {
    let t1 = T::count(tau1);
    let t2 = T::count(tau2);
    let t = t1 + t2;
    let var_tau1 = t1 * sigma1_sq;
    let var_tau2 = t2 * sigma2_sq;
    let var_tau = var_tau1 + var_tau2;
    let sigma_sq = if t > T::zero() { var_tau / t } else { T::zero() };
    Ok(VarianceReport {
        source,
        sigma1_sq,
        sigma2_sq,
        sigma_sq,
        var_tau1,
        var_tau2,
        var_tau,
        level,
        tau1_interval: wald_interval(t1, var_tau1, level)?,
        tau2_interval: wald_interval(t2, var_tau2, level)?,
        tau_interval: wald_interval(t, var_tau, level)?,
    })
}

/// Method-matched variances and intervals for a fitted report.
pub fn variance_report<T: Real, M1, M2>(
    report: &EstimateReport<T>,
    data: &SampleData,
    model1: &M1,
    model2: &M2,
    level: f64,
    source: VarianceSource,
) -> Result<VarianceReport<T>>
where
    M1: LinkModel<T> + ?Sized,
    M2: LinkModel<T> + ?Sized,
{
    let design = Design::of(data);
    let (s1, s2) = match source {
        VarianceSource::Analytic => scalar_variances(
            report.method,
            &report.u1.theta,
            model1,
            &report.u2.theta,
            model2,
            &design,
        )?,
        VarianceSource::EmpiricalV => {
            let c = design.outside_fraction::<T>();
            let s1 = if c == T::zero() {
                T::zero()
            } else {
                match report.method {
                    Method::Umle => {
                        let m = empirical_v_covariance(data, &report.u1.theta, report.u1.tau, model1, Which::Sigma1)?;
                        m.covariance_form[(0, 0)].max(T::zero())
                    }
                    Method::Cmle => {
                        let m = empirical_v_covariance(data, &report.u1.theta, report.u1.tau, model1, Which::Psi1)?;
                        let (pi0, g0) = model1.eval_unchecked(
                            report.u1.theta.values(),
                            OutcomePattern::zero(data.sites()),
                            Scope::Between,
                        );
                        tau_variance(c, pi0, &g0, &m.covariance_form)?
                    }
                }
            };
            let m2 = empirical_v_covariance(data, &report.u2.theta, report.u2.tau, model2, Which::Sigma2)?;
            (s1, m2.covariance_form[(0, 0)].max(T::zero()))
        }
    };
    wald_intervals(report.u1.tau_floor, report.u2.tau_floor, s1, s2, level, source)
}
