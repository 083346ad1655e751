//! Parametric link-probability families.
//!
//! A [`LinkModel`] maps a parameter vector to the probability `π_x(θ)` that a
//! person's link pattern equals `x`, together with the analytic gradient
//! `∂π_x/∂θ`. Two scopes exist: [`Scope::Between`] for persons outside the
//! initial sample (patterns over all `n` sites) and [`Scope::Within`] for
//! persons found in sampled site `l` (the own-site bit is structurally zero
//! and contributes no factor).
//!
//! Families:
//!
//! * [`Homogeneous`]: one logit `η_i` per sampled site, link indicators are
//!   independent Bernoulli(`logistic(η_i)`).
//! * [`Rasch`]: site effects `α_i` plus a normal person effect with standard
//!   deviation `σ`; the mixing integral is evaluated by a scaled
//!   Gauss–Hermite rule (see [`QuadratureRule::scaled_gauss_hermite`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::OutcomePattern;
use crate::quadrature::{QuadratureRule, DEFAULT_NODES, MIXING_SCALE};
use crate::scalar::{logistic, logit, softplus, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    /// Person outside the initial sample; pattern over all sampled sites.
    Between,
    /// Person belonging to sampled site `l`.
    Within(usize),
}

impl Scope {
    #[inline]
    fn skips(self, i: usize) -> bool {
        matches!(self, Scope::Within(l) if l == i)
    }
}

/// Parameter vector of a link model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkParams<T>(Vec<T>);

impl<T: Real> LinkParams<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> From<Vec<T>> for LinkParams<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

/// Behavioural contract of a link-probability family.
///
/// Implementors provide [`LinkModel::eval_unchecked`]; the checked accessors
/// validate dimensions and scopes before delegating to it.
pub trait LinkModel<T: Real>: Send + Sync {
    /// Number of sampled sites `n`.
    fn sites(&self) -> usize;

    /// Parameter dimension `q`.
    fn dim(&self) -> usize;

    /// Probability and gradient of pattern `x`. Inputs are already validated.
    fn eval_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> (T, Vec<T>);

    /// Probability only; override when cheaper than the full evaluation.
    fn prob_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> T {
        self.eval_unchecked(theta, x, scope).0
    }

    /// Coordinate-wise lower bounds enforced by projection in the solvers.
    fn lower_bounds(&self) -> Vec<Option<T>> {
        vec![None; self.dim()]
    }

    /// Starting point from per-site empirical link rates in `(0, 1)`.
    fn initial_params(&self, link_rates: &[T]) -> LinkParams<T>;

    fn validate_params(&self, theta: &LinkParams<T>) -> Result<()> {
        if theta.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: theta.dim(),
            });
        }
        if let Some(v) = theta.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite coordinate {v}")));
        }
        for (v, lb) in theta.values().iter().zip(self.lower_bounds()) {
            if let Some(lb) = lb {
                if *v < lb {
                    return Err(Error::InvalidParameter(format!(
                        "coordinate {v} below its lower bound {lb}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn validate_pattern(&self, x: OutcomePattern, scope: Scope) -> Result<()> {
        if x.sites() != self.sites() {
            return Err(Error::DimensionMismatch {
                expected: self.sites(),
                found: x.sites(),
            });
        }
        if let Scope::Within(l) = scope {
            if l >= self.sites() {
                return Err(Error::InvalidPattern(format!(
                    "site {l} out of range for {} sites",
                    self.sites()
                )));
            }
            if x.linked(l) {
                return Err(Error::ScopeViolation {
                    site: l,
                    pattern: x.to_string(),
                });
            }
        }
        Ok(())
    }

    fn pattern_prob(&self, theta: &LinkParams<T>, x: OutcomePattern, scope: Scope) -> Result<T> {
        self.validate_params(theta)?;
        self.validate_pattern(x, scope)?;
        Ok(self.prob_unchecked(theta.values(), x, scope))
    }

    fn pattern_grad(&self, theta: &LinkParams<T>, x: OutcomePattern, scope: Scope) -> Result<Vec<T>> {
        Ok(self.prob_and_grad(theta, x, scope)?.1)
    }

    fn prob_and_grad(&self, theta: &LinkParams<T>, x: OutcomePattern, scope: Scope) -> Result<(T, Vec<T>)> {
        self.validate_params(theta)?;
        self.validate_pattern(x, scope)?;
        Ok(self.eval_unchecked(theta.values(), x, scope))
    }

    /// `π_0` and `∇π_0` for the never-linked pattern, without enumerating.
    fn zero_pattern_prob_and_grad(&self, theta: &LinkParams<T>, scope: Scope) -> Result<(T, Vec<T>)> {
        self.prob_and_grad(theta, OutcomePattern::zero(self.sites()), scope)
    }
}

impl<T: Real, M: LinkModel<T> + ?Sized> LinkModel<T> for &M {
    fn sites(&self) -> usize {
        (**self).sites()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> (T, Vec<T>) {
        (**self).eval_unchecked(theta, x, scope)
    }
    fn prob_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> T {
        (**self).prob_unchecked(theta, x, scope)
    }
    fn lower_bounds(&self) -> Vec<Option<T>> {
        (**self).lower_bounds()
    }
    fn initial_params(&self, link_rates: &[T]) -> LinkParams<T> {
        (**self).initial_params(link_rates)
    }
}

fn clipped_logits<T: Real>(rates: &[T]) -> Vec<T> {
    let lo = T::lit(1e-4);
    let hi = T::one() - lo;
    rates
        .iter()
        .map(|&p| {
            let p = if p.is_nan() { T::lit(0.5) } else { p };
            logit(p.max(lo).min(hi))
        })
        .collect()
}

/// Site-specific link probabilities shared by every person.
#[derive(Clone, Debug, PartialEq)]
pub struct Homogeneous<T> {
    n: usize,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Real> Homogeneous<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > crate::patterns::MAX_SITES {
            return Err(Error::InvalidParameter(format!("unsupported site count {n}")));
        }
        Ok(Self {
            n,
            _scalar: std::marker::PhantomData,
        })
    }

    /// Parameters placing every site at link probability `p`.
    pub fn params_from_probability(&self, p: T) -> LinkParams<T> {
        LinkParams(vec![logit(p); self.n])
    }
}

impl<T: Real> LinkModel<T> for Homogeneous<T> {
    fn sites(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.n
    }

    fn eval_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> (T, Vec<T>) {
        let mut prob = T::one();
        let mut resid = vec![T::zero(); self.n];
        for (i, r) in resid.iter_mut().enumerate() {
            if scope.skips(i) {
                continue;
            }
            let p = logistic(theta[i]);
            if x.linked(i) {
                prob = prob * p;
                *r = T::one() - p;
            } else {
                prob = prob * (T::one() - p);
                *r = -p;
            }
        }
        let grad = resid.into_iter().map(|r| prob * r).collect();
        (prob, grad)
    }

    fn prob_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> T {
        (0..self.n)
            .filter(|&i| !scope.skips(i))
            .map(|i| {
                let p = logistic(theta[i]);
                if x.linked(i) {
                    p
                } else {
                    T::one() - p
                }
            })
            .fold(T::one(), |a, b| a * b)
    }

    fn initial_params(&self, link_rates: &[T]) -> LinkParams<T> {
        LinkParams(clipped_logits(link_rates))
    }
}

/// Mixed logit with site effects and a normal person effect.
///
/// Parameters are `(α_1, …, α_n, σ)` with `σ ≥ 0`; `σ = 0` reduces exactly
/// to [`Homogeneous`] with `η = α`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rasch<T> {
    n: usize,
    rule: QuadratureRule<T>,
}

impl<T: Real> Rasch<T> {
    pub fn new(n: usize) -> Result<Self> {
        Self::with_nodes(n, DEFAULT_NODES)
    }

    pub fn with_nodes(n: usize, nodes: usize) -> Result<Self> {
        if n == 0 || n > crate::patterns::MAX_SITES {
            return Err(Error::InvalidParameter(format!("unsupported site count {n}")));
        }
        Ok(Self {
            n,
            rule: QuadratureRule::scaled_gauss_hermite(nodes, MIXING_SCALE)?,
        })
    }

    pub fn rule(&self) -> &QuadratureRule<T> {
        &self.rule
    }

    /// Log of the conditional pattern probability given person effect `z`.
    #[inline]
    fn conditional_log_prob(&self, theta: &[T], sigma: T, z: T, x: OutcomePattern, scope: Scope) -> T {
        let mut acc = T::zero();
        for (i, &alpha) in theta.iter().enumerate().take(self.n) {
            if scope.skips(i) {
                continue;
            }
            let eta = alpha + sigma * z;
            acc = acc - if x.linked(i) { softplus(-eta) } else { softplus(eta) };
        }
        acc
    }
}

impl<T: Real> LinkModel<T> for Rasch<T> {
    fn sites(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.n + 1
    }

    fn eval_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> (T, Vec<T>) {
        let sigma = theta[self.n];
        let mut prob = T::zero();
        let mut grad = vec![T::zero(); self.n + 1];
        let mut resid = vec![T::zero(); self.n];
        for (&z, &w) in self.rule.nodes().iter().zip(self.rule.weights()) {
            let mut log_p = T::zero();
            let mut resid_sum = T::zero();
            for (i, r) in resid.iter_mut().enumerate() {
                if scope.skips(i) {
                    *r = T::zero();
                    continue;
                }
                let eta = theta[i] + sigma * z;
                let p = logistic(eta);
                if x.linked(i) {
                    log_p = log_p - softplus(-eta);
                    *r = T::one() - p;
                } else {
                    log_p = log_p - softplus(eta);
                    *r = -p;
                }
                resid_sum = resid_sum + *r;
            }
            let wp = w * log_p.exp();
            prob = prob + wp;
            for (g, &r) in grad.iter_mut().zip(&resid) {
                *g = *g + wp * r;
            }
            grad[self.n] = grad[self.n] + wp * z * resid_sum;
        }
        (prob, grad)
    }

    fn prob_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> T {
        let sigma = theta[self.n];
        self.rule
            .expect(|z| self.conditional_log_prob(theta, sigma, z, x, scope).exp())
    }

    fn lower_bounds(&self) -> Vec<Option<T>> {
        let mut b = vec![None; self.n + 1];
        b[self.n] = Some(T::zero());
        b
    }

    fn initial_params(&self, link_rates: &[T]) -> LinkParams<T> {
        let mut v = clipped_logits(link_rates);
        v.push(T::lit(0.5));
        LinkParams(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Homogeneous,
    Rasch,
}

/// Model description as it appears in configuration files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature_nodes: Option<usize>,
}

impl ModelSpec {
    pub fn homogeneous(n: usize) -> Self {
        Self {
            family: Family::Homogeneous,
            n,
            quadrature_nodes: None,
        }
    }

    pub fn rasch(n: usize, nodes: usize) -> Self {
        Self {
            family: Family::Rasch,
            n,
            quadrature_nodes: Some(nodes),
        }
    }

    pub fn build<T: Real>(&self) -> Result<AnyLinkModel<T>> {
        match self.family {
            Family::Homogeneous => {
                if self.quadrature_nodes.is_some() {
                    return Err(Error::Config(
                        "quadrature_nodes only applies to the rasch family".into(),
                    ));
                }
                Ok(AnyLinkModel::Homogeneous(Homogeneous::new(self.n)?))
            }
            Family::Rasch => Ok(AnyLinkModel::Rasch(Rasch::with_nodes(
                self.n,
                self.quadrature_nodes.unwrap_or(DEFAULT_NODES),
            )?)),
        }
    }
}

/// Runtime-selected family.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyLinkModel<T> {
    Homogeneous(Homogeneous<T>),
    Rasch(Rasch<T>),
}

impl<T: Real> LinkModel<T> for AnyLinkModel<T> {
    fn sites(&self) -> usize {
        match self {
            Self::Homogeneous(m) => m.sites(),
            Self::Rasch(m) => m.sites(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Self::Homogeneous(m) => m.dim(),
            Self::Rasch(m) => m.dim(),
        }
    }

    fn eval_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> (T, Vec<T>) {
        match self {
            Self::Homogeneous(m) => m.eval_unchecked(theta, x, scope),
            Self::Rasch(m) => m.eval_unchecked(theta, x, scope),
        }
    }

    fn prob_unchecked(&self, theta: &[T], x: OutcomePattern, scope: Scope) -> T {
        match self {
            Self::Homogeneous(m) => m.prob_unchecked(theta, x, scope),
            Self::Rasch(m) => m.prob_unchecked(theta, x, scope),
        }
    }

    fn lower_bounds(&self) -> Vec<Option<T>> {
        match self {
            Self::Homogeneous(m) => m.lower_bounds(),
            Self::Rasch(m) => m.lower_bounds(),
        }
    }

    fn initial_params(&self, link_rates: &[T]) -> LinkParams<T> {
        match self {
            Self::Homogeneous(m) => m.initial_params(link_rates),
            Self::Rasch(m) => m.initial_params(link_rates),
        }
    }
}
