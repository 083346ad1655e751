//! Log-likelihood components and their θ-gradients.
//!
//! Conventions for dropped data-only constants:
//!
//! * factorials of observed counts (`r_x!`, `r₁!`, `m_l!`) are never included;
//! * the cluster-size term uses `(τ₁ − m) ln(1 − n/N)`, the log-probability
//!   that the `τ₁ − m` persons outside the sampled sites fall outside them;
//!   the `m ln(1/N)` factor is dropped.
//!
//! With these conventions `full_1 = mult + binom_12 + cond_1` holds exactly.
//! Population sizes are continuous (log-gamma) throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link_model::{LinkModel, LinkParams, Scope};
use crate::patterns::{OutcomePattern, PatternCounts, SampleData};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Full1,
    Cond1,
    Binom12,
    Mult,
    Full2,
    Cond2,
    Binom22,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogLikTerms<T> {
    pub value: T,
    pub grad: Vec<T>,
    pub which: Term,
}

/// Smallest pattern probability accepted on the log scale.
pub fn prob_floor<T: Real>() -> T {
    T::lit(1e-300).max(T::min_positive_value())
}

fn checked_ln<T: Real>(p: T, what: impl FnOnce() -> String) -> Result<T> {
    if p.is_finite() && p >= prob_floor() {
        Ok(p.ln())
    } else {
        Err(Error::NonFiniteLikelihood(format!("probability {p} of {}", what())))
    }
}

/// Adds `w ln π_x` and `w ∇π_x / π_x` for one pattern.
fn add_pattern<T: Real, M: LinkModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    x: OutcomePattern,
    scope: Scope,
    weight: T,
    value: &mut T,
    grad: &mut [T],
) -> Result<()> {
    if weight == T::zero() {
        return Ok(());
    }
    let (p, dp) = model.eval_unchecked(theta, x, scope);
    let lp = checked_ln(p, || format!("pattern {x} ({scope:?})"))?;
    *value = *value + weight * lp;
    let s = weight / p;
    for (g, d) in grad.iter_mut().zip(dp) {
        *g = *g + s * d;
    }
    Ok(())
}

fn add_counts<T: Real, M: LinkModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    counts: &PatternCounts,
    scope: Scope,
    value: &mut T,
    grad: &mut [T],
) -> Result<()> {
    for (&x, &r) in counts {
        add_pattern(model, theta, x, scope, T::count(r), value, grad)?;
    }
    Ok(())
}

/// Within-site contribution `Σ_l [Σ_x r_x ln π_x^(A_l) + (m_l − r^(A_l)) ln π_0^(A_l)]`.
fn add_within<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    model: &M,
    theta: &[T],
    value: &mut T,
    grad: &mut [T],
) -> Result<()> {
    let n = data.sites();
    for l in 0..n {
        if data.site_sizes()[l] == 0 {
            continue;
        }
        let scope = Scope::Within(l);
        add_counts(model, theta, data.within(l), scope, value, grad)?;
        let zero = T::count(data.within_zero(l));
        add_pattern(model, theta, OutcomePattern::zero(n), scope, zero, value, grad)?;
    }
    Ok(())
}

fn check_inputs<T: Real, M: LinkModel<T> + ?Sized>(data: &SampleData, model: &M, theta: &LinkParams<T>) -> Result<()> {
    if model.sites() != data.sites() {
        return Err(Error::DimensionMismatch {
            expected: data.sites(),
            found: model.sites(),
        });
    }
    model.validate_params(theta)
}

fn check_tau<T: Real>(tau: T, floor: u64, label: &str) -> Result<()> {
    if !tau.is_finite() || tau < T::count(floor) {
        return Err(Error::Domain(format!(
            "{label} = {tau} is below the observed count {floor}"
        )));
    }
    Ok(())
}

/// `ln(1 − n/N)` scaled by `τ₁ − m`, taking `0 · ln 0 = 0`.
fn frame_term<T: Real>(data: &SampleData, tau1: T) -> Result<T> {
    let outside = tau1 - T::count(data.m());
    if outside == T::zero() {
        return Ok(T::zero());
    }
    let c = T::lit(data.sampling_fraction());
    let c = T::one() - c;
    if c <= T::zero() {
        return Err(Error::Domain(format!(
            "every site is sampled, so τ₁ must equal m = {}, got {tau1}",
            data.m()
        )));
    }
    Ok(outside * c.ln())
}

pub(crate) fn full_1_raw<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    tau1: T,
    theta: &[T],
    model: &M,
) -> Result<(T, Vec<T>)> {
    let m = T::count(data.m());
    let r1 = T::count(data.r1());
    let unseen = tau1 - m - r1;
    let mut value = (tau1 + T::one()).ln_gamma() - (unseen + T::one()).ln_gamma() + frame_term(data, tau1)?;
    let mut grad = vec![T::zero(); model.dim()];
    add_counts(model, theta, data.between1(), Scope::Between, &mut value, &mut grad)?;
    let zero = OutcomePattern::zero(data.sites());
    add_pattern(model, theta, zero, Scope::Between, unseen, &mut value, &mut grad)?;
    add_within(data, model, theta, &mut value, &mut grad)?;
    Ok((value, grad))
}

pub(crate) fn cond_1_raw<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    theta: &[T],
    model: &M,
) -> Result<(T, Vec<T>)> {
    let mut value = T::zero();
    let mut grad = vec![T::zero(); model.dim()];
    add_truncated(data.between1(), data.r1(), theta, model, &mut value, &mut grad)?;
    add_within(data, model, theta, &mut value, &mut grad)?;
    Ok((value, grad))
}

/// `Σ_{x≠0} r_x ln[π_x / (1 − π_0)]` and its gradient.
fn add_truncated<T: Real, M: LinkModel<T> + ?Sized>(
    counts: &PatternCounts,
    total: u64,
    theta: &[T],
    model: &M,
    value: &mut T,
    grad: &mut [T],
) -> Result<()> {
    if total == 0 {
        return Ok(());
    }
    add_counts(model, theta, counts, Scope::Between, value, grad)?;
    let (p0, dp0) = model.eval_unchecked(theta, OutcomePattern::zero(model.sites()), Scope::Between);
    let linked = T::one() - p0;
    let r = T::count(total);
    *value = *value - r * checked_ln(linked, || "a linked pattern".to_string())?;
    let s = r / linked;
    for (g, d) in grad.iter_mut().zip(dp0) {
        *g = *g + s * d;
    }
    Ok(())
}

/// `lnΓ(k+1) − lnΓ(k−r+1) + r ln(1−π_0) + (k−r) ln π_0` with `k` trials.
fn binomial_raw<T: Real, M: LinkModel<T> + ?Sized>(trials: T, r: u64, theta: &[T], model: &M) -> Result<(T, Vec<T>)> {
    let rr = T::count(r);
    let miss = trials - rr;
    let (p0, dp0) = model.eval_unchecked(theta, OutcomePattern::zero(model.sites()), Scope::Between);
    let mut value = (trials + T::one()).ln_gamma() - (miss + T::one()).ln_gamma();
    let mut coef = T::zero();
    if rr > T::zero() {
        value = value + rr * checked_ln(T::one() - p0, || "a linked pattern".to_string())?;
        coef = coef - rr / (T::one() - p0);
    }
    if miss > T::zero() {
        value = value + miss * checked_ln(p0, || "the zero pattern".to_string())?;
        coef = coef + miss / p0;
    }
    Ok((value, dp0.into_iter().map(|d| coef * d).collect()))
}

pub(crate) fn full_2_raw<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    tau2: T,
    theta: &[T],
    model: &M,
) -> Result<(T, Vec<T>)> {
    let unseen = tau2 - T::count(data.r2());
    let mut value = (tau2 + T::one()).ln_gamma() - (unseen + T::one()).ln_gamma();
    let mut grad = vec![T::zero(); model.dim()];
    add_counts(model, theta, data.between2(), Scope::Between, &mut value, &mut grad)?;
    let zero = OutcomePattern::zero(data.sites());
    add_pattern(model, theta, zero, Scope::Between, unseen, &mut value, &mut grad)?;
    Ok((value, grad))
}

pub(crate) fn cond_2_raw<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    theta: &[T],
    model: &M,
) -> Result<(T, Vec<T>)> {
    let mut value = T::zero();
    let mut grad = vec![T::zero(); model.dim()];
    add_truncated(data.between2(), data.r2(), theta, model, &mut value, &mut grad)?;
    Ok((value, grad))
}

/// Unconditional log-likelihood `l₍₁₎(τ₁, θ₁)` of the covered population.
pub fn loglik_full_1<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    tau1: T,
    theta: &LinkParams<T>,
    model: &M,
) -> Result<LogLikTerms<T>> {
    check_inputs(data, model, theta)?;
    check_tau(tau1, data.m() + data.r1(), "τ₁")?;
    let (value, grad) = full_1_raw(data, tau1, theta.values(), model)?;
    Ok(LogLikTerms {
        value,
        grad,
        which: Term::Full1,
    })
}

/// Conditional log-likelihood: zero-truncated between-site multinomial plus
/// the within-site multinomials.
pub fn loglik_cond_1<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    theta: &LinkParams<T>,
    model: &M,
) -> Result<LogLikTerms<T>> {
    check_inputs(data, model, theta)?;
    if data.r1() == 0 && !data.has_within_links() {
        return Err(Error::Unidentifiable(
            "no linked persons in the covered population".into(),
        ));
    }
    let (value, grad) = cond_1_raw(data, theta.values(), model)?;
    Ok(LogLikTerms {
        value,
        grad,
        which: Term::Cond1,
    })
}

/// Binomial law of `r₁` given `τ₁ − m` persons outside the sampled sites.
pub fn loglik_binom_12<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    tau1: T,
    theta: &LinkParams<T>,
    model: &M,
) -> Result<LogLikTerms<T>> {
    check_inputs(data, model, theta)?;
    check_tau(tau1, data.m() + data.r1(), "τ₁")?;
    let (value, grad) = binomial_raw(tau1 - T::count(data.m()), data.r1(), theta.values(), model)?;
    Ok(LogLikTerms {
        value,
        grad,
        which: Term::Binom12,
    })
}

/// Cluster-size term `lnΓ(τ₁+1) − lnΓ(τ₁−m+1) + (τ₁−m) ln(1−n/N)`; the
/// gradient is identically zero.
pub fn loglik_mult<T: Real, M: LinkModel<T> + ?Sized>(data: &SampleData, tau1: T, model: &M) -> Result<LogLikTerms<T>> {
    check_tau(tau1, data.m(), "τ₁")?;
    let m = T::count(data.m());
    let value = (tau1 + T::one()).ln_gamma() - (tau1 - m + T::one()).ln_gamma() + frame_term(data, tau1)?;
    Ok(LogLikTerms {
        value,
        grad: vec![T::zero(); model.dim()],
        which: Term::Mult,
    })
}

/// Uncovered-population log-likelihood. With `conditional` set, the
/// zero-truncated multinomial is returned and `tau2` is ignored.
pub fn loglik_2<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    tau2: T,
    theta: &LinkParams<T>,
    model: &M,
    conditional: bool,
) -> Result<LogLikTerms<T>> {
    check_inputs(data, model, theta)?;
    if conditional {
        if data.r2() == 0 {
            return Err(Error::Unidentifiable(
                "no observed persons in the uncovered population".into(),
            ));
        }
        let (value, grad) = cond_2_raw(data, theta.values(), model)?;
        return Ok(LogLikTerms {
            value,
            grad,
            which: Term::Cond2,
        });
    }
    check_tau(tau2, data.r2(), "τ₂")?;
    let (value, grad) = full_2_raw(data, tau2, theta.values(), model)?;
    Ok(LogLikTerms {
        value,
        grad,
        which: Term::Full2,
    })
}

/// Binomial law of `r₂` given `τ₂`.
pub fn loglik_binom_22<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    tau2: T,
    theta: &LinkParams<T>,
    model: &M,
) -> Result<LogLikTerms<T>> {
    check_inputs(data, model, theta)?;
    check_tau(tau2, data.r2(), "τ₂")?;
    let (value, grad) = binomial_raw(tau2, data.r2(), theta.values(), model)?;
    Ok(LogLikTerms {
        value,
        grad,
        which: Term::Binom22,
    })
}
