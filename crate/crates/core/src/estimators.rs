//! Unconditional (UMLE) and conditional (CMLE) maximum-likelihood estimators
//! of the population sizes and link parameters.
//!
//! The CMLE fits θ on the zero-truncated likelihood and then applies the
//! closed-form ratio estimate for τ. The UMLE alternates between the closed
//! form (continuous) and a θ-ascent on the unconditional likelihood at fixed
//! τ, then settles on the integer τ that maximizes the profile likelihood.

use std::fmt;
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::error::{Component, Error, Result};
use crate::likelihood::{cond_1_raw, cond_2_raw, full_1_raw, full_2_raw};
use crate::link_model::{LinkModel, LinkParams, Scope};
use crate::optimize::{maximize, Maximum, SolverOptions};
use crate::patterns::{OutcomePattern, SampleData};
use crate::scalar::Real;
use crate::variance::VarianceReport;

/// Version tag of the estimate report JSON.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Smallest accepted closed-form denominator.
const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Umle,
    Cmle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Umle => "UMLE",
            Method::Cmle => "CMLE",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "umle" => Ok(Method::Umle),
            "cmle" => Ok(Method::Cmle),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub solver: SolverOptions,
    /// Number of θ starting points; extra starts shift the initial logits.
    pub starts: usize,
    /// Relative change in τ below which the alternation stops.
    pub tau_tol: f64,
    pub max_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            starts: 1,
            tau_tol: 1e-10,
            max_sweeps: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    /// Newton iterations summed over all inner solves.
    pub iterations: usize,
    /// Alternation sweeps (zero for the CMLE).
    pub sweeps: usize,
    /// Projected score norm at the returned θ.
    pub grad_norm: f64,
    pub converged: bool,
    /// Maximized objective (conditional or unconditional log-likelihood).
    pub log_likelihood: f64,
}

/// Estimates for one sub-population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit<T> {
    pub component: Component,
    pub method: Method,
    /// Continuous closed-form value at θ̂.
    pub tau: T,
    /// Reported estimate, `⌊tau⌋`.
    pub tau_floor: u64,
    pub theta: LinkParams<T>,
    /// Zero-pattern probability at θ̂.
    pub pi0: T,
    pub diagnostics: SolverDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport<T> {
    pub schema_version: u32,
    pub method: Method,
    pub u1: ComponentFit<T>,
    pub u2: ComponentFit<T>,
    /// `τ̂ = τ̂₁ + τ̂₂` from the floored components.
    pub tau: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<VarianceReport<T>>,
}

fn floor_count<T: Real>(real: T) -> u64 {
    // Guard against values like 99.999999999999986 for an exact 100.
    let nudged = real + real.abs() * T::epsilon() * T::lit(8.0);
    nudged.floor().to_u64().unwrap_or(u64::MAX)
}

/// Ratio-method estimate `(m + r₁) / (1 − (1 − n/N) π₀)` and its floor.
pub fn tau1_closed_form<T: Real>(m: u64, r1: u64, n: usize, big_n: usize, pi0: T) -> Result<(T, u64)> {
    if n == 0 || n > big_n {
        return Err(Error::InvalidParameter(format!("design n = {n}, N = {big_n}")));
    }
    let c = T::one() - T::count(n as u64) / T::count(big_n as u64);
    closed_form(T::count(m + r1), c * pi0)
}

/// Ratio-method estimate `r₂ / (1 − π₀)` and its floor.
pub fn tau2_closed_form<T: Real>(r2: u64, pi0: T) -> Result<(T, u64)> {
    closed_form(T::count(r2), pi0)
}

fn closed_form<T: Real>(observed: T, miss: T) -> Result<(T, u64)> {
    if !(T::zero()..=T::one()).contains(&miss) {
        return Err(Error::InvalidParameter(format!(
            "zero-pattern mass {miss} outside [0, 1]"
        )));
    }
    let denom = T::one() - miss;
    if denom.as_f64() <= MIN_DENOMINATOR {
        return Err(Error::DegenerateDenominator(denom.as_f64()));
    }
    let real = (observed / denom).max(observed);
    Ok((real, floor_count(real)))
}

fn zero_prob<T: Real, M: LinkModel<T> + ?Sized>(model: &M, theta: &[T]) -> T {
    model.prob_unchecked(theta, OutcomePattern::zero(model.sites()), Scope::Between)
}

fn check_model<T: Real, M: LinkModel<T> + ?Sized>(data: &SampleData, model: &M) -> Result<()> {
    if model.sites() != data.sites() {
        return Err(Error::DimensionMismatch {
            expected: data.sites(),
            found: model.sites(),
        });
    }
    Ok(())
}

/// Per-site empirical link rates among observed persons at risk of a link.
pub fn covered_link_rates<T: Real>(data: &SampleData) -> Vec<T> {
    let n = data.sites();
    (0..n)
        .map(|i| {
            let mut links = data
                .between1()
                .iter()
                .filter(|(x, _)| x.linked(i))
                .map(|(_, &r)| r)
                .sum::<u64>();
            let mut at_risk = data.r1();
            for l in (0..n).filter(|&l| l != i) {
                links += data
                    .within(l)
                    .iter()
                    .filter(|(x, _)| x.linked(i))
                    .map(|(_, &r)| r)
                    .sum::<u64>();
                at_risk += data.site_sizes()[l];
            }
            rate(links, at_risk)
        })
        .collect()
}

/// Per-site empirical link rates among observed persons outside the frame.
pub fn uncovered_link_rates<T: Real>(data: &SampleData) -> Vec<T> {
    (0..data.sites())
        .map(|i| {
            let links = data
                .between2()
                .iter()
                .filter(|(x, _)| x.linked(i))
                .map(|(_, &r)| r)
                .sum::<u64>();
            rate(links, data.r2())
        })
        .collect()
}

fn rate<T: Real>(links: u64, at_risk: u64) -> T {
    if at_risk == 0 {
        T::lit(0.5)
    } else {
        T::count(links) / T::count(at_risk)
    }
}

/// Deterministic start `k` of a multi-start run: the empirical start shifted
/// by alternating offsets on the logit coordinates.
fn start_point<T: Real>(base: &LinkParams<T>, sites: usize, k: usize) -> Vec<T> {
    let mut x = base.values().to_vec();
    if k > 0 {
        let magnitude = T::lit(0.5 * k.div_ceil(2) as f64);
        let shift = if k % 2 == 1 { magnitude } else { -magnitude };
        for v in x.iter_mut().take(sites) {
            *v = *v + shift;
        }
    }
    x
}

fn multi_start<T: Real, F>(
    mut f: F,
    starts: Vec<Vec<T>>,
    lower: &[Option<T>],
    solver: &SolverOptions,
) -> Result<Maximum<T>>
where
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let mut best: Option<Maximum<T>> = None;
    let mut first_err = None;
    for x0 in starts {
        match maximize(&mut f, x0, lower, solver) {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.value > b.value) {
                    best = Some(m);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one start"))
}

struct Problem<'a, T, M: ?Sized> {
    data: &'a SampleData,
    model: &'a M,
    component: Component,
    /// Smallest admissible τ (observed persons).
    observed: u64,
    _scalar: PhantomData<T>,
}

impl<T: Real, M: LinkModel<T> + ?Sized> Problem<'_, T, M> {
    fn conditional(&self, theta: &[T]) -> Result<(T, Vec<T>)> {
        match self.component {
            Component::U1 => cond_1_raw(self.data, theta, self.model),
            Component::U2 => cond_2_raw(self.data, theta, self.model),
        }
    }

    fn unconditional(&self, tau: T, theta: &[T]) -> Result<(T, Vec<T>)> {
        match self.component {
            Component::U1 => full_1_raw(self.data, tau, theta, self.model),
            Component::U2 => full_2_raw(self.data, tau, theta, self.model),
        }
    }

    fn closed(&self, theta: &[T]) -> Result<(T, u64)> {
        let pi0 = zero_prob(self.model, theta);
        match self.component {
            Component::U1 => tau1_closed_form(
                self.data.m(),
                self.data.r1(),
                self.data.sites(),
                self.data.frame_size(),
                pi0,
            ),
            Component::U2 => tau2_closed_form(self.data.r2(), pi0),
        }
    }

    fn identifiable(&self) -> Result<()> {
        let ok = match self.component {
            Component::U1 => self.data.r1() > 0 || self.data.has_within_links(),
            Component::U2 => self.data.r2() > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Unidentifiable(format!(
                "no linked persons observed in {}",
                self.component
            )))
        }
    }

    fn initial(&self) -> LinkParams<T> {
        let rates = match self.component {
            Component::U1 => covered_link_rates(self.data),
            Component::U2 => uncovered_link_rates(self.data),
        };
        self.model.initial_params(&rates)
    }

    fn starts(&self, base: &LinkParams<T>, options: &FitOptions) -> Vec<Vec<T>> {
        (0..options.starts.max(1))
            .map(|k| start_point(base, self.model.sites(), k))
            .collect()
    }

    fn finish(&self, method: Method, fit: Maximum<T>, sweeps: usize, iterations: usize) -> Result<ComponentFit<T>> {
        let (tau, tau_floor) = self.closed(&fit.x)?;
        debug_assert!(tau_floor >= self.observed);
        Ok(ComponentFit {
            component: self.component,
            method,
            tau,
            tau_floor,
            pi0: zero_prob(self.model, &fit.x),
            theta: LinkParams::new(fit.x),
            diagnostics: SolverDiagnostics {
                iterations,
                sweeps,
                grad_norm: fit.grad_norm,
                converged: true,
                log_likelihood: fit.value.as_f64(),
            },
        })
    }

    fn cmle(&self, options: &FitOptions) -> Result<ComponentFit<T>> {
        self.identifiable()?;
        let base = self.initial();
        let lower = self.model.lower_bounds();
        let fit = multi_start(
            |t| self.conditional(t),
            self.starts(&base, options),
            &lower,
            &options.solver,
        )?;
        let iterations = fit.iterations;
        self.finish(Method::Cmle, fit, 0, iterations)
    }

    fn umle(&self, options: &FitOptions) -> Result<ComponentFit<T>> {
        self.identifiable()?;
        let lower = self.model.lower_bounds();
        let base = match self.cmle(options) {
            Ok(fit) => fit.theta,
            Err(_) => self.initial(),
        };
        let mut theta = base.values().to_vec();
        let mut tau = self.closed(&theta)?.0;
        let mut iterations = 0;
        let mut history: Vec<T> = vec![tau];
        let mut steps: Vec<f64> = Vec::new();
        let mut sweeps = 0;
        loop {
            if sweeps >= options.max_sweeps {
                let last = steps.last().copied().unwrap_or(f64::INFINITY);
                let window = steps.len().saturating_sub(10);
                return Err(if steps.get(window).is_some_and(|&s| last >= s) {
                    Error::OscillationDetected {
                        sweeps,
                        last_step: last,
                    }
                } else {
                    Error::NoConvergence {
                        iterations: sweeps,
                        residual: last,
                    }
                });
            }
            sweeps += 1;
            let starts = if sweeps == 1 {
                self.starts(&LinkParams::new(theta.clone()), options)
            } else {
                vec![theta.clone()]
            };
            let fit = multi_start(|t| self.unconditional(tau, t), starts, &lower, &options.solver)?;
            iterations += fit.iterations;
            theta = fit.x;
            let next = self.closed(&theta)?.0;
            let step = ((next - tau).abs() / tau.max(T::one())).as_f64();
            steps.push(step);
            history.push(next);
            if step < options.tau_tol {
                tau = next;
                break;
            }
            tau = aitken(&history, T::count(self.observed)).unwrap_or(next);
            if tau != next {
                history.clear();
                history.push(tau);
            }
        }
        self.polish(theta, tau, iterations, sweeps, options)
    }

    /// Moves from the continuous fixed point to the integer τ maximizing the
    /// profile likelihood `max_θ l(τ, θ)`.
    fn polish(
        &self,
        theta: Vec<T>,
        tau: T,
        mut iterations: usize,
        sweeps: usize,
        options: &FitOptions,
    ) -> Result<ComponentFit<T>> {
        let lower = self.model.lower_bounds();
        let mut profile = |k: u64, start: &[T]| -> Option<Maximum<T>> {
            let fit = maximize(
                |t| self.unconditional(T::count(k), t),
                start.to_vec(),
                &lower,
                &options.solver,
            )
            .ok()?;
            iterations += fit.iterations;
            Some(fit)
        };
        let k0 = floor_count(tau).max(self.observed);
        let Some(mut best) = profile(k0, &theta) else {
            let fit = maximize(|t| self.unconditional(T::count(k0), t), theta, &lower, &options.solver)?;
            return self.finish(Method::Umle, fit, sweeps, iterations);
        };
        let mut k = k0;
        let mut climbed = false;
        while let Some(up) = profile(k + 1, &best.x) {
            if up.value >= best.value {
                best = up;
                k += 1;
                climbed = true;
            } else {
                break;
            }
        }
        if !climbed {
            while k > self.observed {
                match profile(k - 1, &best.x) {
                    Some(down) if down.value > best.value => {
                        best = down;
                        k -= 1;
                    }
                    _ => break,
                }
            }
        }
        self.finish(Method::Umle, best, sweeps, iterations)
    }
}

/// Aitken Δ² extrapolation of the last three iterates, if well defined.
fn aitken<T: Real>(history: &[T], lower: T) -> Option<T> {
    let [a, b, c] = history.get(history.len().checked_sub(3)?..)?.try_into().ok()?;
    let denom = c - b - b + a;
    if denom == T::zero() {
        return None;
    }
    let acc = a - (b - a) * (b - a) / denom;
    // Only accept extrapolations that stay near the iterates.
    let spread = (c - a).abs() * T::lit(100.0);
    (acc.is_finite() && acc >= lower && (acc - c).abs() <= spread).then_some(acc)
}

fn problem<'a, T: Real, M: LinkModel<T> + ?Sized>(
    data: &'a SampleData,
    model: &'a M,
    component: Component,
) -> Result<Problem<'a, T, M>> {
    check_model(data, model)?;
    let observed = match component {
        Component::U1 => data.m() + data.r1(),
        Component::U2 => data.r2(),
    };
    Ok(Problem {
        data,
        model,
        component,
        observed,
        _scalar: PhantomData,
    })
}

/// CMLE for the covered population.
pub fn fit_cmle_1<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    model: &M,
    options: &FitOptions,
) -> Result<ComponentFit<T>> {
    problem(data, model, Component::U1)?.cmle(options)
}

/// UMLE for the covered population.
pub fn fit_umle_1<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    model: &M,
    options: &FitOptions,
) -> Result<ComponentFit<T>> {
    problem(data, model, Component::U1)?.umle(options)
}

/// Either estimator for the uncovered population.
pub fn fit_2<T: Real, M: LinkModel<T> + ?Sized>(
    data: &SampleData,
    model: &M,
    method: Method,
    options: &FitOptions,
) -> Result<ComponentFit<T>> {
    let p = problem(data, model, Component::U2)?;
    match method {
        Method::Umle => p.umle(options),
        Method::Cmle => p.cmle(options),
    }
}

/// Fits both sub-populations with the same method and sums the estimates.
pub fn fit_total<T: Real, M1, M2>(
    data: &SampleData,
    model1: &M1,
    model2: &M2,
    method: Method,
    options: &FitOptions,
) -> Result<EstimateReport<T>>
where
    M1: LinkModel<T> + ?Sized,
    M2: LinkModel<T> + ?Sized,
{
    let u1 = match method {
        Method::Umle => fit_umle_1(data, model1, options),
        Method::Cmle => fit_cmle_1(data, model1, options),
    }
    .map_err(|e| e.in_component(Component::U1))?;
    let u2 = fit_2(data, model2, method, options).map_err(|e| e.in_component(Component::U2))?;
    Ok(EstimateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method,
        tau: u1.tau_floor + u2.tau_floor,
        u1,
        u2,
        variance: None,
    })
}
