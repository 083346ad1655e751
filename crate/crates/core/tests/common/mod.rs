//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snowlink::estimators::{fit_2, fit_cmle_1, fit_umle_1};
use snowlink::link_model::{Homogeneous, LinkParams, Rasch, Scope};
use snowlink::patterns::enumerate_patterns;
use snowlink::simulator::{draw_sample, replicate_rng, ClusterMode, PopulationConfig};
use snowlink::variance::{
    asymptotic_matrices, empirical_v_covariance, psi1_inverse, sigma1_inverse, sigma2_inverse, Design, Which,
};
use snowlink::{Error, FitOptions, LinkModel, Matrix, Method, ModelSpec, OutcomePattern, PatternCounts, SampleData};

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn pattern(bits: u64, n: usize) -> OutcomePattern {
    OutcomePattern::new(bits, n).unwrap()
}

/// Central differences with step `1e-5·max(1, |xⱼ|)`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let h = 1e-5 * x[j].abs().max(1.0);
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[j] += h;
            dn[j] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise error relative to `max(|fd|, 1)`.
pub fn rel_grad_error(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// `∫ f(z) φ(z) dz` by the trapezoid rule on (−10, 10) with 10⁵ points.
pub fn normal_expectation(f: impl Fn(f64) -> f64) -> f64 {
    let k = 100_000;
    let h = 20.0 / (k - 1) as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = 0.0;
    for i in 0..k {
        let z = -10.0 + i as f64 * h;
        let w = if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
        s += w * f(z) * norm * (-0.5 * z * z).exp();
    }
    s * h
}

fn skipped(scope: Scope, i: usize) -> bool {
    matches!(scope, Scope::Within(l) if l == i)
}

/// Product-Bernoulli probability from per-site link probabilities.
pub fn bernoulli_prob(p: &[f64], x: OutcomePattern, scope: Scope) -> f64 {
    (0..p.len())
        .filter(|&i| !skipped(scope, i))
        .map(|i| if x.linked(i) { p[i] } else { 1.0 - p[i] })
        .product()
}

/// Rasch probability by dense integration over the latent variable.
pub fn rasch_dense(alpha: &[f64], sigma: f64, x: OutcomePattern, scope: Scope) -> f64 {
    normal_expectation(|z| {
        let p: Vec<f64> = alpha.iter().map(|a| logistic(a + sigma * z)).collect();
        bernoulli_prob(&p, x, scope)
    })
}

/// `ln(τ!/(τ−k)!)` as an explicit sum.
pub fn ln_falling(tau: u64, k: u64) -> f64 {
    (tau - k + 1..=tau).map(|v| (v as f64).ln()).sum()
}

fn random_counts(rng: &mut impl Rng, n: usize, exclude: Option<usize>, budget: u64) -> PatternCounts {
    let mut out = PatternCounts::new();
    let mut left = budget;
    let cells = enumerate_patterns(n, exclude).unwrap();
    for x in cells.into_iter().filter(|x| !x.is_zero()) {
        if left == 0 {
            break;
        }
        if rng.random_bool(0.7) {
            let c = rng.random_range(1..=left);
            out.insert(x, c);
            left -= c;
        }
    }
    out
}

/// Random valid sample with every count at most `max`.
pub fn random_sample(rng: &mut impl Rng, n: usize, big_n: usize, max: u64) -> SampleData {
    let m: Vec<u64> = (0..n).map(|_| rng.random_range(0..=max)).collect();
    let within = (0..n)
        .map(|l| {
            if n > 1 {
                random_counts(rng, n, Some(l), m[l])
            } else {
                PatternCounts::new()
            }
        })
        .collect();
    let budget1 = rng.random_range(1..=max * 2);
    let budget2 = rng.random_range(1..=max * 2);
    let between1 = if n < big_n {
        random_counts(rng, n, None, budget1)
    } else {
        PatternCounts::new()
    };
    let mut between2 = random_counts(rng, n, None, budget2);
    if between2.is_empty() {
        between2.insert(OutcomePattern::new((1 << n) - 1, n).unwrap(), 1);
    }
    SampleData::new(n, big_n, m, between1, within, between2).unwrap()
}

/// Random parameter vector: logits in [−2, 2], σ in [0, 2] for Rasch.
pub fn random_theta(rng: &mut impl Rng, n: usize, rasch: bool) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    if rasch {
        t.push(rng.random_range(0.0..2.0));
    }
    t
}

/// Two-site family whose zero pattern has constant mass 0.4; the three linked
/// patterns share 0.6 with softmax weights over logits (θ, 0, −θ). Within a
/// site the single other-site link has probability logistic(θ).
pub struct FlatZero;

impl FlatZero {
    pub const PI0: f64 = 0.4;

    fn between(theta: f64) -> [f64; 4] {
        let e = [theta.exp(), 1.0, (-theta).exp()];
        let s: f64 = e.iter().sum();
        let scale = 1.0 - Self::PI0;
        [Self::PI0, scale * e[0] / s, scale * e[1] / s, scale * e[2] / s]
    }
}

impl LinkModel<f64> for FlatZero {
    fn sites(&self) -> usize {
        2
    }

    fn dim(&self) -> usize {
        1
    }

    fn eval_unchecked(&self, theta: &[f64], x: OutcomePattern, scope: Scope) -> (f64, Vec<f64>) {
        let t = theta[0];
        match scope {
            Scope::Between => {
                let p = Self::between(t);
                let a = [0.0, 1.0, 0.0, -1.0];
                let mean: f64 = (1..4).map(|k| p[k] * a[k]).sum::<f64>() / (1.0 - Self::PI0);
                let k = x.bits() as usize;
                let d = if k == 0 { 0.0 } else { p[k] * (a[k] - mean) };
                (p[k], vec![d])
            }
            Scope::Within(_) => {
                let q = logistic(t);
                let d = q * (1.0 - q);
                if x.is_zero() {
                    (1.0 - q, vec![-d])
                } else {
                    (q, vec![d])
                }
            }
        }
    }

    fn initial_params(&self, _rates: &[f64]) -> LinkParams<f64> {
        LinkParams::new(vec![0.0])
    }
}

/// Probability-weighted first and second moments of the V-vectors, obtained by
/// enumerating every case a population member can fall into.
pub fn v_moments<M: LinkModel<f64> + ?Sized>(
    model: &M,
    theta: &[f64],
    design: &Design,
    which: Which,
) -> (Vec<f64>, Matrix) {
    let n = model.sites();
    let big_n = design.big_n as f64;
    let c = 1.0 - design.n as f64 / big_n;
    let eval = |x: OutcomePattern, scope: Scope| model.eval_unchecked(theta, x, scope);
    let zero = OutcomePattern::zero(n);
    let (pi0, g0) = eval(zero, Scope::Between);
    let score = |p: f64, g: &[f64]| -> Vec<f64> { g.iter().map(|d| d / p).collect() };
    let lead = |v: f64, rest: Vec<f64>| -> Vec<f64> { std::iter::once(v).chain(rest).collect() };

    let mut cases: Vec<(f64, Vec<f64>)> = Vec::new();
    match which {
        Which::Sigma1 => {
            for l in 0..n {
                for x in enumerate_patterns(n, Some(l)).unwrap() {
                    let (p, g) = eval(x, Scope::Within(l));
                    cases.push((p / big_n, lead(1.0, score(p, &g))));
                }
            }
            cases.push((c * pi0, lead(-(1.0 - c * pi0) / (c * pi0), score(pi0, &g0))));
            for x in enumerate_patterns(n, None)
                .unwrap()
                .into_iter()
                .filter(|x| !x.is_zero())
            {
                let (p, g) = eval(x, Scope::Between);
                cases.push((c * p, lead(1.0, score(p, &g))));
            }
        }
        Which::Psi1 => {
            for l in 0..n {
                for x in enumerate_patterns(n, Some(l)).unwrap() {
                    let (p, g) = eval(x, Scope::Within(l));
                    cases.push((p / big_n, score(p, &g)));
                }
            }
            cases.push((c * pi0, vec![0.0; g0.len()]));
            for x in enumerate_patterns(n, None)
                .unwrap()
                .into_iter()
                .filter(|x| !x.is_zero())
            {
                let (p, g) = eval(x, Scope::Between);
                let pt = p / (1.0 - pi0);
                let gt: Vec<f64> = g
                    .iter()
                    .zip(&g0)
                    .map(|(d, d0)| d / (1.0 - pi0) + p * d0 / (1.0 - pi0).powi(2))
                    .collect();
                cases.push((c * p, score(pt, &gt)));
            }
        }
        Which::Sigma2 => {
            cases.push((pi0, lead(-(1.0 - pi0) / pi0, score(pi0, &g0))));
            for x in enumerate_patterns(n, None)
                .unwrap()
                .into_iter()
                .filter(|x| !x.is_zero())
            {
                let (p, g) = eval(x, Scope::Between);
                cases.push((p, lead(1.0, score(p, &g))));
            }
        }
    }
    let total: f64 = cases.iter().map(|(w, _)| w).sum();
    assert!((total - 1.0).abs() < 1e-12, "case probabilities sum to {total}");
    let d = cases[0].1.len();
    let mut mean = vec![0.0; d];
    let mut second = Matrix::zeros(d, d);
    for (w, v) in &cases {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += w * x;
        }
        second.add_outer(*w, v, v);
    }
    (mean, second)
}

/// Maximizes `f` over a box by repeated grid refinement until the spacing
/// drops below `resolution`.
pub fn zoom_max(f: impl Fn(&[f64]) -> f64, lo: &[f64], hi: &[f64], resolution: f64) -> (Vec<f64>, f64) {
    let d = lo.len();
    let points = 21usize;
    let mut lo = lo.to_vec();
    let mut hi = hi.to_vec();
    let (orig_lo, orig_hi) = (lo.clone(), hi.clone());
    let mut best = (lo.clone(), f64::NEG_INFINITY);
    loop {
        let steps: Vec<f64> = (0..d).map(|j| (hi[j] - lo[j]) / (points - 1) as f64).collect();
        let mut idx = vec![0usize; d];
        loop {
            let x: Vec<f64> = (0..d).map(|j| lo[j] + idx[j] as f64 * steps[j]).collect();
            let v = f(&x);
            if v > best.1 {
                best = (x, v);
            }
            let mut j = 0;
            while j < d {
                idx[j] += 1;
                if idx[j] < points {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == d {
                break;
            }
        }
        if steps.iter().all(|&s| s < resolution) {
            return best;
        }
        for j in 0..d {
            lo[j] = (best.0[j] - 2.0 * steps[j]).max(orig_lo[j]);
            hi[j] = (best.0[j] + 2.0 * steps[j]).min(orig_hi[j]);
        }
    }
}

/// Frobenius norm of `a − b` relative to that of `b`.
pub fn frobenius_rel(a: &Matrix, b: &Matrix) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..b.rows() {
        for j in 0..b.cols() {
            num += (a[(i, j)] - b[(i, j)]).powi(2);
            den += b[(i, j)].powi(2);
        }
    }
    (num / den).sqrt()
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Probability oracle signature: `(pattern, scope) ↦ π`.
pub type ProbFn<'a> = &'a dyn Fn(OutcomePattern, Scope) -> f64;

fn within_terms(data: &SampleData, prob: ProbFn) -> f64 {
    let n = data.sites();
    let mut s = 0.0;
    for l in 0..n {
        for (&x, &r) in data.within(l) {
            s += r as f64 * prob(x, Scope::Within(l)).ln();
        }
        let z = data.within_zero(l);
        if z > 0 {
            s += z as f64 * prob(OutcomePattern::zero(n), Scope::Within(l)).ln();
        }
    }
    s
}

/// Covered-population log-likelihood at integer τ₁, written out term by term.
pub fn full1_oracle(data: &SampleData, tau: u64, prob: ProbFn) -> f64 {
    let n = data.sites();
    let (m, r1) = (data.m(), data.r1());
    let c = 1.0 - n as f64 / data.frame_size() as f64;
    let pi0 = prob(OutcomePattern::zero(n), Scope::Between);
    let mut v = ln_falling(tau, m + r1);
    if tau > m {
        v += (tau - m) as f64 * c.ln();
    }
    if tau > m + r1 {
        v += (tau - m - r1) as f64 * pi0.ln();
    }
    for (&x, &r) in data.between1() {
        v += r as f64 * prob(x, Scope::Between).ln();
    }
    v + within_terms(data, prob)
}

pub fn cond1_oracle(data: &SampleData, prob: ProbFn) -> f64 {
    let pi0 = prob(OutcomePattern::zero(data.sites()), Scope::Between);
    let mut v = 0.0;
    for (&x, &r) in data.between1() {
        v += r as f64 * (prob(x, Scope::Between) / (1.0 - pi0)).ln();
    }
    v + within_terms(data, prob)
}

pub fn full2_oracle(data: &SampleData, tau: u64, prob: ProbFn) -> f64 {
    let pi0 = prob(OutcomePattern::zero(data.sites()), Scope::Between);
    let mut v = ln_falling(tau, data.r2());
    if tau > data.r2() {
        v += (tau - data.r2()) as f64 * pi0.ln();
    }
    for (&x, &r) in data.between2() {
        v += r as f64 * prob(x, Scope::Between).ln();
    }
    v
}

pub fn cond2_oracle(data: &SampleData, prob: ProbFn) -> f64 {
    let pi0 = prob(OutcomePattern::zero(data.sites()), Scope::Between);
    data.between2()
        .iter()
        .map(|(&x, &r)| r as f64 * (prob(x, Scope::Between) / (1.0 - pi0)).ln())
        .sum()
}

/// Homogeneous probabilities from link probabilities, as a [`ProbFn`].
pub fn homogeneous_prob(p: &[f64]) -> impl Fn(OutcomePattern, Scope) -> f64 + '_ {
    move |x, scope| bernoulli_prob(p, x, scope)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Conditional-multinomial population with homogeneous link models.
pub fn homogeneous_config(big_n: usize, n: usize, tau1: u64, tau2: u64, p1: &[f64], p2: &[f64]) -> PopulationConfig {
    PopulationConfig {
        frame_size: big_n,
        n,
        cluster_mode: ClusterMode::ConditionalMultinomial { tau1 },
        tau2,
        model1: ModelSpec::homogeneous(n),
        model2: ModelSpec::homogeneous(n),
        theta1: p1.iter().map(|&p| logit(p)).collect(),
        theta2: p2.iter().map(|&p| logit(p)).collect(),
    }
}

/// Link probabilities from logits.
pub fn probs(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|&t| logistic(t)).collect()
}

pub const BOX: f64 = 8.0;

/// Logit-space grid maximizer of `f`, or `None` when it sits on the box edge.
pub fn grid(f: impl Fn(&[f64]) -> f64, dim: usize) -> Option<(Vec<f64>, f64)> {
    let (x, v) = zoom_max(f, &vec![-BOX; dim], &vec![BOX; dim], 1e-5);
    x.iter().all(|t| t.abs() < BOX - 1e-3).then_some((x, v))
}

/// Integer profile maximizer `(k, θ_k)` over a window around `centre`;
/// ties go to the larger `k`.
pub fn profile_oracle(f: impl Fn(u64, &[f64]) -> f64, lo: u64, centre: u64, dim: usize) -> Option<(u64, Vec<f64>)> {
    let start = centre.saturating_sub(12).max(lo);
    let end = centre + 12;
    let mut best: Option<(u64, Vec<f64>, f64)> = None;
    for k in start..=end {
        let (x, v) = grid(|t| f(k, t), dim)?;
        if best.as_ref().is_none_or(|b| v >= b.2) {
            best = Some((k, x, v));
        }
    }
    let (k, x, _) = best?;
    (k != end && (k != start || start == lo)).then_some((k, x))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Replicates on two sites with every cell small enough for grid searches.
pub fn small_instances() -> Vec<SampleData> {
    let cfgs = [
        homogeneous_config(5, 2, 40, 30, &[0.35, 0.5], &[0.4, 0.3]),
        homogeneous_config(4, 2, 30, 25, &[0.6, 0.3], &[0.5, 0.5]),
        homogeneous_config(6, 2, 45, 20, &[0.45, 0.4], &[0.6, 0.35]),
    ];
    let mut out = Vec::new();
    for (i, cfg) in cfgs.iter().enumerate() {
        for r in 0..4 {
            let (d, _) = draw_sample(cfg, &mut replicate_rng(1000 + i as u64, r)).unwrap();
            let small = d.between1().values().chain(d.between2().values()).all(|&c| c <= 30)
                && d.site_sizes().iter().all(|&m| m <= 30);
            if small && d.r1() > 0 && d.r2() > 0 {
                out.push(d);
            }
        }
    }
    assert!(out.len() >= 8, "only {} usable instances", out.len());
    out
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.to_rows().iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_entry(m: &Matrix) -> f64 {
    m.to_rows().iter().flatten().fold(1.0, |a: f64, v| a.max(v.abs()))
}

pub fn boxed_model(n: usize, rasch: bool) -> Box<dyn LinkModel<f64>> {
    if rasch {
        Box::new(Rasch::new(n).unwrap())
    } else {
        Box::new(Homogeneous::new(n).unwrap())
    }
}

/// Largest ratio of the Ψ₁ identity residual to its bound
/// `1e-10·(1 + ‖Ψ₁⁻¹‖)` over random draws with n ∈ 2..=6, N ∈ n+1..=12.
pub fn psi_identity_worst(seed: u64, draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let n = rng.random_range(2..=6);
        let rasch = rng.random_bool(0.5);
        let big_n = rng.random_range(n + 1..=12);
        let model = boxed_model(n, rasch);
        let theta = LinkParams::new(random_theta(&mut rng, n, rasch));
        let design = Design::new(n, big_n).unwrap();
        let psi = psi1_inverse(&theta, model.as_ref(), &design).unwrap().inverse_form;
        let sigma = sigma1_inverse(&theta, model.as_ref(), &design).unwrap().inverse_form;
        let (pi0, g0) = model
            .prob_and_grad(&theta, OutcomePattern::zero(n), Scope::Between)
            .unwrap();
        let c = 1.0 - n as f64 / big_n as f64;
        let mut rhs = sigma.block(1, model.dim());
        rhs.add_outer(-c / (pi0 * (1.0 - pi0)), &g0, &g0);
        let diff = frobenius_norm(&psi.sub(&rhs));
        worst = worst.max(diff / (1e-10 * (1.0 + frobenius_norm(&psi))));
    }
    worst
}

/// Outcome of comparing enumerated V-vector moments with the analytic
/// precision matrices, errors relative to the largest entry.
pub struct MomentCheck {
    pub checked: usize,
    pub singular: usize,
    pub mean_err: f64,
    pub second_err: f64,
}

/// Two random parameter draws per (n ≤ 6, family), all three matrices.
/// Where the library reports a singular matrix the enumerated one must be
/// singular as well.
pub fn v_moment_check(seed: u64) -> MomentCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MomentCheck {
        checked: 0,
        singular: 0,
        mean_err: 0.0,
        second_err: 0.0,
    };
    for n in 1..=6 {
        for rasch in [false, true] {
            for _ in 0..2 {
                let model = boxed_model(n, rasch);
                let theta = random_theta(&mut rng, n, rasch);
                let big_n = n + rng.random_range(1..=6);
                let design = Design::new(n, big_n).unwrap();
                for which in [Which::Sigma1, Which::Psi1, Which::Sigma2] {
                    let (mean, second) = v_moments(model.as_ref(), &theta, &design, which);
                    match asymptotic_matrices(which, &LinkParams::new(theta.clone()), model.as_ref(), &design) {
                        Ok(analytic) => {
                            let s = max_entry(&analytic.inverse_form);
                            let m = mean.iter().fold(0.0, |a: f64, v| a.max(v.abs()));
                            out.mean_err = out.mean_err.max(m / s);
                            out.second_err = out.second_err.max(second.max_abs_diff(&analytic.inverse_form) / s);
                            out.checked += 1;
                        }
                        Err(Error::SingularMatrix { .. }) => {
                            let eig = second.symmetric_eigenvalues();
                            let lo = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
                            assert!(lo < 1e-12 * max_entry(&second), "{which} n={n} rasch={rasch}: {eig:?}");
                            out.singular += 1;
                        }
                        Err(e) => panic!("{which} n={n} rasch={rasch}: {e}"),
                    }
                }
            }
        }
    }
    out
}

/// Relative Frobenius distances of the empirical V-covariances from the
/// analytic Σ₁⁻¹, Ψ₁⁻¹ and Σ₂⁻¹ on one draw with τ₁ = τ₂ = 10⁵.
pub fn empirical_v_distances(seed: u64) -> [f64; 3] {
    let cfg = homogeneous_config(10, 4, 100_000, 100_000, &[0.3; 4], &[0.25; 4]);
    let h = Homogeneous::<f64>::new(4).unwrap();
    let design = Design::new(4, 10).unwrap();
    let (data, _) = draw_sample(&cfg, &mut replicate_rng(seed, 0)).unwrap();
    let options = FitOptions::default();
    let truth1 = LinkParams::new(cfg.theta1.clone());
    let truth2 = LinkParams::new(cfg.theta2.clone());
    let umle = fit_umle_1(&data, &h, &options).unwrap();
    let cmle = fit_cmle_1(&data, &h, &options).unwrap();
    let u2 = fit_2(&data, &h, Method::Umle, &options).unwrap();
    let pairs = [
        (
            empirical_v_covariance(&data, &umle.theta, umle.tau, &h, Which::Sigma1),
            sigma1_inverse(&truth1, &h, &design),
        ),
        (
            empirical_v_covariance(&data, &cmle.theta, cmle.tau, &h, Which::Psi1),
            psi1_inverse(&truth1, &h, &design),
        ),
        (
            empirical_v_covariance(&data, &u2.theta, u2.tau, &h, Which::Sigma2),
            sigma2_inverse(&truth2, &h),
        ),
    ];
    pairs.map(|(e, a)| frobenius_rel(&e.unwrap().inverse_form, &a.unwrap().inverse_form))
}
