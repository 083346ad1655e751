mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snowlink::link_model::{Homogeneous, LinkParams, Rasch, Scope};
use snowlink::patterns::enumerate_patterns;
use snowlink::{LinkModel, OutcomePattern};

use common::*;

fn scopes(n: usize) -> impl Iterator<Item = (Scope, Option<usize>)> {
    std::iter::once((Scope::Between, None)).chain((0..n).map(|l| (Scope::Within(l), Some(l))))
}

#[test]
fn fair_coin_pattern() {
    let m = Homogeneous::<f64>::new(2).unwrap();
    let p = m
        .pattern_prob(&LinkParams::new(vec![0.0, 0.0]), pattern(0b01, 2), Scope::Between)
        .unwrap();
    assert_eq!(p, 0.25);
    let m1 = Homogeneous::<f64>::new(1).unwrap();
    let g = m1
        .pattern_grad(&LinkParams::new(vec![0.0]), pattern(1, 1), Scope::Between)
        .unwrap();
    assert!((g[0] - 0.25).abs() < 1e-15);
}

#[test]
fn zero_pattern_examples() {
    let h = Homogeneous::<f64>::new(2).unwrap();
    let (p, _) = h
        .zero_pattern_prob_and_grad(&h.params_from_probability(0.3), Scope::Between)
        .unwrap();
    assert!((p - 0.49).abs() < 1e-15);
    let r = Rasch::<f64>::new(2).unwrap();
    let (p, _) = r
        .zero_pattern_prob_and_grad(&LinkParams::new(vec![0.0, 0.0, 0.0]), Scope::Between)
        .unwrap();
    assert!((p - 0.25).abs() < 1e-15);
    let (p, _) = r
        .zero_pattern_prob_and_grad(&LinkParams::new(vec![0.0, 0.0, 2.0]), Scope::Between)
        .unwrap();
    let dense = rasch_dense(&[0.0, 0.0], 2.0, OutcomePattern::zero(2), Scope::Between);
    assert!(p > 0.25);
    assert!((p - dense).abs() < 1e-8, "{p} vs {dense}");
}

#[test]
fn rasch_matches_dense_integral() {
    let r = Rasch::<f64>::new(2).unwrap();
    let p = r
        .pattern_prob(&LinkParams::new(vec![0.0, 0.0, 1.0]), pattern(0b11, 2), Scope::Between)
        .unwrap();
    let dense = normal_expectation(|z| logistic(z).powi(2));
    assert!((p - dense).abs() < 1e-8, "{p} vs {dense}");
}

#[test]
fn normalization_and_gradient_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 1..=8 {
        for rasch in [false, true] {
            let theta = random_theta(&mut rng, n, rasch);
            let model: Box<dyn LinkModel<f64>> = if rasch {
                Box::new(Rasch::new(n).unwrap())
            } else {
                Box::new(Homogeneous::new(n).unwrap())
            };
            let th = LinkParams::new(theta);
            for (scope, skip) in scopes(n) {
                let mut total = 0.0;
                let mut gsum = vec![0.0; model.dim()];
                for x in enumerate_patterns(n, skip).unwrap() {
                    let (p, g) = model.prob_and_grad(&th, x, scope).unwrap();
                    assert!(p > 0.0 && p < 1.0 || n == 1 && skip.is_some());
                    total += p;
                    gsum.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                }
                assert!((total - 1.0).abs() < 1e-10, "n={n} rasch={rasch} {scope:?}: {total}");
                assert!(gsum.iter().all(|s| s.abs() < 1e-10), "{gsum:?}");
            }
        }
    }
}

#[test]
fn degenerate_rasch_is_homogeneous() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 1..=8 {
        let alpha = random_theta(&mut rng, n, false);
        let h = Homogeneous::<f64>::new(n).unwrap();
        let r = Rasch::<f64>::new(n).unwrap();
        let mut with_sigma = alpha.clone();
        with_sigma.push(0.0);
        let p: Vec<f64> = alpha.iter().map(|&a| logistic(a)).collect();
        for (scope, skip) in scopes(n) {
            for x in enumerate_patterns(n, skip).unwrap() {
                let exact = bernoulli_prob(&p, x, scope);
                let ph = h.prob_unchecked(&alpha, x, scope);
                let pr = r.prob_unchecked(&with_sigma, x, scope);
                assert!((ph - exact).abs() < 1e-12);
                assert!((pr - exact).abs() < 1e-12, "n={n} x={x}: {pr} vs {exact}");
            }
        }
    }
}

#[test]
fn quadrature_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for n in 1..=6 {
        let r30 = Rasch::<f64>::with_nodes(n, 30).unwrap();
        let r60 = Rasch::<f64>::with_nodes(n, 60).unwrap();
        for sigma in [0.5, 1.0, 2.0] {
            let mut theta = random_theta(&mut rng, n, false);
            theta.push(sigma);
            for x in enumerate_patterns(n, None).unwrap() {
                let a = r30.prob_unchecked(&theta, x, Scope::Between);
                let b = r60.prob_unchecked(&theta, x, Scope::Between);
                assert!((a - b).abs() < 1e-9, "n={n} σ={sigma} x={x}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn rasch_gradient_example() {
    let r = Rasch::<f64>::new(2).unwrap();
    let theta = [0.3, -0.2, 0.7];
    for x in enumerate_patterns(2, None).unwrap() {
        let g = r
            .pattern_grad(&LinkParams::new(theta.to_vec()), x, Scope::Between)
            .unwrap();
        let fd = fd_grad(|t| r.prob_unchecked(t, x, Scope::Between), &theta);
        for (a, f) in g.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-6 * f.abs().max(1e-3), "{x}: {g:?} vs {fd:?}");
        }
    }
}

#[test]
fn random_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let rasch = rng.random_bool(0.5);
        let theta = random_theta(&mut rng, n, rasch);
        let model: Box<dyn LinkModel<f64>> = if rasch {
            Box::new(Rasch::new(n).unwrap())
        } else {
            Box::new(Homogeneous::new(n).unwrap())
        };
        let scope = if rng.random_bool(0.5) {
            Scope::Between
        } else {
            Scope::Within(rng.random_range(0..n))
        };
        let mut bits = rng.random_range(0..1u64 << n);
        if let Scope::Within(l) = scope {
            bits &= !(1 << l);
        }
        let x = pattern(bits, n);
        let (_, g) = model.prob_and_grad(&LinkParams::new(theta.clone()), x, scope).unwrap();
        let fd = fd_grad(|t| model.prob_unchecked(t, x, scope), &theta);
        let err = g
            .iter()
            .zip(&fd)
            .map(|(a, f)| (a - f).abs() / f.abs().max(1e-3))
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "worst relative gradient error {worst}");
}

#[test]
fn single_precision_model() {
    let r = Rasch::<f32>::new(3).unwrap();
    let th = LinkParams::new(vec![0.1f32, -0.4, 0.2, 0.8]);
    let total: f32 = enumerate_patterns(3, None)
        .unwrap()
        .into_iter()
        .map(|x| r.pattern_prob(&th, x, Scope::Between).unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-5);
}
