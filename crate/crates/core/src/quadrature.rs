//! Gauss–Hermite rules against the standard normal density.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default node count for mixed-logit pattern probabilities.
pub const DEFAULT_NODES: usize = 30;

/// Reference standard deviation of the rule used by the mixed-logit model.
pub const MIXING_SCALE: f64 = 0.6;

/// Probabilists' Gauss–Hermite rule: `Σ w_k f(z_k) ≈ ∫ f(z) φ(z) dz`,
/// with weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule<T> {
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> QuadratureRule<T> {
    pub fn gauss_hermite(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("quadrature needs at least one node".into()));
        }
        let (x, w) = physicists_gauss_hermite(k);
        let sqrt2 = std::f64::consts::SQRT_2;
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        Ok(Self {
            nodes: x.iter().map(|&xi| T::lit(xi * sqrt2)).collect(),
            weights: w.iter().map(|&wi| T::lit(wi * inv_sqrt_pi)).collect(),
        })
    }

    /// Gauss–Hermite rule for `N(0, s²)` reweighted to the standard normal:
    /// nodes `s·z_k`, weights `w_k·s·exp((1−s²) z_k²/2)`, renormalized to sum
    /// to one so that constants integrate exactly. With `s = 0.6` and 30
    /// nodes, products of logistic functions of `α + σz` are integrated to
    /// about 1e-10 for σ ≤ 2, where the plain rule stalls near 1e-6.
    pub fn scaled_gauss_hermite(k: usize, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "quadrature scale {scale} must be positive"
            )));
        }
        let base = QuadratureRule::<f64>::gauss_hermite(k)?;
        let raw: Vec<f64> = base
            .nodes
            .iter()
            .zip(&base.weights)
            .map(|(&z, &w)| w * scale * (0.5 * (1.0 - scale * scale) * z * z).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            nodes: base.nodes.iter().map(|&z| T::lit(z * scale)).collect(),
            weights: raw.iter().map(|&w| T::lit(w / total)).collect(),
        })
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Expectation of `f(Z)` for standard normal `Z`.
    pub fn expect(&self, mut f: impl FnMut(T) -> T) -> T {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * f(z)).sum()
    }
}

/// Nodes and weights for `∫ e^{-x²} f(x) dx`, by Newton iteration on the
/// orthonormal Hermite recurrence. Nodes are returned in descending order.
fn physicists_gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    const MAX_ITER: usize = 100;

    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..MAX_ITER {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}
