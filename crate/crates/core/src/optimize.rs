//! Bound-constrained damped Newton ascent.
//!
//! The Hessian is formed by central differences of the analytic gradient.
//! Steps solve the Newton system on the free coordinates, shifted by a
//! Levenberg term when the negative Hessian is not positive definite, and
//! are accepted by projected Armijo backtracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, MAX_CONDITION};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Infinity-norm tolerance on the projected gradient.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative finite-difference step for the Hessian.
    pub fd_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            fd_step: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Maximum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub grad: Vec<T>,
    /// Negative finite-difference Hessian at `x` (observed information).
    pub information: Matrix<T>,
    pub iterations: usize,
    /// Infinity norm of the projected gradient at `x`.
    pub grad_norm: f64,
}

fn at_bound<T: Real>(x: T, lb: Option<T>) -> bool {
    lb.is_some_and(|b| x <= b + T::lit(1e-12))
}

fn projected_norm<T: Real>(x: &[T], g: &[T], lower: &[Option<T>]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower)
        .map(|((&xi, &gi), &lb)| {
            if at_bound(xi, lb) && gi < T::zero() {
                0.0
            } else {
                gi.as_f64().abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Negative Hessian by central differences of the gradient, one-sided next
/// to a lower bound.
pub fn fd_information<T: Real, F>(f: &mut F, x: &[T], lower: &[Option<T>], rel_step: f64) -> Result<Matrix<T>>
where
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let q = x.len();
    let mut h = Matrix::zeros(q, q);
    let mut probe = x.to_vec();
    for j in 0..q {
        let step = T::lit(rel_step) * x[j].abs().max(T::one());
        let lb = lower.get(j).copied().flatten();
        let backward_ok = lb.is_none_or(|b| x[j] - step >= b);
        probe[j] = x[j] + step;
        let (_, gp) = f(&probe)?;
        let (gm, width) = if backward_ok {
            probe[j] = x[j] - step;
            (f(&probe)?.1, step + step)
        } else {
            probe[j] = x[j];
            (f(&probe)?.1, step)
        };
        probe[j] = x[j];
        for i in 0..q {
            h[(i, j)] = -(gp[i] - gm[i]) / width;
        }
    }
    h.symmetrize();
    Ok(h)
}

/// Maximizes `f` from `x0` subject to coordinate-wise lower bounds.
///
/// `f` returns the objective value and its gradient. Evaluation errors at
/// trial points count as failed steps; an error at `x0` is returned.
/// A converged point whose information matrix is singular or badly
/// conditioned yields [`Error::Unidentifiable`].
pub fn maximize<T: Real, F>(mut f: F, x0: Vec<T>, lower: &[Option<T>], opts: &SolverOptions) -> Result<Maximum<T>>
where
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let q = x0.len();
    let lower: Vec<Option<T>> = (0..q).map(|i| lower.get(i).copied().flatten()).collect();
    let project = |x: &mut [T]| {
        for (xi, lb) in x.iter_mut().zip(&lower) {
            if let Some(b) = lb {
                if *xi < *b {
                    *xi = *b;
                }
            }
        }
    };
    let tol = opts.tol.max(1e3 * T::epsilon().as_f64());
    let mut x = x0;
    project(&mut x);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFiniteLikelihood("objective at starting point".into()));
    }
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    loop {
        let gnorm = projected_norm(&x, &g, &lower);
        let scale = fx.abs().as_f64().max(1.0);
        let step_tiny = last_step <= 1e-10;
        if gnorm <= tol || (step_tiny && gnorm <= tol.sqrt() * scale) {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: gnorm,
            });
        }
        iterations += 1;

        let info = fd_information(&mut f, &x, &lower, opts.fd_step)?;
        let free: Vec<usize> = (0..q)
            .filter(|&i| !(at_bound(x[i], lower[i]) && g[i] <= T::zero()))
            .collect();
        let mut dir = vec![T::zero(); q];
        if !free.is_empty() {
            let k = free.len();
            let mut sub = Matrix::zeros(k, k);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    sub[(a, b)] = info[(i, j)];
                }
            }
            let gf: Vec<T> = free.iter().map(|&i| g[i]).collect();
            let diag_scale = (0..k).map(|a| sub[(a, a)].abs()).fold(T::one(), T::max);
            let mut mu = T::zero();
            let solved = loop {
                let mut shifted = sub.clone();
                for a in 0..k {
                    shifted[(a, a)] = shifted[(a, a)] + mu;
                }
                if let Some(l) = shifted.cholesky() {
                    break Some(l.cholesky_solve(&gf));
                }
                mu = if mu == T::zero() {
                    diag_scale * T::lit(1e-8)
                } else {
                    mu * T::lit(10.0)
                };
                if mu > diag_scale * T::lit(1e12) {
                    break None;
                }
            };
            let d = solved.unwrap_or_else(|| gf.iter().map(|&v| v / diag_scale).collect());
            for (a, &i) in free.iter().enumerate() {
                dir[i] = d[a];
            }
        }

        let slope: T = dir.iter().zip(&g).map(|(&d, &gi)| d * gi).sum();
        let mut alpha = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<T> = x.iter().zip(&dir).map(|(&xi, &d)| xi + alpha * d).collect();
            project(&mut trial);
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() {
                    let moved: T = trial.iter().zip(&x).zip(&g).map(|((&a, &b), &gi)| (a - b) * gi).sum();
                    let sufficient = ft >= fx + T::lit(1e-4) * moved.min(alpha * slope);
                    let flat = (ft - fx).abs() <= T::epsilon() * T::lit(16.0) * fx.abs().max(T::one())
                        && projected_norm(&trial, &gt, &lower) < projected_norm(&x, &g, &lower);
                    if sufficient || flat {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
            }
            alpha = alpha * T::lit(0.5);
        }
        match accepted {
            Some((trial, ft, gt)) => {
                last_step = trial
                    .iter()
                    .zip(&x)
                    .map(|(&a, &b)| (a - b).abs().as_f64() / b.abs().as_f64().max(1.0))
                    .fold(0.0, f64::max);
                x = trial;
                fx = ft;
                g = gt;
            }
            None => {
                if gnorm <= tol.sqrt() * scale {
                    break;
                }
                return Err(Error::NoConvergence {
                    iterations,
                    residual: gnorm,
                });
            }
        }
    }

    let information = fd_information(&mut f, &x, &lower, opts.fd_step)?;
    let free: Vec<usize> = (0..q)
        .filter(|&i| !(at_bound(x[i], lower[i]) && g[i] < T::zero()))
        .collect();
    if !free.is_empty() {
        let sub = Matrix::from_rows(
            &free
                .iter()
                .map(|&i| free.iter().map(|&j| information[(i, j)]).collect())
                .collect::<Vec<_>>(),
        )?;
        let cond = sub.condition_number().as_f64();
        if sub.cholesky().is_none() || !(cond <= MAX_CONDITION) {
            return Err(Error::Unidentifiable(format!(
                "information matrix at the maximum is singular (condition {cond:.3e})"
            )));
        }
    }
    let grad_norm = projected_norm(&x, &g, &lower);
    Ok(Maximum {
        x,
        value: fx,
        grad: g,
        information,
        iterations,
        grad_norm,
    })
}
