//! Limited-memory BFGS ascent with backtracking line search.
//!
//! One optimizer serves every inner loop in the crate: the variogram
//! weighted-least-squares fit, the Laplace mode search, and the generalized
//! M-step over transformed discrepancy parameters. All of those are smooth
//! unconstrained problems of modest dimension, so a hand-rolled two-loop
//! recursion with Armijo backtracking is enough.

use nalgebra::DVector;

use crate::error::{Error, Result};

pub struct LbfgsOptions {
    /// Number of curvature pairs retained.
    pub memory: usize,
    pub max_iters: usize,
    /// Converged when the max-norm of the gradient falls at or below this.
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-9,
        }
    }
}

pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub iters: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

/// Maximize `f` starting from `x0`. The closure returns the objective value
/// and its gradient. `stop` is consulted after every accepted step with the
/// current point, gradient and value; returning `true` ends the search as
/// converged (in addition to the built-in gradient tolerance).
pub fn maximize<F, S>(
    mut f: F,
    x0: DVector<f64>,
    opts: &LbfgsOptions,
    mut stop: S,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    S: FnMut(&DVector<f64>, &DVector<f64>, f64) -> bool,
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams(
            "objective is not finite at the starting point".into(),
        ));
    }

    let mut s_hist: Vec<DVector<f64>> = Vec::with_capacity(opts.memory);
    let mut y_hist: Vec<DVector<f64>> = Vec::with_capacity(opts.memory);
    let mut rho: Vec<f64> = Vec::with_capacity(opts.memory);

    let mut iters = 0;
    let mut converged = grad_done(&g, opts.grad_tol) || stop(&x, &g, fx);

    while !converged && iters < opts.max_iters {
        iters += 1;

        // Two-loop recursion on the ascent direction (signs follow from
        // maximizing: direction = H_approx * gradient).
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho[i] * s_hist[i].dot(&q);
            q.axpy(-alpha[i], &y_hist[i], 1.0);
        }
        if k > 0 {
            let gamma = s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].norm_squared();
            q *= gamma;
        } else {
            // Scale the first steepest-ascent step to unit max-norm.
            let gmax = g.amax();
            if gmax > 0.0 {
                q /= gmax.max(1.0);
            }
        }
        for i in 0..k {
            let beta = rho[i] * y_hist[i].dot(&q);
            q.axpy(alpha[i] - beta, &s_hist[i], 1.0);
        }
        let mut dir = q;

        let mut slope = g.dot(&dir);
        if slope <= 0.0 {
            // The approximation lost positive definiteness; fall back.
            dir = g.clone();
            let gmax = g.amax().max(1.0);
            dir /= gmax;
            slope = g.dot(&dir);
        }

        // Backtracking Armijo line search for maximization.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let x_new = &x + &dir * t;
            let (f_new, g_new) = f(&x_new);
            if f_new.is_finite() && f_new >= fx + ARMIJO_C1 * t * slope {
                accepted = Some((x_new, f_new, g_new));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No admissible step along this direction: report what we have.
            break;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        // For ascent the curvature condition is s'y < 0; store the pair in
        // minimization convention by negating y.
        if -sy > 1e-12 * s.norm() * y.norm() {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            let y_min = -y;
            rho.push(1.0 / s.dot(&y_min));
            s_hist.push(s);
            y_hist.push(y_min);
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        if g.iter().any(|v| !v.is_finite()) {
            break;
        }
        converged = grad_done(&g, opts.grad_tol) || stop(&x, &g, fx);
        let _ = n;
    }

    Ok(LbfgsOutcome {
        value: fx,
        grad: g,
        x,
        iters,
        converged,
    })
}

fn grad_done(g: &DVector<f64>, tol: f64) -> bool {
    g.amax() <= tol
}

/// Central-difference gradient with per-coordinate relative step.
pub fn central_diff_grad<F>(mut f: F, x: &DVector<f64>, rel_step: f64) -> DVector<f64>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = rel_step * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        // f(x) = -(x1-3)^2 - 2(x2+1)^2, maximum at (3, -1).
        let f = |x: &DVector<f64>| {
            let v = -(x[0] - 3.0).powi(2) - 2.0 * (x[1] + 1.0).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (x[0] - 3.0), -4.0 * (x[1] + 1.0)]);
            (v, g)
        };
        let out = maximize(
            f,
            DVector::zeros(2),
            &LbfgsOptions::default(),
            |_, _, _| false,
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 3.0).abs() < 1e-7);
        assert!((out.x[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn maximizes_rosenbrock_flipped() {
        // Negated Rosenbrock: badly scaled curved valley.
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = -(1.0 - a).powi(2) - 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                2.0 * (1.0 - a) + 400.0 * a * (b - a * a),
                -200.0 * (b - a * a),
            ]);
            (v, g)
        };
        let opts = LbfgsOptions {
            max_iters: 2000,
            grad_tol: 1e-8,
            ..Default::default()
        };
        let out = maximize(f, DVector::from_vec(vec![-1.2, 1.0]), &opts, |_, _, _| false).unwrap();
        assert!(out.converged, "grad norm {}", out.grad.amax());
        assert!((out.x[0] - 1.0).abs() < 1e-5);
        assert!((out.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn central_difference_matches_analytic() {
        let f = |x: &DVector<f64>| x[0].sin() + x[1] * x[1];
        let x = DVector::from_vec(vec![0.7, -1.3]);
        let g = central_diff_grad(f, &x, 1e-6);
        assert!((g[0] - 0.7_f64.cos()).abs() < 1e-9);
        assert!((g[1] + 2.6).abs() < 1e-8);
    }
}
