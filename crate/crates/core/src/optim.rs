//! Smooth unconstrained minimization: limited-memory BFGS with a
//! backtracking (Armijo) line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Stop when the sup-norm of the gradient falls to this level.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-8,
            max_iter: 500,
            c1: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    MaxIterations,
    /// No step satisfied sufficient decrease, even along steepest descent.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Minimize `f`, which returns the objective and writes the gradient into its
/// second argument. Accepted iterates never increase the objective.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dim = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; dim];
    let mut fx = f(&x, &mut g);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![0.0; dim];
    let mut g_new = vec![0.0; dim];
    let mut d = vec![0.0; dim];
    let mut alpha = vec![0.0; opts.memory];

    for iter in 0..opts.max_iter {
        let gnorm = sup_norm(&g);
        if gnorm <= opts.grad_tol {
            return LbfgsResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                status: LbfgsStatus::Converged,
            };
        }

        let mut attempt_steepest = history.is_empty();
        loop {
            // two-loop recursion
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
            if !attempt_steepest {
                for (k, (s, y, rho)) in history.iter().enumerate().rev() {
                    alpha[k] = rho * dot(s, &d);
                    d.iter_mut()
                        .zip(y)
                        .for_each(|(di, yi)| *di -= alpha[k] * yi);
                }
                let (s, y, _) = history.back().expect("non-empty history");
                let gamma = dot(s, y) / dot(y, y);
                d.iter_mut().for_each(|di| *di *= gamma);
                for (k, (s, y, rho)) in history.iter().enumerate() {
                    let beta = rho * dot(y, &d);
                    d.iter_mut()
                        .zip(s)
                        .for_each(|(di, si)| *di += (alpha[k] - beta) * si);
                }
            }
            let mut slope = dot(&g, &d);
            // NaN slopes also restart from steepest descent.
            if !(slope < 0.0) {
                history.clear();
                attempt_steepest = true;
                d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
                slope = dot(&g, &d);
            }
            let mut step = if attempt_steepest && history.is_empty() {
                (1.0 / sup_norm(&g)).min(1.0)
            } else {
                1.0
            };

            let mut accepted = false;
            for _ in 0..opts.max_backtracks {
                for i in 0..dim {
                    x_new[i] = x[i] + step * d[i];
                }
                let f_new = f(&x_new, &mut g_new);
                if f_new.is_finite() && f_new <= fx + opts.c1 * step * slope {
                    let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                        if history.len() == opts.memory {
                            history.pop_front();
                        }
                        history.push_back((s, y, 1.0 / sy));
                    }
                    x.copy_from_slice(&x_new);
                    g.copy_from_slice(&g_new);
                    fx = f_new;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if accepted {
                break;
            }
            if attempt_steepest {
                return LbfgsResult {
                    grad_norm: sup_norm(&g),
                    x,
                    value: fx,
                    iterations: iter,
                    status: LbfgsStatus::LineSearchFailed,
                };
            }
            history.clear();
            attempt_steepest = true;
        }
    }
    LbfgsResult {
        grad_norm: sup_norm(&g),
        x,
        value: fx,
        iterations: opts.max_iter,
        status: LbfgsStatus::MaxIterations,
    }
}
