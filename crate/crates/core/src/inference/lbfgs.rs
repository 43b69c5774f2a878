//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsSettings {
    pub max_iters: usize,
    /// Stop when the largest gradient component falls below this.
    pub gradient_tol: f64,
    pub history: usize,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    /// Objective value at `x` (the maximized quantity).
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The line search could not find an ascent step.
    pub line_search_failed: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

/// Maximizes `f`. The closure returns the objective and writes its gradient
/// into the second argument. The returned point is never worse than `x0`.
pub fn maximize<F>(mut f: F, x0: Vec<f64>, settings: &LbfgsSettings) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    // internally minimize -f
    let mut fx = -f(&x, &mut g);
    g.iter_mut().for_each(|v| *v = -*v);

    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(settings.history);
    let mut dir = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha_buf = vec![0.0; settings.history];

    let mut iterations = 0;
    let mut converged = max_abs(&g) <= settings.gradient_tol;
    let mut line_search_failed = false;

    while !converged && iterations < settings.max_iters {
        // two-loop recursion
        dir.copy_from_slice(&g);
        for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha_buf[k] = a;
            axpy(-a, y, &mut dir);
        }
        let gamma = hist
            .back()
            .map_or(1.0 / max_abs(&g).max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        dir.iter_mut().for_each(|d| *d *= gamma);
        for (k, (s, y, rho)) in hist.iter().enumerate() {
            let b = rho * dot(y, &dir);
            axpy(alpha_buf[k] - b, s, &mut dir);
        }
        dir.iter_mut().for_each(|d| *d = -*d);

        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // not a descent direction; restart from steepest descent
            hist.clear();
            let scale = 1.0 / max_abs(&g).max(1.0);
            for (d, gi) in dir.iter_mut().zip(&g) {
                *d = -gi * scale;
            }
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = false;
        let mut f_new = f64::INFINITY;
        for _ in 0..MAX_BACKTRACKS {
            for ((xn, xi), di) in x_new.iter_mut().zip(&x).zip(&dir) {
                *xn = xi + step * di;
            }
            f_new = -f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + ARMIJO_C1 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            line_search_failed = true;
            break;
        }
        g_new.iter_mut().for_each(|v| *v = -*v);
        iterations += 1;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if hist.len() == settings.history {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }

        let decrease = fx - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        converged = max_abs(&g) <= settings.gradient_tol;
        if !converged && decrease <= 1e-15 * fx.abs().max(1.0) {
            // stalled at machine precision
            converged = true;
        }
    }

    LbfgsOutcome {
        x,
        value: -fx,
        iterations,
        converged,
        line_search_failed,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
