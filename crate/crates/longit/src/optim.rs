//! Unconstrained minimizers driven by finite-difference derivatives: a
//! BFGS quasi-Newton method and a damped Newton-Raphson, both with Armijo
//! backtracking.

use ndarray::{Array1, Array2};

use crate::linalg;

#[derive(Debug, Clone)]
pub(crate) struct OptimOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the FD gradient.
    pub grad_tol: f64,
    /// Relative central-difference step for gradients.
    pub fd_base: f64,
    /// Relative step for second differences.
    pub fd_base2: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            fd_base: 3e-5,
            fd_base2: 2e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct OptimOutcome {
    pub x: Array1<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn fd_gradient<F: Fn(&Array1<f64>) -> f64>(
    f: &F,
    x: &Array1<f64>,
    base: f64,
) -> Array1<f64> {
    let p = x.len();
    let mut g = Array1::<f64>::zeros(p);
    for j in 0..p {
        let h = base * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        g[j] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

pub(crate) fn fd_hessian<F: Fn(&Array1<f64>) -> f64>(
    f: &F,
    x: &Array1<f64>,
    base: f64,
) -> Array2<f64> {
    let p = x.len();
    let f0 = f(x);
    let h: Vec<f64> = (0..p).map(|j| base * (1.0 + x[j].abs())).collect();
    let mut hess = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h[j];
        xm[j] -= h[j];
        hess[[j, j]] = (f(&xp) - 2.0 * f0 + f(&xm)) / (h[j] * h[j]);
    }
    for a in 0..p {
        for b in (a + 1)..p {
            let mut xpp = x.clone();
            let mut xpm = x.clone();
            let mut xmp = x.clone();
            let mut xmm = x.clone();
            xpp[a] += h[a];
            xpp[b] += h[b];
            xpm[a] += h[a];
            xpm[b] -= h[b];
            xmp[a] -= h[a];
            xmp[b] += h[b];
            xmm[a] -= h[a];
            xmm[b] -= h[b];
            let v = (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * h[a] * h[b]);
            hess[[a, b]] = v;
            hess[[b, a]] = v;
        }
    }
    hess
}

fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

/// Armijo backtracking along `dir`; returns (step, x_new, f_new) or None
/// when no acceptable step exists.
fn line_search<F: Fn(&Array1<f64>) -> f64>(
    f: &F,
    x: &Array1<f64>,
    fx: f64,
    dir: &Array1<f64>,
    slope: f64,
) -> Option<(f64, Array1<f64>, f64)> {
    // The absolute slack keeps progress possible once the Armijo decrease
    // falls below the roundoff of the objective itself.
    let noise = 4.0 * f64::EPSILON * fx.abs();
    let mut step = 1.0;
    for _ in 0..60 {
        let cand = x + &(dir * step);
        let fc = f(&cand);
        if fc.is_finite() && fc <= fx + 1e-4 * step * slope + noise {
            return Some((step, cand, fc));
        }
        step *= 0.5;
        if step < 1e-18 {
            break;
        }
    }
    None
}

pub(crate) fn minimize_bfgs<F: Fn(&Array1<f64>) -> f64>(
    f: &F,
    x0: Array1<f64>,
    opts: &OptimOptions,
) -> OptimOutcome {
    let p = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut g = fd_gradient(f, &x, opts.fd_base);
    let mut h = Array2::<f64>::eye(p);
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        if inf_norm(&g) < opts.grad_tol {
            break;
        }
        let mut dir = -h.dot(&g);
        let mut slope = dir.dot(&g);
        if !(slope < 0.0) {
            h = Array2::eye(p);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let Some((_, x_new, f_new)) = line_search(f, &x, fx, &dir, slope) else {
            break;
        };
        let g_new = fd_gradient(f, &x_new, opts.fd_base);
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.dot(&s).sqrt() * yv.dot(&yv).sqrt() {
            // H <- (I - s y'/sy) H (I - y s'/sy) + s s'/sy
            let rho = 1.0 / sy;
            let hy = h.dot(&yv);
            let yhy = yv.dot(&hy);
            for a in 0..p {
                for b in 0..p {
                    h[[a, b]] += rho * rho * yhy * s[a] * s[b] + rho * s[a] * s[b]
                        - rho * (s[a] * hy[b] + hy[a] * s[b]);
                }
            }
        }
        let f_change = (fx - f_new).abs();
        x = x_new;
        fx = f_new;
        g = g_new;
        if f_change < 1e-14 * (1.0 + fx.abs()) && inf_norm(&g) < 10.0 * opts.grad_tol {
            break;
        }
    }
    let grad_norm = inf_norm(&g);
    if grad_norm >= opts.grad_tol && grad_norm < 1e-2 {
        // BFGS with finite-difference gradients can stall in nearly flat
        // directions; a few damped Newton steps sharpen the solution.
        let polish_opts = OptimOptions {
            max_iter: 15,
            ..opts.clone()
        };
        let polished = minimize_newton(f, x.clone(), &polish_opts);
        if polished.f <= fx + 4.0 * f64::EPSILON * fx.abs() {
            return OptimOutcome {
                iterations: iterations + polished.iterations,
                ..polished
            };
        }
    }
    OptimOutcome {
        converged: grad_norm < opts.grad_tol,
        x,
        f: fx,
        grad_norm,
        iterations,
    }
}

pub(crate) fn minimize_newton<F: Fn(&Array1<f64>) -> f64>(
    f: &F,
    x0: Array1<f64>,
    opts: &OptimOptions,
) -> OptimOutcome {
    let p = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut g = fd_gradient(f, &x, opts.fd_base);
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        if inf_norm(&g) < opts.grad_tol {
            break;
        }
        let hess = fd_hessian(f, &x, opts.fd_base2);
        // Levenberg-style damping until the step is a descent direction.
        let mut lambda = 0.0f64;
        let scale = (0..p).map(|j| hess[[j, j]].abs()).fold(1e-8, f64::max);
        let mut dir: Option<Array1<f64>> = None;
        for _ in 0..40 {
            let mut hd = hess.clone();
            for j in 0..p {
                hd[[j, j]] += lambda;
            }
            if let Some(l) = linalg::cholesky(hd.view()) {
                let d = -linalg::chol_solve_vec(&l, g.view());
                if d.dot(&g) < 0.0 {
                    dir = Some(d);
                    break;
                }
            }
            lambda = if lambda == 0.0 { 1e-6 * scale } else { 10.0 * lambda };
        }
        let Some(dir) = dir else { break };
        let slope = dir.dot(&g);
        let Some((_, x_new, f_new)) = line_search(f, &x, fx, &dir, slope) else {
            break;
        };
        let f_change = (fx - f_new).abs();
        x = x_new;
        fx = f_new;
        g = fd_gradient(f, &x, opts.fd_base);
        if f_change < 1e-14 * (1.0 + fx.abs()) && inf_norm(&g) < 10.0 * opts.grad_tol {
            break;
        }
    }
    let grad_norm = inf_norm(&g);
    OptimOutcome {
        converged: grad_norm < opts.grad_tol,
        x,
        f: fx,
        grad_norm,
        iterations,
    }
}
