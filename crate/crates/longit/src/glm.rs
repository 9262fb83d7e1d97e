//! Logistic-regression core: link functions, the Bernoulli variance, and a
//! weighted IRLS fitter. This is the initializer for the estimating-equation
//! loops, the engine behind the dropout model, and the single-time-point
//! workhorse.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg;

/// Divergence bound on the logit scale beyond which a coefficient is
/// declared separated rather than merely slow to converge.
pub const SEPARATION_BOUND: f64 = 30.0;

/// Inverse logit, saturating at the extremes instead of overflowing.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Logit link, mu -> log(mu / (1 - mu)).
pub fn logit(mu: f64) -> f64 {
    (mu / (1.0 - mu)).ln()
}

/// Bernoulli mean-variance relationship v(mu) = mu (1 - mu).
pub fn bernoulli_variance(mu: f64) -> f64 {
    mu * (1.0 - mu)
}

/// Result of a logistic-regression fit.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub beta: Array1<f64>,
    /// Inverse of the weighted Fisher information at the estimate.
    pub covariance: Array2<f64>,
    pub deviance: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub columns: Vec<String>,
}

impl GlmFit {
    pub fn standard_errors(&self) -> Array1<f64> {
        Array1::from_iter((0..self.beta.len()).map(|j| self.covariance[[j, j]].sqrt()))
    }
}

/// Weighted Bernoulli log-likelihood at the given linear predictors.
fn weighted_loglik(eta: &Array1<f64>, y: ArrayView1<f64>, w: ArrayView1<f64>) -> f64 {
    let mut terms = Vec::with_capacity(eta.len());
    for i in 0..eta.len() {
        // y*eta - log(1 + exp(eta)), written to avoid overflow.
        let e = eta[i];
        let log1pexp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        terms.push(w[i] * (y[i] * e - log1pexp));
    }
    linalg::neumaier_total(&terms)
}

/// Score vector X' w (y - mu) of the weighted Bernoulli log-likelihood.
pub fn logistic_score(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    w: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> Array1<f64> {
    let eta = x.dot(&beta);
    let p = x.ncols();
    let mut acc = vec![linalg::NeumaierSum::default(); p];
    for i in 0..x.nrows() {
        let r = w[i] * (y[i] - expit(eta[i]));
        for j in 0..p {
            acc[j].add(x[[i, j]] * r);
        }
    }
    Array1::from_iter(acc.iter().map(|a| a.value()))
}

const MAX_IRLS_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-8;
const BETA_TOL: f64 = 1e-10;

/// Fit a logistic regression by iteratively reweighted least squares with
/// step-halving. `prior_weights` multiply each observation's contribution;
/// `columns` (when given) name coefficients in error messages.
///
/// Errors on rank deficiency and on separation, detected as a coefficient
/// diverging past [`SEPARATION_BOUND`] on the logit scale.
pub fn fit_logistic(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    prior_weights: ArrayView1<f64>,
    columns: Option<&[String]>,
) -> Result<GlmFit> {
    let (m, p) = (x.nrows(), x.ncols());
    if y.len() != m || prior_weights.len() != m {
        return Err(Error::Invalid("dimension mismatch in fit_logistic".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid("responses must be 0 or 1".into()));
    }
    if prior_weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Invalid("prior weights must be nonnegative".into()));
    }
    let col_name = |j: usize| {
        columns
            .and_then(|c| c.get(j).cloned())
            .unwrap_or_else(|| format!("column {j}"))
    };

    let mut beta = Array1::<f64>::zeros(p);
    let mut loglik = weighted_loglik(&x.dot(&beta), y, prior_weights);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=MAX_IRLS_ITER {
        iterations = iter;
        let eta = x.dot(&beta);
        let mu: Array1<f64> = eta.mapv(expit);

        // Fisher information X' W X with W = w * mu * (1 - mu).
        let mut info = Array2::<f64>::zeros((p, p));
        let mut score = vec![linalg::NeumaierSum::default(); p];
        for i in 0..m {
            let wi = prior_weights[i] * bernoulli_variance(mu[i]);
            let ri = prior_weights[i] * (y[i] - mu[i]);
            for a in 0..p {
                score[a].add(x[[i, a]] * ri);
                for b in 0..=a {
                    info[[a, b]] += wi * x[[i, a]] * x[[i, b]];
                }
            }
        }
        for a in 0..p {
            for b in (a + 1)..p {
                info[[a, b]] = info[[b, a]];
            }
        }
        let score = Array1::from_iter(score.iter().map(|s| s.value()));

        let mut fail = 0usize;
        let l = linalg::cholesky_with_tol(info.view(), 1e-12, &mut fail)
            .ok_or_else(|| Error::Collinear(col_name(fail)))?;
        let delta = linalg::chol_solve_vec(&l, score.view());

        // Step-halving on likelihood decrease.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + &(&delta * step);
            let cand_ll = weighted_loglik(&x.dot(&candidate), y, prior_weights);
            if cand_ll >= loglik - 1e-12 {
                let rel_change = delta
                    .iter()
                    .enumerate()
                    .map(|(j, d)| (d * step).abs() / (1.0 + beta[j].abs()))
                    .fold(0.0f64, f64::max);
                beta = candidate;
                loglik = cand_ll;
                accepted = true;
                if let Some(j) = (0..p).find(|&j| beta[j].abs() > SEPARATION_BOUND) {
                    return Err(Error::Separation {
                        column: col_name(j),
                        bound: SEPARATION_BOUND,
                    });
                }
                let score_now = logistic_score(x, y, prior_weights, beta.view());
                let score_norm = score_now.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
                if score_norm < SCORE_TOL && rel_change < BETA_TOL {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if converged {
            break;
        }
    }
    if !converged {
        // One more tolerance pass: a zero step at the optimum is fine.
        let score = logistic_score(x, y, prior_weights, beta.view());
        let norm = score.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
        if norm < SCORE_TOL {
            converged = true;
        } else {
            return Err(Error::NonConvergence {
                what: "IRLS".into(),
                iterations,
            });
        }
    }

    let eta = x.dot(&beta);
    let mu: Array1<f64> = eta.mapv(expit);
    let mut info = Array2::<f64>::zeros((p, p));
    for i in 0..m {
        let wi = prior_weights[i] * bernoulli_variance(mu[i]);
        for a in 0..p {
            for b in 0..p {
                info[[a, b]] += wi * x[[i, a]] * x[[i, b]];
            }
        }
    }
    let covariance = linalg::spd_inverse(info.view(), "Fisher information")?;
    Ok(GlmFit {
        beta,
        covariance,
        deviance: -2.0 * loglik,
        loglik,
        iterations,
        converged,
        columns: columns
            .map(|c| c.to_vec())
            .unwrap_or_else(|| (0..p).map(|j| format!("column {j}")).collect()),
    })
}
