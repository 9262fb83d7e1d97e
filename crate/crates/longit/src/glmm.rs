//! Random-intercept logistic mixed model.
//!
//! The marginal likelihood integrates each subject's conditional Bernoulli
//! product over a normal random intercept. The integral is approximated by
//! Gauss-Hermite quadrature, either nonadaptive (nodes centered at zero and
//! scaled by the current sigma) or adaptive (nodes recentered at each
//! subject's integrand mode and rescaled by its curvature). Maximization is
//! by a quasi-Newton (BFGS) or damped Newton-Raphson optimizer over
//! (beta, log sigma), with finite-difference derivatives of the quadrature
//! log-likelihood.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::dataset::LongDataset;
use crate::design::{build_design, DesignInfo, Formula};
use crate::error::{Error, Result};
use crate::glm::{bernoulli_variance, expit};
use crate::linalg;
use crate::optim::{self, OptimOptions};

/// Physicists' Gauss-Hermite rule (weight e^{-x^2}) with Q nodes.
///
/// Nodes are symmetric about zero and the weights sum to sqrt(pi).
pub fn gauss_hermite(q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if q == 0 || q > 100 {
        return Err(Error::Invalid(format!(
            "quadrature point count {q} outside 1..=100"
        )));
    }
    let pim4 = 1.0 / PI.powf(0.25);
    let mut nodes = vec![0.0f64; q];
    let mut weights = vec![0.0f64; q];
    let m = (q + 1) / 2;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * q as f64 + 1.0).sqrt() - 1.85575 * (2.0 * q as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (q as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..q {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * q as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[q - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[q - 1 - i] = weights[i];
    }
    nodes.reverse(); // ascending
    weights.reverse();
    Ok((nodes, weights))
}

/// Memoized rule: the fitters evaluate the same rule millions of times.
fn cached_gauss_hermite(q: usize) -> Result<std::sync::Arc<(Vec<f64>, Vec<f64>)>> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    if let Some(rule) = guard.get(&q) {
        return Ok(rule.clone());
    }
    let rule = Arc::new(gauss_hermite(q)?);
    guard.insert(q, rule.clone());
    Ok(rule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureMode {
    Nonadaptive,
    Adaptive,
}

impl QuadratureMode {
    pub fn name(&self) -> &'static str {
        match self {
            QuadratureMode::Nonadaptive => "nonadaptive",
            QuadratureMode::Adaptive => "adaptive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureSpec {
    pub mode: QuadratureMode,
    pub q: usize,
}

impl QuadratureSpec {
    pub fn adaptive(q: usize) -> Self {
        Self {
            mode: QuadratureMode::Adaptive,
            q,
        }
    }

    pub fn nonadaptive(q: usize) -> Self {
        Self {
            mode: QuadratureMode::Nonadaptive,
            q,
        }
    }

    /// Default point counts: adaptive quadrature stabilizes well before 50
    /// points, nonadaptive needs more.
    pub fn default_for(mode: QuadratureMode) -> Self {
        match mode {
            QuadratureMode::Adaptive => Self::adaptive(20),
            QuadratureMode::Nonadaptive => Self::nonadaptive(50),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    QuasiNewton,
    NewtonRaphson,
}

impl Optimizer {
    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::QuasiNewton => "quasi-newton",
            Optimizer::NewtonRaphson => "newton-raphson",
        }
    }
}

/// Starting values for the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum StartValues {
    /// Every fixed effect at 0.5 and sigma at 0.5.
    AllHalf,
    /// Fixed effects at zero; sigma still starts at 0.5.
    Zero,
    Custom { beta: Vec<f64>, sigma: f64 },
}

/// Specification of a random-intercept logistic fit.
#[derive(Debug, Clone)]
pub struct GlmmSpec {
    pub formula: Formula,
    pub quadrature: QuadratureSpec,
    pub optimizer: Optimizer,
    pub start: StartValues,
    /// Fix sigma instead of estimating it (0 gives the plain logistic fit).
    pub fixed_sigma: Option<f64>,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl GlmmSpec {
    pub fn new(formula: Formula) -> Self {
        Self {
            formula,
            quadrature: QuadratureSpec::default_for(QuadratureMode::Adaptive),
            optimizer: Optimizer::QuasiNewton,
            start: StartValues::AllHalf,
            fixed_sigma: None,
            max_iter: 500,
            grad_tol: 1e-6,
        }
    }
}

/// log(1 + e^x) without overflow.
fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Conditional Bernoulli log-likelihood of one subject at intercept b,
/// with first and second derivatives in b.
fn conditional(x: ArrayView2<f64>, y: ArrayView1<f64>, beta: ArrayView1<f64>, b: f64) -> (f64, f64, f64) {
    let eta0 = x.dot(&beta);
    let mut ll = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for i in 0..y.len() {
        let eta = eta0[i] + b;
        let mu = expit(eta);
        ll += y[i] * eta - log1pexp(eta);
        d1 += y[i] - mu;
        d2 -= bernoulli_variance(mu);
    }
    (ll, d1, d2)
}

/// Newton search for the mode of ll(b) = conditional(b) - b^2 / (2 sigma^2).
/// The objective is strictly concave, so this converges quickly.
fn integrand_mode<F: Fn(f64) -> (f64, f64, f64)>(cond: F, sigma: f64) -> Result<(f64, f64)> {
    let inv_var = 1.0 / (sigma * sigma);
    let mut b = 0.0f64;
    for _ in 0..50 {
        let (_, d1, d2) = cond(b);
        let g = d1 - b * inv_var;
        let h = d2 - inv_var;
        let step = -g / h;
        let step = step.clamp(-10.0, 10.0);
        b += step;
        if step.abs() < 1e-10 * (1.0 + b.abs()) {
            let (_, _, d2) = cond(b);
            return Ok((b, d2 - inv_var));
        }
    }
    Err(Error::NonConvergence {
        what: "adaptive quadrature mode search".into(),
        iterations: 50,
    })
}

/// Gauss-Hermite approximation of log Integral exp(logf(b)) phi(b; 0, sigma^2) db,
/// where logf and its b-derivatives come from `cond`.
fn gh_log_integral<F: Fn(f64) -> (f64, f64, f64)>(
    cond: F,
    sigma: f64,
    quadrature: &QuadratureSpec,
) -> Result<f64> {
    if sigma == 0.0 {
        return Ok(cond(0.0).0);
    }
    let rule = cached_gauss_hermite(quadrature.q)?;
    let (nodes, weights) = (&rule.0, &rule.1);
    match quadrature.mode {
        QuadratureMode::Nonadaptive => {
            // Substituting b = sqrt(2) sigma t absorbs the normal kernel:
            // the quadrature points stay centered at zero.
            let terms: Vec<f64> = nodes
                .iter()
                .zip(weights)
                .map(|(&t, &w)| w.ln() + cond(2.0f64.sqrt() * sigma * t).0)
                .collect();
            Ok(linalg::log_sum_exp(&terms) - 0.5 * PI.ln())
        }
        QuadratureMode::Adaptive => {
            let inv_2var = 0.5 / (sigma * sigma);
            let (mode, curvature) = integrand_mode(&cond, sigma)?;
            let scale = (-1.0 / curvature).sqrt();
            let log_phi_const = -0.5 * (2.0 * PI).ln() - sigma.ln();
            let terms: Vec<f64> = nodes
                .iter()
                .zip(weights)
                .map(|(&t, &w)| {
                    let b = mode + 2.0f64.sqrt() * scale * t;
                    w.ln() + t * t + cond(b).0 - b * b * inv_2var
                })
                .collect();
            Ok((2.0f64.sqrt() * scale).ln() + linalg::log_sum_exp(&terms) + log_phi_const)
        }
    }
}

/// Marginal log-likelihood contribution of one subject: the log of the
/// quadrature approximation to the integral of its conditional Bernoulli
/// product against the normal random-intercept density. Subjects with no
/// observed occasions contribute zero (their integral is one).
pub fn subject_loglik(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    sigma: f64,
    quadrature: &QuadratureSpec,
) -> Result<f64> {
    if sigma < 0.0 {
        return Err(Error::Invalid("sigma must be nonnegative".into()));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    gh_log_integral(|b| conditional(x, y, beta, b), sigma, quadrature)
}

/// Population-averaged success probability for one covariate row: the
/// conditional expit averaged over the random-intercept distribution.
///
/// Uses a zero-centered 80-point rule; its node symmetry keeps the exact
/// identity marginalize_mean = 1/2 whenever the linear predictor is zero.
pub fn marginalize_mean(beta: ArrayView1<f64>, sigma: f64, x: ArrayView1<f64>) -> f64 {
    let eta0 = x.dot(&beta);
    if sigma == 0.0 {
        return expit(eta0);
    }
    let rule = cached_gauss_hermite(80).expect("fixed rule size");
    let mut acc = linalg::NeumaierSum::default();
    for (&t, &w) in rule.0.iter().zip(&rule.1) {
        acc.add(w * expit(eta0 + 2.0f64.sqrt() * sigma * t));
    }
    (acc.value() / PI.sqrt()).clamp(f64::MIN_POSITIVE, 1.0 - 1e-16)
}

/// Ratio of random-effects to marginal coefficients implied by a logistic
/// random-intercept model: sqrt(c^2 sigma^2 + 1) with c = 16 sqrt(3)/(15 pi).
pub fn attenuation_ratio(sigma: f64) -> f64 {
    let c = 16.0 * 3.0f64.sqrt() / (15.0 * PI);
    (c * c * sigma * sigma + 1.0).sqrt()
}

/// Per-fit diagnostics.
#[derive(Debug, Clone)]
pub struct GlmmDiagnostics {
    pub quadrature: QuadratureSpec,
    pub optimizer: Optimizer,
    pub iterations: usize,
    /// Finite-difference gradient max-norm at the reported solution.
    pub grad_norm: f64,
    pub converged: bool,
    pub hessian_pd: bool,
    /// sigma collapsed to the boundary of its parameter space.
    pub boundary_sigma: bool,
    /// Gradient converged but the Hessian is indefinite: the optimizer has
    /// only seemingly converged.
    pub seemingly_converged: bool,
}

/// A fitted random-intercept logistic model.
#[derive(Debug, Clone)]
pub struct GlmmFit {
    pub beta: Array1<f64>,
    pub sigma: f64,
    pub sigma_se: Option<f64>,
    pub sigma2: f64,
    pub sigma2_se: Option<f64>,
    pub loglik: f64,
    /// Observed-information covariance over (beta, log sigma); None when
    /// the Hessian is not positive definite.
    pub covariance: Option<Array2<f64>>,
    pub columns: Vec<String>,
    pub info: DesignInfo,
    pub diagnostics: GlmmDiagnostics,
}

impl GlmmFit {
    /// Standard errors of the fixed effects.
    pub fn standard_errors(&self) -> Option<Array1<f64>> {
        self.covariance.as_ref().map(|c| {
            Array1::from_iter((0..self.beta.len()).map(|j| c[[j, j]].sqrt()))
        })
    }
}

struct SubjectData {
    x: Array2<f64>,
    y: Array1<f64>,
}

fn negative_loglik(
    subjects: &[SubjectData],
    beta: ArrayView1<f64>,
    sigma: f64,
    quadrature: &QuadratureSpec,
) -> f64 {
    let terms: Vec<f64> = subjects
        .par_iter()
        .map(|s| {
            subject_loglik(s.x.view(), s.y.view(), beta, sigma, quadrature)
                .unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    if terms.iter().any(|t| !t.is_finite()) {
        return f64::INFINITY;
    }
    -linalg::neumaier_total(&terms)
}

/// Maximize the marginal likelihood of a random-intercept logistic model.
///
/// sigma is estimated on the log scale to stay positive and reported with
/// delta-method standard errors for both sigma and sigma^2.
pub fn fit_glmm(dataset: &LongDataset, spec: &GlmmSpec) -> Result<GlmmFit> {
    let frame = build_design(dataset, &spec.formula)?;
    let p = frame.n_columns();
    let subjects: Vec<SubjectData> = frame
        .subjects
        .iter()
        .filter(|s| !s.y.is_empty())
        .map(|s| SubjectData {
            x: s.x.clone(),
            y: s.y.clone(),
        })
        .collect();
    if subjects.is_empty() {
        return Err(Error::Invalid("no observed outcomes".into()));
    }
    let quadrature = spec.quadrature;

    let (start_beta, start_sigma) = match &spec.start {
        StartValues::AllHalf => (Array1::from_elem(p, 0.5), 0.5),
        StartValues::Zero => (Array1::zeros(p), 0.5),
        StartValues::Custom { beta, sigma } => {
            if beta.len() != p {
                return Err(Error::Invalid(format!(
                    "custom start has {} fixed effects, design has {p}",
                    beta.len()
                )));
            }
            (Array1::from_vec(beta.clone()), *sigma)
        }
    };

    let estimate_sigma = spec.fixed_sigma.is_none();
    let dim = if estimate_sigma { p + 1 } else { p };
    let fixed_sigma = spec.fixed_sigma.unwrap_or(0.0);
    if !estimate_sigma && fixed_sigma < 0.0 {
        return Err(Error::Invalid("fixed sigma must be nonnegative".into()));
    }

    let objective = |theta: &Array1<f64>| -> f64 {
        let beta = theta.slice(ndarray::s![0..p]);
        let sigma = if estimate_sigma {
            theta[p].exp()
        } else {
            fixed_sigma
        };
        negative_loglik(&subjects, beta, sigma, &quadrature)
    };

    let mut x0 = Array1::<f64>::zeros(dim);
    x0.slice_mut(ndarray::s![0..p]).assign(&start_beta);
    if estimate_sigma {
        x0[p] = start_sigma.max(1e-4).ln();
    }

    let opts = OptimOptions {
        max_iter: spec.max_iter,
        grad_tol: spec.grad_tol,
        ..OptimOptions::default()
    };
    let outcome = match spec.optimizer {
        Optimizer::QuasiNewton => optim::minimize_bfgs(&objective, x0, &opts),
        Optimizer::NewtonRaphson => optim::minimize_newton(&objective, x0, &opts),
    };
    if !outcome.f.is_finite() {
        return Err(Error::NonConvergence {
            what: "GLMM likelihood".into(),
            iterations: outcome.iterations,
        });
    }
    let sigma = if estimate_sigma {
        outcome.x[p].exp()
    } else {
        fixed_sigma
    };
    // In the flat region near sigma = 0 the log-scale gradient vanishes,
    // so anything this small is a boundary solution.
    let boundary_sigma = estimate_sigma && sigma < 5e-2;
    // Near the sigma boundary the log-sigma gradient flattens by
    // construction; convergence there is a boundary solution, not failure.
    if !outcome.converged && !boundary_sigma {
        return Err(Error::NonConvergence {
            what: "GLMM optimizer".into(),
            iterations: outcome.iterations,
        });
    }

    let hess = optim::fd_hessian(&objective, &outcome.x, 2e-4);
    let eigen = linalg::sym_eigenvalues(hess.view());
    let max_eig = eigen.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
    let hessian_pd = eigen.iter().all(|&e| e > 1e-10 * max_eig.max(1e-300));
    let covariance = if hessian_pd {
        linalg::spd_inverse(hess.view(), "GLMM observed information").ok()
    } else {
        None
    };
    let (sigma_se, sigma2_se) = match (&covariance, estimate_sigma) {
        (Some(c), true) => {
            let t_se = c[[p, p]].sqrt();
            (Some(sigma * t_se), Some(2.0 * sigma * sigma * t_se))
        }
        _ => (None, None),
    };

    let beta = outcome.x.slice(ndarray::s![0..p]).to_owned();
    Ok(GlmmFit {
        beta,
        sigma,
        sigma_se,
        sigma2: sigma * sigma,
        sigma2_se,
        loglik: -outcome.f,
        covariance,
        columns: frame.info.column_names(),
        info: frame.info.clone(),
        diagnostics: GlmmDiagnostics {
            quadrature,
            optimizer: spec.optimizer,
            iterations: outcome.iterations,
            grad_norm: outcome.grad_norm,
            converged: outcome.converged || boundary_sigma,
            hessian_pd,
            boundary_sigma,
            seemingly_converged: outcome.converged && !hessian_pd,
        },
    })
}

/// One cell of a quadrature sensitivity scan.
#[derive(Debug, Clone)]
pub struct ScanRow {
    pub mode: QuadratureMode,
    pub optimizer: Optimizer,
    pub q: usize,
    pub outcome: std::result::Result<ScanFit, String>,
}

#[derive(Debug, Clone)]
pub struct ScanFit {
    pub loglik: f64,
    /// (parameter name, estimate) pairs: the fixed effects then "sigma".
    pub estimates: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct StabilityFlag {
    pub mode: QuadratureMode,
    pub optimizer: Optimizer,
    pub param: String,
    pub q_max: usize,
    pub q_ref: usize,
    pub delta: f64,
    pub stable: bool,
}

/// Scan table produced by [`quadrature_scan`].
#[derive(Debug, Clone)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
}

impl ScanTable {
    pub fn estimate(&self, mode: QuadratureMode, optimizer: Optimizer, q: usize, param: &str) -> Option<f64> {
        self.rows.iter().find_map(|r| {
            if r.mode == mode && r.optimizer == optimizer && r.q == q {
                r.outcome.as_ref().ok().and_then(|f| {
                    f.estimates
                        .iter()
                        .find(|(name, _)| name == param)
                        .map(|(_, v)| *v)
                })
            } else {
                None
            }
        })
    }

    /// Stability of each parameter per (mode, optimizer): the estimate at
    /// the largest Q against the Q closest to half of it, flagged stable
    /// when the difference is below 1e-3.
    pub fn stability_flags(&self) -> Vec<StabilityFlag> {
        let mut combos: Vec<(QuadratureMode, Optimizer)> = Vec::new();
        for r in &self.rows {
            if !combos.contains(&(r.mode, r.optimizer)) {
                combos.push((r.mode, r.optimizer));
            }
        }
        let mut flags = Vec::new();
        for (mode, optimizer) in combos {
            let qs: Vec<usize> = self
                .rows
                .iter()
                .filter(|r| r.mode == mode && r.optimizer == optimizer && r.outcome.is_ok())
                .map(|r| r.q)
                .collect();
            let Some(&q_max) = qs.iter().max() else { continue };
            let target = q_max as f64 / 2.0;
            let Some(&q_ref) = qs
                .iter()
                .filter(|&&q| q != q_max)
                .min_by(|&&a, &&b| {
                    (a as f64 - target)
                        .abs()
                        .partial_cmp(&(b as f64 - target).abs())
                        .unwrap()
                })
            else {
                continue;
            };
            let params: Vec<String> = self
                .rows
                .iter()
                .find(|r| r.mode == mode && r.optimizer == optimizer && r.q == q_max)
                .and_then(|r| r.outcome.as_ref().ok())
                .map(|f| f.estimates.iter().map(|(n, _)| n.clone()).collect())
                .unwrap_or_default();
            for param in params {
                let a = self.estimate(mode, optimizer, q_max, &param);
                let b = self.estimate(mode, optimizer, q_ref, &param);
                if let (Some(a), Some(b)) = (a, b) {
                    flags.push(StabilityFlag {
                        mode,
                        optimizer,
                        param,
                        q_max,
                        q_ref,
                        delta: (a - b).abs(),
                        stable: (a - b).abs() < 1e-3,
                    });
                }
            }
        }
        flags
    }

    /// Plot-ready CSV: mode,optimizer,Q,param,estimate,loglik,status.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,optimizer,Q,param,estimate,loglik,status\n");
        for r in &self.rows {
            match &r.outcome {
                Ok(fit) => {
                    for (name, value) in &fit.estimates {
                        out.push_str(&format!(
                            "{},{},{},{},{:.10e},{:.10e},ok\n",
                            r.mode.name(),
                            r.optimizer.name(),
                            r.q,
                            name,
                            value,
                            fit.loglik
                        ));
                    }
                }
                Err(msg) => {
                    out.push_str(&format!(
                        "{},{},{},,,,error: {}\n",
                        r.mode.name(),
                        r.optimizer.name(),
                        r.q,
                        msg.replace(',', ";")
                    ));
                }
            }
        }
        out
    }
}

/// Refit the model across quadrature modes, optimizers and point counts.
/// Individual failures are recorded and the scan continues.
pub fn quadrature_scan(
    dataset: &LongDataset,
    spec: &GlmmSpec,
    qs: &[usize],
    modes: &[QuadratureMode],
    optimizers: &[Optimizer],
) -> Result<ScanTable> {
    if qs.is_empty() || modes.is_empty() || optimizers.is_empty() {
        return Err(Error::Invalid("empty scan axis".into()));
    }
    let mut cells = Vec::new();
    for &mode in modes {
        for &optimizer in optimizers {
            for &q in qs {
                cells.push((mode, optimizer, q));
            }
        }
    }
    let rows: Vec<ScanRow> = cells
        .par_iter()
        .map(|&(mode, optimizer, q)| {
            let cell_spec = GlmmSpec {
                quadrature: QuadratureSpec { mode, q },
                optimizer,
                ..spec.clone()
            };
            let outcome = fit_glmm(dataset, &cell_spec)
                .map(|fit| {
                    let mut estimates: Vec<(String, f64)> = fit
                        .columns
                        .iter()
                        .cloned()
                        .zip(fit.beta.iter().cloned())
                        .collect();
                    estimates.push(("sigma".into(), fit.sigma));
                    ScanFit {
                        loglik: fit.loglik,
                        estimates,
                    }
                })
                .map_err(|e| e.to_string());
            ScanRow {
                mode,
                optimizer,
                q,
                outcome,
            }
        })
        .collect();
    Ok(ScanTable { rows })
}
