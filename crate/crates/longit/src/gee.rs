//! Generalized estimating equations for marginal logistic models.
//!
//! The fitter follows the classic iterative scheme: initial coefficients
//! from an independence GLM, then alternating moment estimation of the
//! working-correlation parameters and Fisher-scoring updates of the
//! regression coefficients until both stabilize. Missing occasions are
//! handled available-case style: each subject contributes only the rows and
//! correlation entries of its observed occasions.
//!
//! Both the model-based covariance (the inverse bread) and the empirically
//! corrected sandwich are reported; the sandwich stays valid when the
//! working correlation is misspecified.

use ndarray::{Array1, Array2, ArrayView1};

use crate::design::{build_design, DesignInfo, Formula, ModelFrame};
use crate::error::{Error, Result};
use crate::glm::{bernoulli_variance, expit, fit_logistic};
use crate::linalg::{self, ScoreAccumulator};
use crate::dataset::LongDataset;
use crate::wgee::{WeightMode, WeightSet};

/// Working-correlation structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationStructure {
    Independence,
    Exchangeable,
    Ar1,
    Unstructured,
}

impl CorrelationStructure {
    pub fn name(&self) -> &'static str {
        match self {
            CorrelationStructure::Independence => "independence",
            CorrelationStructure::Exchangeable => "exchangeable",
            CorrelationStructure::Ar1 => "ar1",
            CorrelationStructure::Unstructured => "unstructured",
        }
    }

    /// Short code used in CLI flags and estimator labels.
    pub fn code(&self) -> &'static str {
        match self {
            CorrelationStructure::Independence => "ind",
            CorrelationStructure::Exchangeable => "exch",
            CorrelationStructure::Ar1 => "ar1",
            CorrelationStructure::Unstructured => "un",
        }
    }
}

/// Nuisance-parameter store for a working correlation.
#[derive(Debug, Clone, PartialEq)]
pub enum Alpha {
    /// Independence carries no parameters.
    None,
    /// Exchangeable / AR(1) scalar.
    Scalar(f64),
    /// Full symmetric matrix for the unstructured form.
    Matrix(Array2<f64>),
}

impl Alpha {
    fn max_abs_diff(&self, other: &Alpha) -> f64 {
        match (self, other) {
            (Alpha::None, Alpha::None) => 0.0,
            (Alpha::Scalar(a), Alpha::Scalar(b)) => (a - b).abs(),
            (Alpha::Matrix(a), Alpha::Matrix(b)) => a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
            _ => f64::INFINITY,
        }
    }
}

/// A correlation-structure specification together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingCorrelation {
    pub structure: CorrelationStructure,
    pub alpha: Alpha,
}

/// Pearson residuals e = (y - mu) / sqrt(mu (1 - mu)).
pub fn pearson_residuals(y: ArrayView1<f64>, mu: ArrayView1<f64>) -> Result<Array1<f64>> {
    if y.len() != mu.len() {
        return Err(Error::Invalid("length mismatch in pearson_residuals".into()));
    }
    let mut e = Array1::<f64>::zeros(y.len());
    for i in 0..y.len() {
        if !(mu[i] > 0.0 && mu[i] < 1.0) {
            return Err(Error::DegenerateProbability(mu[i]));
        }
        e[i] = (y[i] - mu[i]) / bernoulli_variance(mu[i]).sqrt();
    }
    Ok(e)
}

/// Residuals of one subject, on its observed occasions, together with the
/// multiplier its moment contributions carry (1.0 for unweighted GEE).
#[derive(Debug, Clone)]
pub struct SubjectResiduals {
    pub occasions: Vec<usize>,
    pub residuals: Vec<f64>,
    pub weight: f64,
}

/// Moment estimation of the working-correlation parameters.
///
/// Exchangeable uses the per-subject normalized double sum
/// (1/N) sum_i [1/(n_i (n_i - 1))] sum_{j != k} e_ij e_ik over subjects with
/// at least two observed occasions. AR(1) averages products of residuals at
/// design-adjacent occasion pairs. Unstructured averages each (j, k) cell
/// over the subjects observed at both; cells with no support are set to 0
/// (the count of such cells is reported through `zero_cells`).
pub fn estimate_alpha_detailed(
    subjects: &[SubjectResiduals],
    structure: CorrelationStructure,
    n_occasions: usize,
    zero_cells: &mut usize,
) -> Result<Alpha> {
    *zero_cells = 0;
    match structure {
        CorrelationStructure::Independence => Ok(Alpha::None),
        CorrelationStructure::Exchangeable => {
            let mut num = linalg::NeumaierSum::default();
            let mut den = 0.0;
            for s in subjects {
                let ni = s.residuals.len();
                if ni < 2 {
                    continue;
                }
                let sum: f64 = s.residuals.iter().sum();
                let sumsq: f64 = s.residuals.iter().map(|e| e * e).sum();
                let cross = sum * sum - sumsq; // sum over ordered pairs j != k
                num.add(s.weight * cross / (ni * (ni - 1)) as f64);
                den += s.weight;
            }
            if den == 0.0 {
                return Err(Error::Invalid(
                    "no subject with at least two observed occasions".into(),
                ));
            }
            Ok(Alpha::Scalar(num.value() / den))
        }
        CorrelationStructure::Ar1 => {
            let mut num = linalg::NeumaierSum::default();
            let mut den = 0.0;
            for s in subjects {
                for w in 0..s.occasions.len().saturating_sub(1) {
                    if s.occasions[w + 1] == s.occasions[w] + 1 {
                        num.add(s.weight * s.residuals[w] * s.residuals[w + 1]);
                        den += s.weight;
                    }
                }
            }
            if den == 0.0 {
                return Err(Error::Invalid(
                    "no adjacent observed occasion pairs for AR(1)".into(),
                ));
            }
            Ok(Alpha::Scalar(num.value() / den))
        }
        CorrelationStructure::Unstructured => {
            let n = n_occasions;
            let mut mat = Array2::<f64>::eye(n);
            for j in 0..n {
                for k in (j + 1)..n {
                    let mut num = linalg::NeumaierSum::default();
                    let mut den = 0.0;
                    for s in subjects {
                        let pj = s.occasions.iter().position(|&o| o == j);
                        let pk = s.occasions.iter().position(|&o| o == k);
                        if let (Some(pj), Some(pk)) = (pj, pk) {
                            num.add(s.weight * s.residuals[pj] * s.residuals[pk]);
                            den += s.weight;
                        }
                    }
                    let v = if den > 0.0 {
                        num.value() / den
                    } else {
                        *zero_cells += 1;
                        0.0
                    };
                    mat[[j, k]] = v;
                    mat[[k, j]] = v;
                }
            }
            if subjects.iter().all(|s| s.residuals.len() < 2) {
                return Err(Error::Invalid(
                    "no subject with at least two observed occasions".into(),
                ));
            }
            Ok(Alpha::Matrix(mat))
        }
    }
}

pub fn estimate_alpha(
    subjects: &[SubjectResiduals],
    structure: CorrelationStructure,
    n_occasions: usize,
) -> Result<Alpha> {
    let mut zero = 0;
    estimate_alpha_detailed(subjects, structure, n_occasions, &mut zero)
}

/// Working correlation matrix C_i on a subject's observed occasions.
///
/// Entries are indexed by design lags: an AR(1) gap of t protocol occasions
/// contributes alpha^t even when intermediate occasions are unobserved.
pub fn correlation_matrix(
    structure: CorrelationStructure,
    alpha: &Alpha,
    occasions: &[usize],
) -> Result<Array2<f64>> {
    let m = occasions.len();
    let mut c = Array2::<f64>::eye(m);
    match (structure, alpha) {
        (CorrelationStructure::Independence, _) => {}
        (CorrelationStructure::Exchangeable, Alpha::Scalar(a)) => {
            if m >= 2 {
                let lower = -1.0 / (m as f64 - 1.0);
                if !(*a > lower && *a < 1.0) {
                    return Err(Error::InvalidAlpha {
                        alpha: *a,
                        structure: "exchangeable".into(),
                        n: m,
                    });
                }
            }
            for j in 0..m {
                for k in 0..m {
                    if j != k {
                        c[[j, k]] = *a;
                    }
                }
            }
        }
        (CorrelationStructure::Ar1, Alpha::Scalar(a)) => {
            if m >= 2 && a.abs() >= 1.0 {
                return Err(Error::InvalidAlpha {
                    alpha: *a,
                    structure: "ar1".into(),
                    n: m,
                });
            }
            for j in 0..m {
                for k in 0..m {
                    let lag = occasions[j].abs_diff(occasions[k]);
                    c[[j, k]] = a.powi(lag as i32);
                }
            }
        }
        (CorrelationStructure::Unstructured, Alpha::Matrix(mat)) => {
            for j in 0..m {
                for k in 0..m {
                    let v = mat[[occasions[j], occasions[k]]];
                    if v.abs() > 1.0 {
                        return Err(Error::InvalidAlpha {
                            alpha: v,
                            structure: "unstructured".into(),
                            n: m,
                        });
                    }
                    c[[j, k]] = if j == k { 1.0 } else { v };
                }
            }
        }
        _ => {
            return Err(Error::Invalid(
                "alpha store does not match the correlation structure".into(),
            ))
        }
    }
    Ok(c)
}

/// A converged GEE (or weighted GEE) fit.
#[derive(Debug, Clone)]
pub struct GeeFit {
    pub beta: Array1<f64>,
    pub correlation: WorkingCorrelation,
    /// Inverse bread I0^-1: the covariance under a correct working
    /// correlation.
    pub model_based_cov: Array2<f64>,
    /// Empirically corrected I0^-1 I1 I0^-1.
    pub sandwich_cov: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the estimating function at the returned coefficients.
    pub score_norm: f64,
    pub columns: Vec<String>,
    pub info: DesignInfo,
    pub n_subjects: usize,
    pub notes: Vec<String>,
}

impl GeeFit {
    pub fn model_se(&self) -> Array1<f64> {
        Array1::from_iter((0..self.beta.len()).map(|j| self.model_based_cov[[j, j]].sqrt()))
    }

    pub fn robust_se(&self) -> Array1<f64> {
        Array1::from_iter((0..self.beta.len()).map(|j| self.sandwich_cov[[j, j]].sqrt()))
    }
}

/// Fitting options; the defaults match the documented contract.
#[derive(Debug, Clone)]
pub struct GeeOptions {
    pub max_iter: usize,
    /// Convergence tolerance for both the relative beta change and the
    /// alpha change.
    pub tol: f64,
    /// Multiply the sandwich by N/(N-1) when set.
    pub small_sample_correction: bool,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            small_sample_correction: false,
        }
    }
}

/// Per-subject weighting resolved against a frame.
struct SubjectWeighting {
    /// Multiplier on the subject's score/information contribution.
    factor: f64,
    /// Observation-level weights (occasion mode), aligned to the subject's
    /// observed rows.
    per_row: Option<Vec<f64>>,
}

fn resolve_weights(
    frame: &ModelFrame,
    weights: Option<&WeightSet>,
) -> Result<Vec<SubjectWeighting>> {
    frame
        .subjects
        .iter()
        .map(|s| match weights {
            None => Ok(SubjectWeighting {
                factor: 1.0,
                per_row: None,
            }),
            Some(ws) => {
                let entry = ws.by_subject.get(&s.id).ok_or_else(|| {
                    Error::Invalid(format!("no dropout weight for subject `{}`", s.id))
                })?;
                match ws.mode {
                    WeightMode::Subject => Ok(SubjectWeighting {
                        factor: entry.weight,
                        per_row: None,
                    }),
                    WeightMode::Occasion => {
                        if entry.occasions != s.occasions {
                            return Err(Error::Invalid(format!(
                                "occasion weights for subject `{}` do not align with its observed occasions",
                                s.id
                            )));
                        }
                        Ok(SubjectWeighting {
                            factor: 1.0,
                            per_row: Some(entry.occasion_weights.clone()),
                        })
                    }
                }
            }
        })
        .collect()
}

/// Assemble the estimating function, the bread and the meat at `beta`.
fn assemble(
    frame: &ModelFrame,
    structure: CorrelationStructure,
    alpha: &Alpha,
    beta: ArrayView1<f64>,
    weighting: &[SubjectWeighting],
    with_meat: bool,
) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    let p = frame.n_columns();
    let mut acc = ScoreAccumulator::new(p);
    let mut meat = ScoreAccumulator::new(p);
    for (s, w) in frame.subjects.iter().zip(weighting) {
        let m = s.y.len();
        if m == 0 {
            continue;
        }
        let eta = s.x.dot(&beta);
        let mu: Array1<f64> = eta.mapv(expit);
        for &v in mu.iter() {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::DegenerateProbability(v));
            }
        }
        let c = correlation_matrix(structure, alpha, &s.occasions)?;
        // V = Aw^{1/2} C Aw^{1/2}; occasion weights scale the variance as
        // prior weights do, Var = v(mu)/w.
        let mut v = c;
        let mut sd = Array1::<f64>::zeros(m);
        for i in 0..m {
            let var = match &w.per_row {
                Some(wr) => bernoulli_variance(mu[i]) / wr[i],
                None => bernoulli_variance(mu[i]),
            };
            sd[i] = var.sqrt();
        }
        for a in 0..m {
            for b in 0..m {
                v[[a, b]] *= sd[a] * sd[b];
            }
        }
        let l = linalg::cholesky(v.view())
            .ok_or_else(|| Error::Singular(format!("V_i for subject `{}`", s.id)))?;
        // D = A X with A = diag(mu (1 - mu)), the logit mean derivative.
        let mut d = s.x.clone();
        for i in 0..m {
            let a = bernoulli_variance(mu[i]);
            for j in 0..p {
                d[[i, j]] *= a;
            }
        }
        let resid = &s.y - &mu;
        let z = linalg::chol_solve_vec(&l, resid.view());
        let vinv_d = linalg::chol_solve_mat(&l, d.view());
        let s_i = d.t().dot(&z) * w.factor;
        let i0_i = d.t().dot(&vinv_d) * w.factor;
        acc.add_score(s_i.view());
        acc.add_info(i0_i.view());
        if with_meat {
            let outer = Array2::from_shape_fn((p, p), |(a, b)| s_i[a] * s_i[b]);
            meat.add_info(outer.view());
        }
    }
    Ok((acc.score_vec(), acc.info_mat(), meat.info_mat()))
}

fn subject_residuals(
    frame: &ModelFrame,
    beta: ArrayView1<f64>,
    weighting: &[SubjectWeighting],
) -> Result<Vec<SubjectResiduals>> {
    frame
        .subjects
        .iter()
        .zip(weighting)
        .map(|(s, w)| {
            let mu: Array1<f64> = s.x.dot(&beta).mapv(expit);
            let mut e = pearson_residuals(s.y.view(), mu.view())?;
            if let Some(wr) = &w.per_row {
                for (ei, wi) in e.iter_mut().zip(wr) {
                    *ei *= wi.sqrt();
                }
            }
            Ok(SubjectResiduals {
                occasions: s.occasions.clone(),
                residuals: e.to_vec(),
                weight: w.factor,
            })
        })
        .collect()
}

/// Model-based and sandwich covariances at a converged fit, from the same
/// assembly path the solver uses.
pub fn sandwich_covariance(
    frame: &ModelFrame,
    structure: CorrelationStructure,
    alpha: &Alpha,
    beta: ArrayView1<f64>,
    weights: Option<&WeightSet>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let weighting = resolve_weights(frame, weights)?;
    let (_, i0, i1) = assemble(frame, structure, alpha, beta, &weighting, true)?;
    let bread = linalg::spd_inverse(i0.view(), "I0")?;
    let sandwich = linalg::symmetrize(&bread.dot(&i1).dot(&bread));
    Ok((bread, sandwich))
}

pub(crate) fn fit_gee_engine(
    frame: &ModelFrame,
    structure: CorrelationStructure,
    weights: Option<&WeightSet>,
    options: &GeeOptions,
) -> Result<GeeFit> {
    let p = frame.n_columns();
    let weighting = resolve_weights(frame, weights)?;
    let used = frame.subjects.iter().filter(|s| !s.y.is_empty()).count();
    let skipped = frame.subjects.len() - used;
    let mut notes = Vec::new();
    if skipped > 0 {
        notes.push(format!(
            "excluded {skipped} subject(s) with no observed outcomes"
        ));
    }
    if used == 0 {
        return Err(Error::Invalid("no observed outcomes".into()));
    }

    // Step 1: initial estimates from an independence GLM; dropout weights
    // enter as prior weights.
    let (x, y) = frame.pooled();
    let mut prior = Array1::<f64>::ones(x.nrows());
    {
        let mut row = 0usize;
        for (s, w) in frame.subjects.iter().zip(&weighting) {
            for i in 0..s.y.len() {
                prior[row] = match &w.per_row {
                    Some(wr) => wr[i],
                    None => w.factor,
                };
                row += 1;
            }
        }
    }
    let names = frame.info.column_names();
    let init = fit_logistic(x.view(), y.view(), prior.view(), Some(&names))?;
    let mut beta = init.beta;

    let mut alpha = match structure {
        CorrelationStructure::Independence => Alpha::None,
        CorrelationStructure::Exchangeable | CorrelationStructure::Ar1 => Alpha::Scalar(0.0),
        CorrelationStructure::Unstructured => Alpha::Matrix(Array2::eye(frame.n_occasions)),
    };
    let mut alpha_initialized = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut zero_cells = 0usize;
    let mut last_beta_delta = f64::INFINITY;
    // The converged pair must leave the estimating function essentially
    // zero, well inside the documented 1e-6 bound.
    let score_tol = 1e-7;

    for iter in 1..=options.max_iter {
        iterations = iter;
        let resids = subject_residuals(frame, beta.view(), &weighting)?;
        let new_alpha =
            estimate_alpha_detailed(&resids, structure, frame.n_occasions, &mut zero_cells)?;
        let alpha_delta = if alpha_initialized || structure == CorrelationStructure::Independence {
            new_alpha.max_abs_diff(&alpha)
        } else {
            f64::INFINITY
        };
        alpha = new_alpha;
        alpha_initialized = true;

        let (score, i0, _) = assemble(frame, structure, &alpha, beta.view(), &weighting, false)?;
        let score_norm = score.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
        if alpha_delta < options.tol && last_beta_delta < options.tol && score_norm < score_tol {
            converged = true;
            break;
        }
        let delta = linalg::spd_solve(i0.view(), score.view(), "I0")?;
        last_beta_delta = delta
            .iter()
            .map(|d| d.abs())
            .fold(0.0f64, f64::max)
            / (1.0 + beta.iter().map(|b| b.abs()).fold(0.0f64, f64::max));
        beta = &beta + &delta;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonConvergence {
                what: "GEE Fisher scoring".into(),
                iterations,
            });
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "GEE".into(),
            iterations,
        });
    }
    if zero_cells > 0 {
        notes.push(format!(
            "{zero_cells} unstructured correlation cell(s) had no supporting subjects; set to 0"
        ));
    }

    let (score, i0, i1) = assemble(frame, structure, &alpha, beta.view(), &weighting, true)?;
    let score_norm = score.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
    let bread = linalg::spd_inverse(i0.view(), "I0")?;
    let mut sandwich = linalg::symmetrize(&bread.dot(&i1).dot(&bread));
    if options.small_sample_correction && used > 1 {
        let c = used as f64 / (used as f64 - 1.0);
        sandwich.mapv_inplace(|v| v * c);
    }
    debug_assert_eq!(sandwich.nrows(), p);

    if let Some(ws) = weights {
        let max_w = ws
            .by_subject
            .values()
            .flat_map(|e| match ws.mode {
                WeightMode::Subject => vec![e.weight],
                WeightMode::Occasion => e.occasion_weights.clone(),
            })
            .fold(0.0f64, f64::max);
        if max_w > 50.0 {
            notes.push(format!("extreme inverse-probability weight {max_w:.2}"));
        }
    }

    Ok(GeeFit {
        beta,
        correlation: WorkingCorrelation { structure, alpha },
        model_based_cov: bread,
        sandwich_cov: sandwich,
        iterations,
        converged,
        score_norm,
        columns: names,
        info: frame.info.clone(),
        n_subjects: used,
        notes,
    })
}

/// Fit a marginal logistic model by GEE.
pub fn fit_gee(
    dataset: &LongDataset,
    formula: &Formula,
    structure: CorrelationStructure,
) -> Result<GeeFit> {
    fit_gee_with_options(dataset, formula, structure, &GeeOptions::default())
}

pub fn fit_gee_with_options(
    dataset: &LongDataset,
    formula: &Formula,
    structure: CorrelationStructure,
    options: &GeeOptions,
) -> Result<GeeFit> {
    let frame = build_design(dataset, formula)?;
    fit_gee_engine(&frame, structure, None, options)
}
