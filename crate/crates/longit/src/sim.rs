//! Synthetic longitudinal binary data with controlled dropout.
//!
//! Datasets are generated from the random-intercept logistic model and then
//! thinned by a sequential discrete-time dropout process whose hazard may
//! depend on the previous outcome (MAR), on nothing outcome-related (MCAR)
//! or on the current, possibly unobserved outcome (MNAR). Everything is
//! reproducible from the spec's seed; replicate r reruns with seed + r.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CovariateSchema, LongDataset, SubjectRecord};
use crate::design::{build_design, DesignInfo, Formula};
use crate::error::{Error, Result};
use crate::gee::{fit_gee, CorrelationStructure};
use crate::glm::{expit, logit};
use crate::glmm::{fit_glmm, marginalize_mean, GlmmSpec, QuadratureSpec};
use crate::prep::{complete_case, locf_impute};
use crate::wgee::{
    fit_dropout_model, fit_wgee, occasion_weights, person_period_expand, prepare_for_wgee,
    subject_weights, WeightMode,
};

/// One treatment arm and its allocation share.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSpec {
    pub label: String,
    pub share: f64,
}

/// Dropout-hazard coefficients over the history vector: intercept, previous
/// outcome, treatment dummies and occasion dummies (occasion 2 is the
/// hazard reference; `time[j]` shifts occasions 3..n).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub intercept: f64,
    #[serde(default)]
    pub prev_outcome: f64,
    /// Per-arm hazard shift for non-reference arms.
    #[serde(default)]
    pub treatment: BTreeMap<String, f64>,
    /// Shifts for occasions 3..n.
    #[serde(default)]
    pub time: Vec<f64>,
}

/// Generating spec: a saturated visit/treatment mean structure on the
/// conditional (random-intercept) scale plus a dropout model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    pub n_subjects: usize,
    pub n_occasions: usize,
    /// First arm is the reference.
    pub arms: Vec<ArmSpec>,
    /// Conditional intercepts per occasion.
    pub intercepts: Vec<f64>,
    /// Conditional treatment effects per occasion for each non-reference
    /// arm.
    #[serde(default)]
    pub treatment_effects: BTreeMap<String, Vec<f64>>,
    /// Random-intercept standard deviation.
    pub sigma: f64,
    pub dropout: DropoutSpec,
    /// Coefficient on the current (possibly unobserved) outcome in the
    /// dropout hazard; nonzero makes the mechanism MNAR.
    #[serde(default)]
    pub omega: f64,
    pub seed: u64,
}

/// Missingness mechanism implied by a spec; derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

impl SimSpec {
    pub fn mechanism(&self) -> Mechanism {
        if self.omega != 0.0 {
            Mechanism::Mnar
        } else if self.dropout.prev_outcome != 0.0 {
            Mechanism::Mar
        } else {
            Mechanism::Mcar
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_occasions < 2 {
            return Err(Error::Invalid(
                "need at least one subject and two occasions".into(),
            ));
        }
        if self.arms.is_empty() {
            return Err(Error::Invalid("no arms declared".into()));
        }
        let share: f64 = self.arms.iter().map(|a| a.share).sum();
        if self.arms.iter().any(|a| a.share <= 0.0) || (share - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("arm shares must be positive and sum to 1".into()));
        }
        if self.intercepts.len() != self.n_occasions {
            return Err(Error::Invalid("intercepts must have one entry per occasion".into()));
        }
        for (arm, effects) in &self.treatment_effects {
            if !self.arms.iter().skip(1).any(|a| a.label == *arm) {
                return Err(Error::Invalid(format!(
                    "treatment effects given for unknown non-reference arm `{arm}`"
                )));
            }
            if effects.len() != self.n_occasions {
                return Err(Error::Invalid(
                    "treatment effects must have one entry per occasion".into(),
                ));
            }
        }
        if self.sigma < 0.0 {
            return Err(Error::Invalid("sigma must be nonnegative".into()));
        }
        if self.dropout.time.len() + 2 > self.n_occasions + 1 {
            return Err(Error::Invalid(
                "dropout time shifts exceed the number of hazard occasions".into(),
            ));
        }
        Ok(())
    }

    /// Conditional linear predictor for an arm at occasion j (0-based).
    pub fn conditional_eta(&self, arm: &str, j: usize) -> f64 {
        let mut eta = self.intercepts[j];
        if let Some(effects) = self.treatment_effects.get(arm) {
            eta += effects[j];
        }
        eta
    }

    /// Population-averaged success probability for an arm at occasion j.
    pub fn marginal_mean(&self, arm: &str, j: usize) -> f64 {
        let beta = Array1::from_vec(vec![self.conditional_eta(arm, j)]);
        let x = Array1::from_vec(vec![1.0]);
        marginalize_mean(beta.view(), self.sigma, x.view())
    }

    /// The saturated formula the generated data obeys.
    pub fn saturated_formula(&self) -> Formula {
        Formula::saturated()
    }

    /// True coefficient values aligned to a saturated design's columns, on
    /// the conditional (random-effects) scale.
    pub fn true_conditional(&self, info: &DesignInfo) -> Result<Array1<f64>> {
        self.map_columns(info, |arm, j| match arm {
            None => self.intercepts[j],
            Some(a) => *self
                .treatment_effects
                .get(a)
                .map(|e| &e[j])
                .unwrap_or(&0.0),
        })
    }

    /// True marginal (population-averaged) coefficients aligned to a
    /// saturated design: per-occasion logits of the reference arm and
    /// logit differences for the other arms.
    pub fn true_marginal(&self, info: &DesignInfo) -> Result<Array1<f64>> {
        let reference = &self.arms[0].label;
        self.map_columns(info, |arm, j| {
            let p_ref = self.marginal_mean(reference, j);
            match arm {
                None => logit(p_ref),
                Some(a) => logit(self.marginal_mean(a, j)) - logit(p_ref),
            }
        })
    }

    fn map_columns<F: Fn(Option<&str>, usize) -> f64>(
        &self,
        info: &DesignInfo,
        value: F,
    ) -> Result<Array1<f64>> {
        let mut out = Array1::<f64>::zeros(info.columns.len());
        for (c, meta) in info.columns.iter().enumerate() {
            let visit = meta.visit_level().ok_or_else(|| {
                Error::Invalid("design is not the saturated visit/treatment form".into())
            })?;
            let j = info
                .visit_levels
                .iter()
                .position(|v| v == visit)
                .ok_or_else(|| Error::Invalid(format!("unknown visit `{visit}`")))?;
            out[c] = value(meta.treatment_level(), j);
        }
        Ok(out)
    }

    fn occasion_labels(&self) -> Vec<String> {
        (1..=self.n_occasions).map(|j| j.to_string()).collect()
    }
}

/// Draw a complete dataset from the random-intercept logistic model.
pub fn simulate_complete(spec: &SimSpec) -> Result<LongDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.sigma.max(0.0)).map_err(|e| {
        Error::Invalid(format!("bad random-intercept distribution: {e}"))
    })?;
    let width = spec.n_subjects.to_string().len();
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut arm = spec.arms.last().unwrap().label.clone();
        for a in &spec.arms {
            acc += a.share;
            if u < acc {
                arm = a.label.clone();
                break;
            }
        }
        let b = if spec.sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        let outcomes: Vec<Option<bool>> = (0..spec.n_occasions)
            .map(|j| {
                let p = expit(spec.conditional_eta(&arm, j) + b);
                Some(rng.random::<f64>() < p)
            })
            .collect();
        subjects.push(SubjectRecord {
            id: format!("s{:0width$}", i + 1, width = width),
            outcomes,
            treatment: arm,
            covariates: BTreeMap::new(),
        });
    }
    let schema = CovariateSchema {
        treatment: Some("trt".into()),
        treatment_reference: Some(spec.arms[0].label.clone()),
        covariates: vec![],
        occasions: Some(spec.occasion_labels()),
    };
    let mut dataset = LongDataset {
        subjects,
        occasions: spec.occasion_labels(),
        schema,
        arms: Vec::new(),
    };
    dataset.recompute_arms();
    Ok(dataset)
}

/// Impose sequential dropout on a complete dataset. Occasion 1 is never
/// dropped; a subject at risk at occasion j drops with probability
/// expit(h_ij' psi + omega y_ij), after which all later outcomes are
/// missing, so the result is monotone by construction.
pub fn apply_dropout(dataset: &LongDataset, spec: &SimSpec) -> Result<LongDataset> {
    spec.validate()?;
    if dataset
        .subjects
        .iter()
        .any(|s| s.outcomes.iter().any(|o| o.is_none()))
    {
        return Err(Error::Invalid("apply_dropout needs a complete dataset".into()));
    }
    // A derived stream keeps the dropout draws independent of the outcome
    // draws while staying reproducible from the one seed.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut out = dataset.clone();
    for s in out.subjects.iter_mut() {
        for j in 2..=spec.n_occasions {
            let prev = s.outcomes[j - 2].unwrap() as u8 as f64;
            let current = s.outcomes[j - 1].unwrap() as u8 as f64;
            let mut eta = spec.dropout.intercept + spec.dropout.prev_outcome * prev;
            if let Some(shift) = spec.dropout.treatment.get(&s.treatment) {
                eta += shift;
            }
            if j >= 3 {
                if let Some(shift) = spec.dropout.time.get(j - 3) {
                    eta += shift;
                }
            }
            eta += spec.omega * current;
            if rng.random::<f64>() < expit(eta) {
                for slot in s.outcomes.iter_mut().skip(j - 1) {
                    *slot = None;
                }
                break;
            }
        }
    }
    Ok(out)
}

/// Estimators the replication harness can run.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    /// Returns the truth; a harness check.
    Oracle,
    Gee {
        strategy: Strategy,
        structure: CorrelationStructure,
    },
    Wgee {
        mode: WeightMode,
        structure: CorrelationStructure,
    },
    Glmm {
        strategy: Strategy,
        quadrature: QuadratureSpec,
    },
}

/// Data-preparation strategy for an estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    CompleteCase,
    Locf,
    Observed,
}

impl Strategy {
    fn name(&self) -> &'static str {
        match self {
            Strategy::CompleteCase => "cc",
            Strategy::Locf => "locf",
            Strategy::Observed => "observed",
        }
    }

    fn apply(&self, dataset: &LongDataset) -> Result<LongDataset> {
        match self {
            Strategy::CompleteCase => complete_case(dataset),
            Strategy::Locf => Ok(locf_impute(dataset).0),
            Strategy::Observed => Ok(dataset.clone()),
        }
    }
}

fn parse_structure(s: &str) -> Result<CorrelationStructure> {
    Ok(match s {
        "ind" => CorrelationStructure::Independence,
        "exch" => CorrelationStructure::Exchangeable,
        "ar1" => CorrelationStructure::Ar1,
        "un" => CorrelationStructure::Unstructured,
        other => return Err(Error::Invalid(format!("unknown correlation `{other}`"))),
    })
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    Ok(match s {
        "cc" => Strategy::CompleteCase,
        "locf" => Strategy::Locf,
        "observed" => Strategy::Observed,
        other => return Err(Error::Invalid(format!("unknown strategy `{other}`"))),
    })
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    /// Parse estimator labels: `oracle`, `gee:<strategy>:<corr>`,
    /// `wgee:<occasion|subject>:<corr>`, `glmm:<strategy>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["oracle"] => Ok(Estimator::Oracle),
            ["gee", strategy, corr] => Ok(Estimator::Gee {
                strategy: parse_strategy(strategy)?,
                structure: parse_structure(corr)?,
            }),
            ["wgee", mode, corr] => Ok(Estimator::Wgee {
                mode: match *mode {
                    "occasion" => WeightMode::Occasion,
                    "subject" => WeightMode::Subject,
                    other => {
                        return Err(Error::Invalid(format!("unknown weight mode `{other}`")))
                    }
                },
                structure: parse_structure(corr)?,
            }),
            ["glmm", strategy] => Ok(Estimator::Glmm {
                strategy: parse_strategy(strategy)?,
                quadrature: QuadratureSpec::adaptive(20),
            }),
            _ => Err(Error::Invalid(format!("cannot parse estimator `{s}`"))),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimator::Oracle => write!(f, "oracle"),
            Estimator::Gee {
                strategy,
                structure,
            } => write!(f, "gee:{}:{}", strategy.name(), structure.code()),
            Estimator::Wgee { mode, structure } => write!(
                f,
                "wgee:{}:{}",
                match mode {
                    WeightMode::Occasion => "occasion",
                    WeightMode::Subject => "subject",
                },
                structure.code()
            ),
            Estimator::Glmm { strategy, .. } => write!(f, "glmm:{}", strategy.name()),
        }
    }
}

impl Estimator {
    /// Parameter names, their true values and one fitted (estimate, SE)
    /// pair per parameter.
    fn run(
        &self,
        observed: &LongDataset,
        spec: &SimSpec,
        info: &DesignInfo,
    ) -> Result<(Vec<String>, Array1<f64>, Array1<f64>, Array1<f64>)> {
        let formula = spec.saturated_formula();
        let names: Vec<String> = info.columns.iter().map(|c| c.name.clone()).collect();
        match self {
            Estimator::Oracle => {
                let truth = spec.true_marginal(info)?;
                let se = Array1::zeros(truth.len());
                Ok((names, truth.clone(), truth, se))
            }
            Estimator::Gee {
                strategy,
                structure,
            } => {
                let data = strategy.apply(observed)?;
                let fit = fit_gee(&data, &formula, *structure)?;
                let truth = spec.true_marginal(info)?;
                Ok((names, truth, fit.beta.clone(), fit.robust_se()))
            }
            Estimator::Wgee { mode, structure } => {
                let (prepared, _) = prepare_for_wgee(observed);
                let table = person_period_expand(&prepared, &["trt".into()])?;
                let model = fit_dropout_model(&table)?;
                let weights = match mode {
                    WeightMode::Occasion => occasion_weights(&model, &prepared)?,
                    WeightMode::Subject => subject_weights(&model, &prepared)?,
                };
                let fit = fit_wgee(&prepared, &formula, *structure, &weights)?;
                let truth = spec.true_marginal(info)?;
                Ok((names, truth, fit.beta.clone(), fit.robust_se()))
            }
            Estimator::Glmm {
                strategy,
                quadrature,
            } => {
                let data = strategy.apply(observed)?;
                let mut glmm_spec = GlmmSpec::new(formula);
                glmm_spec.quadrature = *quadrature;
                let fit = fit_glmm(&data, &glmm_spec)?;
                let se = fit
                    .standard_errors()
                    .ok_or_else(|| Error::Singular("GLMM information".into()))?;
                let mut names = names;
                names.push("sigma".into());
                let mut truth = spec.true_conditional(info)?.to_vec();
                truth.push(spec.sigma);
                let mut est = fit.beta.to_vec();
                est.push(fit.sigma);
                let mut ses = se.to_vec();
                ses.push(fit.sigma_se.unwrap_or(f64::NAN));
                Ok((
                    names,
                    Array1::from_vec(truth),
                    Array1::from_vec(est),
                    Array1::from_vec(ses),
                ))
            }
        }
    }
}

/// Aggregated performance of one estimator for one parameter.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub estimator: String,
    pub param: String,
    pub truth: f64,
    pub mean_bias: f64,
    pub empirical_se: f64,
    pub mean_reported_se: f64,
    /// Share of replicates whose 95% Wald interval covered the truth.
    pub coverage: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

/// Bias / coverage report over replicates.
#[derive(Debug, Clone)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub replicates: usize,
}

impl StudyReport {
    pub fn row(&self, estimator: &str, param: &str) -> Option<&StudyRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.param == param)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "estimator,param,truth,mean_bias,empirical_se,mean_reported_se,coverage95,n_ok,n_failed\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.6},{},{}\n",
                r.estimator,
                r.param,
                r.truth,
                r.mean_bias,
                r.empirical_se,
                r.mean_reported_se,
                r.coverage,
                r.n_ok,
                r.n_failed
            ));
        }
        out
    }
}

const Z975: f64 = 1.959_963_984_540_054;

/// Run `replicates` simulated trials and aggregate bias, empirical and
/// reported standard errors and coverage per estimator and parameter.
/// Replicate r uses seed + r; estimator failures are counted, not fatal.
pub fn replicate_study(
    spec: &SimSpec,
    estimators: &[Estimator],
    replicates: usize,
) -> Result<StudyReport> {
    spec.validate()?;
    if replicates == 0 {
        return Err(Error::Invalid("need at least one replicate".into()));
    }
    if estimators.is_empty() {
        return Err(Error::Invalid("no estimators requested".into()));
    }
    // Reference design info from a replicate-independent draw.
    let info = {
        let probe = simulate_complete(spec)?;
        build_design(&probe, &spec.saturated_formula())?.info
    };

    type RepResult = Vec<Result<(Vec<String>, Array1<f64>, Array1<f64>, Array1<f64>)>>;
    let per_replicate: Vec<RepResult> = (1..=replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut rspec = spec.clone();
            rspec.seed = spec.seed.wrapping_add(r);
            let complete = simulate_complete(&rspec)?;
            let observed = apply_dropout(&complete, &rspec)?;
            Ok(estimators
                .iter()
                .map(|e| e.run(&observed, &rspec, &info))
                .collect::<RepResult>())
        })
        .collect::<Result<Vec<RepResult>>>()?;

    let mut rows = Vec::new();
    for (e_idx, estimator) in estimators.iter().enumerate() {
        let ok: Vec<&(Vec<String>, Array1<f64>, Array1<f64>, Array1<f64>)> = per_replicate
            .iter()
            .filter_map(|rep| rep[e_idx].as_ref().ok())
            .collect();
        let n_ok = ok.len();
        let n_failed = replicates - n_ok;
        if n_ok == 0 {
            rows.push(StudyRow {
                estimator: estimator.to_string(),
                param: "(all)".into(),
                truth: f64::NAN,
                mean_bias: f64::NAN,
                empirical_se: f64::NAN,
                mean_reported_se: f64::NAN,
                coverage: 0.0,
                n_ok,
                n_failed,
            });
            continue;
        }
        let (names, truth, _, _) = ok[0];
        for (k, param) in names.iter().enumerate() {
            let estimates: Vec<f64> = ok.iter().map(|(_, _, est, _)| est[k]).collect();
            let ses: Vec<f64> = ok.iter().map(|(_, _, _, se)| se[k]).collect();
            let mean_est = estimates.iter().sum::<f64>() / n_ok as f64;
            let empirical_se = if n_ok > 1 {
                (estimates
                    .iter()
                    .map(|e| (e - mean_est).powi(2))
                    .sum::<f64>()
                    / (n_ok - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            let covered = estimates
                .iter()
                .zip(&ses)
                .filter(|(e, s)| (*e - truth[k]).abs() <= Z975 * **s)
                .count();
            rows.push(StudyRow {
                estimator: estimator.to_string(),
                param: param.clone(),
                truth: truth[k],
                mean_bias: mean_est - truth[k],
                empirical_se,
                mean_reported_se: ses.iter().sum::<f64>() / n_ok as f64,
                coverage: covered as f64 / n_ok as f64,
                n_ok,
                n_failed,
            });
        }
    }
    Ok(StudyReport {
        rows,
        replicates,
    })
}
