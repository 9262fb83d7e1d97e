//! Weighted GEE under MAR dropout.
//!
//! The pipeline: put the data in monotone form, expand it to person-period
//! records, fit a logistic dropout model on the at-risk rows, convert the
//! fitted hazards into inverse-probability weights (subject-level or
//! occasion-level), and solve the weighted estimating equations.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::dataset::{missingness_profile, LongDataset, Pattern, SubjectRecord, Value};
use crate::design::{build_design, Formula};
use crate::error::{Error, Result};
use crate::gee::{fit_gee_engine, CorrelationStructure, GeeFit, GeeOptions};
use crate::glm::{expit, fit_logistic, GlmFit};
use crate::prep::monotonize;

/// How one column of the dropout design is assembled.
#[derive(Debug, Clone, PartialEq)]
enum DropoutColumn {
    Intercept,
    PrevOutcome,
    /// Treatment arm dummy.
    Treatment { level: String },
    /// Covariate value (continuous) or level dummy (categorical).
    Covariate { name: String, level: Option<String> },
    /// Occasion dummy for dropout times 3..n; time 2 is the reference.
    TimeDummy { occasion: usize },
}

/// Person-period expansion of a monotone dataset: one row per subject per
/// at-risk occasion j in {2, ..., n}, with `drop` = 1 exactly at the
/// dropout occasion.
#[derive(Debug, Clone)]
pub struct PersonPeriodTable {
    pub x: Array2<f64>,
    pub drop: Array1<f64>,
    pub columns: Vec<String>,
    layout: Vec<DropoutColumn>,
    /// (subject id, 1-based occasion) per row.
    pub rows: Vec<(String, usize)>,
    pub occasion_labels: Vec<String>,
}

fn dropout_layout(dataset: &LongDataset, covariates: &[String]) -> Result<Vec<DropoutColumn>> {
    let mut layout = vec![DropoutColumn::Intercept, DropoutColumn::PrevOutcome];
    for name in covariates {
        if dataset.schema.treatment.as_deref() == Some(name.as_str()) {
            for arm in dataset.arms.iter().skip(1) {
                layout.push(DropoutColumn::Treatment { level: arm.clone() });
            }
            continue;
        }
        let spec = dataset
            .schema
            .covariates
            .iter()
            .find(|c| c.name == *name)
            .ok_or_else(|| Error::Formula(format!("unknown dropout covariate `{name}`")))?;
        match spec.kind {
            crate::dataset::CovariateKind::Continuous => layout.push(DropoutColumn::Covariate {
                name: name.clone(),
                level: None,
            }),
            crate::dataset::CovariateKind::Categorical => {
                let mut levels: Vec<String> = Vec::new();
                for s in &dataset.subjects {
                    for j in 0..dataset.n_occasions() {
                        if let Some(Value::Cat(l)) = s.covariate_at(name, j) {
                            if !levels.contains(l) {
                                levels.push(l.clone());
                            }
                        }
                    }
                }
                levels.sort();
                if let Some(r) = &spec.reference {
                    if let Some(pos) = levels.iter().position(|l| l == r) {
                        let r = levels.remove(pos);
                        levels.insert(0, r);
                    }
                }
                for l in levels.into_iter().skip(1) {
                    layout.push(DropoutColumn::Covariate {
                        name: name.clone(),
                        level: Some(l),
                    });
                }
            }
        }
    }
    for j in 3..=dataset.n_occasions() {
        layout.push(DropoutColumn::TimeDummy { occasion: j });
    }
    Ok(layout)
}

fn column_name(col: &DropoutColumn, dataset: &LongDataset) -> String {
    match col {
        DropoutColumn::Intercept => "Intercept".into(),
        DropoutColumn::PrevOutcome => "prev_outcome".into(),
        DropoutColumn::Treatment { level } => format!(
            "{}[{}]",
            dataset.schema.treatment.as_deref().unwrap_or("trt"),
            level
        ),
        DropoutColumn::Covariate { name, level } => match level {
            Some(l) => format!("{name}[{l}]"),
            None => name.clone(),
        },
        DropoutColumn::TimeDummy { occasion } => {
            format!("time[{}]", dataset.occasions[occasion - 1])
        }
    }
}

fn column_value(
    col: &DropoutColumn,
    dataset: &LongDataset,
    subject: &SubjectRecord,
    occasion: usize,
    prev_y: f64,
) -> Result<f64> {
    Ok(match col {
        DropoutColumn::Intercept => 1.0,
        DropoutColumn::PrevOutcome => prev_y,
        DropoutColumn::Treatment { level } => (subject.treatment == *level) as u8 as f64,
        DropoutColumn::Covariate { name, level } => {
            let value =
                subject
                    .covariate_at(name, occasion - 1)
                    .ok_or_else(|| Error::MissingCovariate {
                        name: name.clone(),
                        id: subject.id.clone(),
                        occasion: dataset.occasions[occasion - 1].clone(),
                    })?;
            match (value, level) {
                (Value::Num(v), None) => *v,
                (Value::Cat(l), Some(target)) => (l == target) as u8 as f64,
                _ => {
                    return Err(Error::Invalid(format!(
                        "dropout covariate `{name}` has a value of the wrong kind"
                    )))
                }
            }
        }
        DropoutColumn::TimeDummy { occasion: t } => (occasion == *t) as u8 as f64,
    })
}

/// Expand a monotone dataset into discrete-time dropout records.
///
/// The row covariates are an intercept, the previous observed outcome, the
/// requested covariates (treatment arms and categorical levels expand to
/// dummies) and occasion dummies for dropout times 3..n.
pub fn person_period_expand(
    dataset: &LongDataset,
    covariates: &[String],
) -> Result<PersonPeriodTable> {
    let n = dataset.n_occasions();
    let layout = dropout_layout(dataset, covariates)?;
    let columns: Vec<String> = layout.iter().map(|c| column_name(c, dataset)).collect();

    let mut rows: Vec<(String, usize)> = Vec::new();
    let mut xr: Vec<f64> = Vec::new();
    let mut drop: Vec<f64> = Vec::new();
    for s in &dataset.subjects {
        let prof = missingness_profile(s);
        match prof.pattern {
            Pattern::Intermittent => {
                return Err(Error::Invalid(format!(
                    "subject `{}` has an intermittent profile; monotonize first",
                    s.id
                )))
            }
            Pattern::AllMissing => {
                return Err(Error::Invalid(format!(
                    "subject `{}` has no observed occasions; exclude it before expansion",
                    s.id
                )))
            }
            _ => {}
        }
        if s.outcomes[0].is_none() {
            return Err(Error::Invalid(format!(
                "subject `{}` misses occasion 1, so its dropout history is undefined",
                s.id
            )));
        }
        let d = prof.d; // n+1 for completers
        for j in 2..=n.min(d) {
            let prev_y = s.outcomes[j - 2].unwrap() as u8 as f64;
            for col in &layout {
                xr.push(column_value(col, dataset, s, j, prev_y)?);
            }
            drop.push((j == d) as u8 as f64);
            rows.push((s.id.clone(), j));
        }
    }
    let p = layout.len();
    let x = Array2::from_shape_vec((rows.len(), p), xr)
        .map_err(|e| Error::Invalid(format!("person-period shape: {e}")))?;
    Ok(PersonPeriodTable {
        x,
        drop: Array1::from_vec(drop),
        columns,
        layout,
        rows,
        occasion_labels: dataset.occasions.clone(),
    })
}

/// Logistic dropout model fitted on the person-period expansion.
#[derive(Debug, Clone)]
pub struct DropoutModel {
    pub fit: GlmFit,
    layout: Vec<DropoutColumn>,
    pub columns: Vec<String>,
}

impl DropoutModel {
    pub fn psi(&self) -> &Array1<f64> {
        &self.fit.beta
    }

    /// Fitted dropout hazard for a subject at 1-based occasion j, given the
    /// previous outcome.
    pub fn hazard(
        &self,
        dataset: &LongDataset,
        subject: &SubjectRecord,
        occasion: usize,
        prev_y: f64,
    ) -> Result<f64> {
        let mut eta = 0.0;
        for (col, coef) in self.layout.iter().zip(self.fit.beta.iter()) {
            eta += coef * column_value(col, dataset, subject, occasion, prev_y)?;
        }
        Ok(expit(eta))
    }
}

/// Fit the dropout model by logistic regression on the at-risk rows.
pub fn fit_dropout_model(table: &PersonPeriodTable) -> Result<DropoutModel> {
    let w = Array1::<f64>::ones(table.drop.len());
    let fit = fit_logistic(
        table.x.view(),
        table.drop.view(),
        w.view(),
        Some(&table.columns),
    )?;
    Ok(DropoutModel {
        fit,
        layout: table.layout.clone(),
        columns: table.columns.clone(),
    })
}

/// Weighting granularity for the weighted estimating equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// One weight 1/nu_{i d_i} per subject.
    Subject,
    /// One weight per observed occasion from the cumulative recursion.
    Occasion,
}

/// Weights for a single subject.
#[derive(Debug, Clone)]
pub struct SubjectWeightEntry {
    /// nu_{i d_i} = P[D_i = d_i] under the fitted dropout model.
    pub nu: f64,
    /// 1 / nu.
    pub weight: f64,
    /// Observed occasion indices (0-based) the per-occasion vectors align to.
    pub occasions: Vec<usize>,
    /// Pre-inversion cumulative at each observed occasion (starts at 1).
    pub cumulative: Vec<f64>,
    /// Inverted cumulative: the occasion-level weights.
    pub occasion_weights: Vec<f64>,
}

/// Inverse-probability weights for every subject of a monotone dataset.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub mode: WeightMode,
    pub by_subject: BTreeMap<String, SubjectWeightEntry>,
}

impl WeightSet {
    pub fn max_weight(&self) -> f64 {
        self.by_subject
            .values()
            .flat_map(|e| match self.mode {
                WeightMode::Subject => vec![e.weight],
                WeightMode::Occasion => e.occasion_weights.clone(),
            })
            .fold(0.0, f64::max)
    }

    /// Clamp weights above the given quantile of the weight distribution.
    pub fn truncate(&mut self, quantile: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&quantile) {
            return Err(Error::Invalid("truncation quantile must be in [0, 1]".into()));
        }
        let mut all: Vec<f64> = self
            .by_subject
            .values()
            .flat_map(|e| match self.mode {
                WeightMode::Subject => vec![e.weight],
                WeightMode::Occasion => e.occasion_weights.clone(),
            })
            .collect();
        if all.is_empty() {
            return Ok(());
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((all.len() - 1) as f64 * quantile).round() as usize;
        let cap = all[idx];
        for e in self.by_subject.values_mut() {
            e.weight = e.weight.min(cap);
            for w in e.occasion_weights.iter_mut() {
                *w = w.min(cap);
            }
        }
        Ok(())
    }
}

fn subject_entry(
    model: &DropoutModel,
    dataset: &LongDataset,
    subject: &SubjectRecord,
) -> Result<SubjectWeightEntry> {
    let prof = missingness_profile(subject);
    if prof.pattern == Pattern::Intermittent {
        return Err(Error::Invalid(format!(
            "subject `{}` is intermittent; monotonize before weighting",
            subject.id
        )));
    }
    if prof.pattern == Pattern::AllMissing || subject.outcomes[0].is_none() {
        return Err(Error::Invalid(format!(
            "subject `{}` misses occasion 1 and cannot receive dropout weights",
            subject.id
        )));
    }
    let n = subject.outcomes.len();
    let d = prof.d; // n+1 for completers
    let hazard_at = |j: usize| -> Result<f64> {
        let prev_y = subject.outcomes[j - 2].unwrap() as u8 as f64;
        let p = model.hazard(dataset, subject, j, prev_y)?;
        if p <= 0.0 || p >= 1.0 {
            return Err(Error::DegenerateProbability(p));
        }
        Ok(p)
    };

    // nu = prod_{k=2}^{d-1} (1 - p_k) * p_d^{I(d <= n)}; completers carry
    // continuation factors only.
    let mut nu = 1.0;
    for k in 2..d.min(n + 1) {
        nu *= 1.0 - hazard_at(k)?;
    }
    if d <= n {
        nu *= hazard_at(d)?;
    }

    // Occasion-level recursion: w_1 = 1; each later observed occasion
    // multiplies by (1 - p_j); the last observed occasion of a dropout also
    // carries the dropout probability p_d. Inverting gives the weights.
    let occasions: Vec<usize> = (0..n).filter(|&j| subject.outcomes[j].is_some()).collect();
    let mut cumulative = Vec::with_capacity(occasions.len());
    let mut c = 1.0;
    for (idx, &j0) in occasions.iter().enumerate() {
        let j = j0 + 1; // 1-based occasion
        if j >= 2 {
            c *= 1.0 - hazard_at(j)?;
        }
        let last_observed = idx == occasions.len() - 1;
        if last_observed && d <= n {
            c *= hazard_at(d)?;
        }
        cumulative.push(c);
    }
    let occasion_weights: Vec<f64> = cumulative.iter().map(|c| 1.0 / c).collect();
    Ok(SubjectWeightEntry {
        nu,
        weight: 1.0 / nu,
        occasions,
        cumulative,
        occasion_weights,
    })
}

fn build_weight_set(
    model: &DropoutModel,
    dataset: &LongDataset,
    mode: WeightMode,
) -> Result<WeightSet> {
    let mut by_subject = BTreeMap::new();
    for s in &dataset.subjects {
        by_subject.insert(s.id.clone(), subject_entry(model, dataset, s)?);
    }
    Ok(WeightSet { mode, by_subject })
}

/// Subject-level weights 1 / nu_{i d_i}.
pub fn subject_weights(model: &DropoutModel, dataset: &LongDataset) -> Result<WeightSet> {
    build_weight_set(model, dataset, WeightMode::Subject)
}

/// Occasion-level weights from the cumulative-probability recursion.
pub fn occasion_weights(model: &DropoutModel, dataset: &LongDataset) -> Result<WeightSet> {
    build_weight_set(model, dataset, WeightMode::Occasion)
}

/// Dropout-time distribution implied by a hazard sequence p_2..p_n:
/// P[D = d] for d = 2..n+1, the last entry being the completer probability.
/// The entries sum to one for any hazard vector.
pub fn dropout_time_distribution(hazards: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(hazards.len() + 1);
    let mut survive = 1.0;
    for &p in hazards {
        out.push(survive * p);
        survive *= 1.0 - p;
    }
    out.push(survive);
    out
}

/// Summary of what [`prepare_for_wgee`] changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WgeePrepReport {
    /// Observations discarded while monotonizing intermittent profiles.
    pub truncated_observations: usize,
    /// Subjects excluded because occasion 1 is unobserved.
    pub excluded_subjects: usize,
}

/// Monotonize and drop subjects whose first occasion is unobserved, the
/// form the dropout model and weights require.
pub fn prepare_for_wgee(dataset: &LongDataset) -> (LongDataset, WgeePrepReport) {
    let (mut mono, truncated) = monotonize(dataset);
    let before = mono.subjects.len();
    mono.subjects.retain(|s| s.outcomes[0].is_some());
    let excluded = before - mono.subjects.len();
    mono.recompute_arms();
    (
        mono,
        WgeePrepReport {
            truncated_observations: truncated,
            excluded_subjects: excluded,
        },
    )
}

/// Solve the weighted estimating equations with precomputed weights.
pub fn fit_wgee(
    dataset: &LongDataset,
    formula: &Formula,
    structure: CorrelationStructure,
    weights: &WeightSet,
) -> Result<GeeFit> {
    fit_wgee_with_options(dataset, formula, structure, weights, &GeeOptions::default())
}

pub fn fit_wgee_with_options(
    dataset: &LongDataset,
    formula: &Formula,
    structure: CorrelationStructure,
    weights: &WeightSet,
    options: &GeeOptions,
) -> Result<GeeFit> {
    let frame = build_design(dataset, formula)?;
    fit_gee_engine(&frame, structure, Some(weights), options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_long_csv, CovariateSchema, CovariateSpec};
    use approx::assert_abs_diff_eq;

    fn monotone_dataset() -> LongDataset {
        let schema = CovariateSchema {
            treatment: Some("trt".into()),
            treatment_reference: Some("C".into()),
            ..Default::default()
        };
        let csv = "id,occasion,trt,outcome\n\
                   a,1,C,1\na,2,C,0\na,3,C,1\na,4,C,1\n\
                   b,1,Z,0\nb,2,Z,1\nb,3,Z,NA\nb,4,Z,NA\n\
                   c,1,C,1\nc,2,C,NA\nc,3,C,NA\nc,4,C,NA\n";
        load_long_csv(csv.as_bytes(), &schema).unwrap()
    }

    #[test]
    fn completer_has_all_at_risk_rows_without_events() {
        let ds = monotone_dataset();
        let table = person_period_expand(&ds, &["trt".into()]).unwrap();
        let rows_a: Vec<_> = table.rows.iter().filter(|(id, _)| id == "a").collect();
        assert_eq!(rows_a.len(), 3);
        for (i, (_, j)) in table.rows.iter().enumerate() {
            if table.rows[i].0 == "a" {
                assert_eq!(table.drop[i], 0.0, "occasion {j}");
            }
        }
    }

    #[test]
    fn dropout_at_three_has_two_rows_with_terminal_event() {
        let ds = monotone_dataset();
        let table = person_period_expand(&ds, &["trt".into()]).unwrap();
        let rows_b: Vec<usize> = table
            .rows
            .iter()
            .enumerate()
            .filter(|(_, (id, _))| id == "b")
            .map(|(i, _)| i)
            .collect();
        assert_eq!(rows_b.len(), 2);
        assert_eq!(table.drop[rows_b[0]], 0.0);
        assert_eq!(table.drop[rows_b[1]], 1.0);
        assert_eq!(table.rows[rows_b[1]].1, 3);
    }

    #[test]
    fn intermittent_profile_is_rejected() {
        let schema = CovariateSchema::default();
        let csv = "id,occasion,outcome\na,1,1\na,2,NA\na,3,1\n";
        let ds = load_long_csv(csv.as_bytes(), &schema).unwrap();
        assert!(person_period_expand(&ds, &[]).is_err());
    }

    #[test]
    fn trial_covariate_set_gives_eight_columns() {
        // Treatment, three lesion dummies, two time dummies, previous
        // outcome and the intercept.
        let schema = CovariateSchema {
            treatment: Some("trt".into()),
            treatment_reference: Some("C".into()),
            covariates: vec![CovariateSpec::categorical("lesion")],
            ..Default::default()
        };
        let mut csv = String::from("id,occasion,trt,lesion,outcome\n");
        for i in 0..8 {
            let arm = if i % 2 == 0 { "C" } else { "Z" };
            let lesion = 1 + (i % 4);
            let nobs = 1 + (i % 4);
            for j in 1..=4 {
                let v = if j <= nobs { "1" } else { "NA" };
                csv.push_str(&format!("p{i},{j},{arm},{lesion},{v}\n"));
            }
        }
        let ds = load_long_csv(csv.as_bytes(), &schema).unwrap();
        let table = person_period_expand(&ds, &["trt".into(), "lesion".into()]).unwrap();
        assert_eq!(table.columns.len(), 8);
        assert_eq!(
            table.columns,
            vec![
                "Intercept",
                "prev_outcome",
                "trt[Z]",
                "lesion[2]",
                "lesion[3]",
                "lesion[4]",
                "time[3]",
                "time[4]"
            ]
        );
    }

    #[test]
    fn all_zero_drop_indicator_separates() {
        let schema = CovariateSchema::default();
        let csv = "id,occasion,outcome\n\
                   a,1,1\na,2,0\nb,1,0\nb,2,1\nc,1,1\nc,2,1\n";
        let ds = load_long_csv(csv.as_bytes(), &schema).unwrap();
        let table = person_period_expand(&ds, &[]).unwrap();
        assert!(table.drop.iter().all(|&d| d == 0.0));
        assert!(matches!(
            fit_dropout_model(&table),
            Err(Error::Separation { .. })
        ));
    }

    struct FixedHazards(Vec<(usize, f64)>);

    fn entry_from_hazards(
        outcomes: &[Option<bool>],
        hazards: &FixedHazards,
    ) -> SubjectWeightEntry {
        // Mirror of subject_entry with externally supplied hazards, used to
        // check the closed-form weight examples without a fitted model.
        let n = outcomes.len();
        let observed = outcomes.iter().filter(|o| o.is_some()).count();
        let d = if observed == n { n + 1 } else { observed + 1 };
        let h = |j: usize| hazards.0.iter().find(|(k, _)| *k == j).unwrap().1;
        let mut nu = 1.0;
        for k in 2..d.min(n + 1) {
            nu *= 1.0 - h(k);
        }
        if d <= n {
            nu *= h(d);
        }
        let occasions: Vec<usize> = (0..n).filter(|&j| outcomes[j].is_some()).collect();
        let mut cumulative = Vec::new();
        let mut c = 1.0;
        for (idx, &j0) in occasions.iter().enumerate() {
            let j = j0 + 1;
            if j >= 2 {
                c *= 1.0 - h(j);
            }
            if idx == occasions.len() - 1 && d <= n {
                c *= h(d);
            }
            cumulative.push(c);
        }
        let occasion_weights = cumulative.iter().map(|c| 1.0 / c).collect();
        SubjectWeightEntry {
            nu,
            weight: 1.0 / nu,
            occasions,
            cumulative,
            occasion_weights,
        }
    }

    #[test]
    fn completer_weight_uses_continuation_factors_only() {
        // Continuation probabilities (0.8, 0.9) for occasions 2 and 3.
        let e = entry_from_hazards(
            &[Some(true), Some(true), Some(true)],
            &FixedHazards(vec![(2, 0.2), (3, 0.1)]),
        );
        assert_abs_diff_eq!(e.nu, 0.72, epsilon = 1e-15);
        assert_abs_diff_eq!(e.weight, 1.0 / 0.72, epsilon = 1e-12);
        assert_eq!(e.cumulative.len(), 3);
        assert_abs_diff_eq!(e.cumulative[0], 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(e.cumulative[1], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(e.cumulative[2], 0.72, epsilon = 1e-15);
        assert_abs_diff_eq!(e.occasion_weights[1], 1.25, epsilon = 1e-12);
    }

    #[test]
    fn dropout_weight_multiplies_terminal_hazard() {
        // d = 3 in a length-4 sequence with p_2 = 0.2, p_3 = 0.1.
        let e = entry_from_hazards(
            &[Some(true), Some(false), None, None],
            &FixedHazards(vec![(2, 0.2), (3, 0.1)]),
        );
        assert_abs_diff_eq!(e.nu, 0.8 * 0.1, epsilon = 1e-15);
        // Cumulative at the final observed occasion equals nu.
        assert_abs_diff_eq!(*e.cumulative.last().unwrap(), e.nu, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_hazards_give_uniform_nu() {
        // n = 2, p = 0.5 everywhere: each dropout time has probability 0.5.
        for outcomes in [[Some(true), Some(false)], [Some(true), None]] {
            let e = entry_from_hazards(&outcomes, &FixedHazards(vec![(2, 0.5)]));
            assert_abs_diff_eq!(e.nu, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn first_occasion_weight_is_one() {
        let e = entry_from_hazards(
            &[Some(true), Some(true), None],
            &FixedHazards(vec![(2, 0.3), (3, 0.4)]),
        );
        assert_eq!(e.occasion_weights[0], 1.0);
    }

    #[test]
    fn dropout_distribution_sums_to_one() {
        let dist = dropout_time_distribution(&[0.2, 0.1, 0.35]);
        assert_eq!(dist.len(), 4);
        let total: f64 = dist.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn prepare_for_wgee_counts_changes() {
        let schema = CovariateSchema::default();
        let csv = "id,occasion,outcome\n\
                   a,1,1\na,2,NA\na,3,1\na,4,1\n\
                   b,1,NA\nb,2,1\nb,3,1\nb,4,1\n\
                   c,1,1\nc,2,1\nc,3,1\nc,4,1\n";
        let ds = load_long_csv(csv.as_bytes(), &schema).unwrap();
        let (prepared, report) = prepare_for_wgee(&ds);
        assert_eq!(report.truncated_observations, 2 + 3);
        assert_eq!(report.excluded_subjects, 1);
        assert_eq!(prepared.n_subjects(), 2);
    }
}
