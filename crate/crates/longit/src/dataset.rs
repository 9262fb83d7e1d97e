//! Long-format longitudinal data and missingness bookkeeping.
//!
//! A [`LongDataset`] holds one outcome slot per subject per protocol
//! occasion. Missingness is derived, never stored: [`missingness_profile`]
//! computes the observation indicators, the dropout index and the pattern
//! class for a subject, and [`pattern_table`] tabulates pattern frequencies
//! over a whole dataset.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Covariate measurement kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateKind {
    Continuous,
    Categorical,
}

/// Declaration of a single covariate column.
#[derive(Debug, Clone)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    /// Reference level for categorical covariates; defaults to the
    /// alphabetically first observed level.
    pub reference: Option<String>,
    pub time_varying: bool,
}

impl CovariateSpec {
    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Continuous,
            reference: None,
            time_varying: false,
        }
    }

    pub fn categorical(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Categorical,
            reference: None,
            time_varying: false,
        }
    }
}

/// Column declarations for [`load_long_csv`].
#[derive(Debug, Clone, Default)]
pub struct CovariateSchema {
    /// Name of the column holding the treatment arm, if any.
    pub treatment: Option<String>,
    /// Reference arm; defaults to the alphabetically first arm.
    pub treatment_reference: Option<String>,
    pub covariates: Vec<CovariateSpec>,
    /// Declared occasion labels in protocol order. When absent, the labels
    /// found in the file are used, sorted numerically when possible.
    pub occasions: Option<Vec<String>>,
}

/// A covariate value: numeric or a categorical level.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Cat(String),
}

/// Subject-constant or per-occasion covariate storage.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateValue {
    Fixed(Value),
    Varying(Vec<Option<Value>>),
}

/// One subject's outcome sequence and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Length-n outcome slots; `None` marks a missing measurement.
    pub outcomes: Vec<Option<bool>>,
    /// Treatment arm label; empty when the dataset declares no treatment.
    pub treatment: String,
    pub covariates: BTreeMap<String, CovariateValue>,
}

impl SubjectRecord {
    pub fn covariate_at(&self, name: &str, occasion: usize) -> Option<&Value> {
        match self.covariates.get(name) {
            Some(CovariateValue::Fixed(v)) => Some(v),
            Some(CovariateValue::Varying(vs)) => vs.get(occasion).and_then(|v| v.as_ref()),
            None => None,
        }
    }

    pub fn n_observed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_some()).count()
    }
}

/// Subjects-by-occasions grid of binary outcomes.
#[derive(Debug, Clone)]
pub struct LongDataset {
    pub subjects: Vec<SubjectRecord>,
    /// Ordered occasion labels; its length is the common sequence length n.
    pub occasions: Vec<String>,
    pub schema: CovariateSchema,
    /// Distinct arm labels with the reference arm first.
    pub arms: Vec<String>,
}

impl LongDataset {
    pub fn n_occasions(&self) -> usize {
        self.occasions.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Rebuild the arm list from the current subjects, keeping the declared
    /// reference in front when it is still present.
    pub(crate) fn recompute_arms(&mut self) {
        let mut arms: Vec<String> = self
            .subjects
            .iter()
            .map(|s| s.treatment.clone())
            .filter(|t| !t.is_empty())
            .collect();
        arms.sort();
        arms.dedup();
        if let Some(r) = &self.schema.treatment_reference {
            if let Some(pos) = arms.iter().position(|a| a == r) {
                let r = arms.remove(pos);
                arms.insert(0, r);
            }
        }
        self.arms = arms;
    }
}

/// Pattern classes for a subject's observation sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Complete,
    MonotoneDropout,
    Intermittent,
    AllMissing,
}

/// Observation indicators, dropout index and pattern class for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessProfile {
    /// r[j] is true iff the outcome at occasion j was observed.
    pub r: Vec<bool>,
    /// First missed occasion, 1-based, with n+1 for completers. Profiles
    /// missing occasion 1 (including all-missing ones) get d = 2 so the
    /// index stays inside its {2, ..., n+1} domain; they contribute nothing
    /// to estimation anyway.
    pub d: usize,
    pub pattern: Pattern,
}

impl MissingnessProfile {
    pub fn pattern_string(&self) -> String {
        self.r.iter().map(|&o| if o { 'O' } else { 'M' }).collect()
    }
}

/// Derive indicators, dropout index and pattern for one subject.
pub fn missingness_profile(subject: &SubjectRecord) -> MissingnessProfile {
    let r: Vec<bool> = subject.outcomes.iter().map(|o| o.is_some()).collect();
    let n = r.len();
    let observed = r.iter().filter(|&&o| o).count();
    let prefix = r.iter().take_while(|&&o| o).count();
    let monotone = !r.windows(2).any(|w| !w[0] && w[1]);
    let pattern = if observed == n {
        Pattern::Complete
    } else if observed == 0 {
        Pattern::AllMissing
    } else if monotone {
        Pattern::MonotoneDropout
    } else {
        Pattern::Intermittent
    };
    let d = match pattern {
        Pattern::Complete => n + 1,
        _ => (prefix + 1).max(2),
    };
    MissingnessProfile { r, d, pattern }
}

/// One row of the pattern frequency table.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternRow {
    pub pattern: String,
    pub class: Pattern,
    pub count: usize,
    pub percent: f64,
}

/// Tabulate distinct observation patterns with counts and percentages.
///
/// Rows are ordered the way the trial overview tables present them:
/// completers, then monotone dropouts by decreasing observed prefix (the
/// all-missing pattern last among dropouts), then intermittent patterns.
pub fn pattern_table(dataset: &LongDataset) -> Vec<PatternRow> {
    let n_total = dataset.n_subjects();
    let mut counts: BTreeMap<String, (Pattern, usize)> = BTreeMap::new();
    for s in &dataset.subjects {
        let prof = missingness_profile(s);
        let entry = counts
            .entry(prof.pattern_string())
            .or_insert((prof.pattern, 0));
        entry.1 += 1;
    }
    let mut rows: Vec<PatternRow> = counts
        .into_iter()
        .map(|(pattern, (class, count))| PatternRow {
            pattern,
            class,
            count,
            percent: 100.0 * count as f64 / n_total as f64,
        })
        .collect();
    let class_rank = |c: Pattern| match c {
        Pattern::Complete => 0usize,
        Pattern::MonotoneDropout | Pattern::AllMissing => 1,
        Pattern::Intermittent => 2,
    };
    rows.sort_by(|a, b| {
        let prefix = |p: &str| p.chars().take_while(|&c| c == 'O').count();
        let observed = |p: &str| p.chars().filter(|&c| c == 'O').count();
        class_rank(a.class)
            .cmp(&class_rank(b.class))
            .then(prefix(&b.pattern).cmp(&prefix(&a.pattern)))
            .then(observed(&b.pattern).cmp(&observed(&a.pattern)))
            .then(a.pattern.cmp(&b.pattern))
    });
    rows
}

const OUTCOME_NA: &str = "NA";

fn parse_outcome(raw: &str, id: &str, occasion: &str) -> Result<Option<bool>> {
    match raw.trim() {
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        OUTCOME_NA => Ok(None),
        other => Err(Error::InvalidOutcome {
            id: id.to_string(),
            occasion: occasion.to_string(),
            value: other.to_string(),
        }),
    }
}

fn occasion_order(labels: &mut Vec<String>) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.parse::<f64>().ok()).collect();
    match numeric {
        Some(vals) => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
            *labels = idx.iter().map(|&i| labels[i].clone()).collect();
        }
        None => labels.sort(),
    }
}

struct RawRow {
    id: String,
    occasion: String,
    outcome: String,
    treatment: Option<String>,
    covariates: Vec<Option<String>>,
}

/// Load a long-format CSV: one row per subject-occasion, header columns
/// `id`, `occasion`, `outcome`, plus the schema's covariate columns. The
/// literal `NA` marks a missing outcome; absent (id, occasion) rows are
/// missing as well.
pub fn load_long_csv<R: Read>(source: R, schema: &CovariateSchema) -> Result<LongDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col("id")?;
    let occ_col = col("occasion")?;
    let out_col = col("outcome")?;
    let trt_col = match &schema.treatment {
        Some(name) => Some(col(name)?),
        None => None,
    };
    let cov_cols: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col(&c.name))
        .collect::<Result<_>>()?;

    let mut raw_rows: Vec<RawRow> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("").to_string();
        raw_rows.push(RawRow {
            id: get(id_col),
            occasion: get(occ_col),
            outcome: get(out_col),
            treatment: trt_col.map(get),
            covariates: cov_cols.iter().map(|&i| Some(get(i))).collect(),
        });
    }

    let occasions = match &schema.occasions {
        Some(declared) => {
            for row in &raw_rows {
                if !declared.contains(&row.occasion) {
                    return Err(Error::UnknownOccasion(row.occasion.clone()));
                }
            }
            declared.clone()
        }
        None => {
            let mut labels: Vec<String> = raw_rows.iter().map(|r| r.occasion.clone()).collect();
            labels.sort();
            labels.dedup();
            occasion_order(&mut labels);
            labels
        }
    };
    let n = occasions.len();
    let occ_index: BTreeMap<&str, usize> = occasions
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();

    let mut order: Vec<String> = Vec::new();
    let mut subjects: BTreeMap<String, SubjectRecord> = BTreeMap::new();
    let mut seen: BTreeMap<(String, usize), ()> = BTreeMap::new();

    for row in &raw_rows {
        let j = *occ_index.get(row.occasion.as_str()).unwrap();
        if seen.insert((row.id.clone(), j), ()).is_some() {
            return Err(Error::DuplicateRow {
                id: row.id.clone(),
                occasion: row.occasion.clone(),
            });
        }
        if !subjects.contains_key(&row.id) {
            order.push(row.id.clone());
            subjects.insert(
                row.id.clone(),
                SubjectRecord {
                    id: row.id.clone(),
                    outcomes: vec![None; n],
                    treatment: String::new(),
                    covariates: BTreeMap::new(),
                },
            );
        }
        let subject = subjects.get_mut(&row.id).unwrap();
        subject.outcomes[j] = parse_outcome(&row.outcome, &row.id, &row.occasion)?;

        if let Some(t) = &row.treatment {
            if t != OUTCOME_NA && !t.is_empty() {
                if subject.treatment.is_empty() {
                    subject.treatment = t.clone();
                } else if &subject.treatment != t {
                    return Err(Error::InconstantCovariate {
                        name: schema.treatment.clone().unwrap_or_default(),
                        id: row.id.clone(),
                    });
                }
            }
        }

        for (spec, cell) in schema.covariates.iter().zip(&row.covariates) {
            let cell = cell.as_deref().unwrap_or("");
            if cell.is_empty() || cell == OUTCOME_NA {
                continue;
            }
            let value = match spec.kind {
                CovariateKind::Continuous => Value::Num(cell.parse::<f64>().map_err(|_| {
                    Error::Invalid(format!(
                        "covariate `{}` value `{}` is not numeric (subject `{}`)",
                        spec.name, cell, row.id
                    ))
                })?),
                CovariateKind::Categorical => Value::Cat(cell.to_string()),
            };
            if spec.time_varying {
                let slot = subject
                    .covariates
                    .entry(spec.name.clone())
                    .or_insert_with(|| CovariateValue::Varying(vec![None; n]));
                if let CovariateValue::Varying(vs) = slot {
                    vs[j] = Some(value);
                }
            } else {
                match subject.covariates.get(&spec.name) {
                    None => {
                        subject
                            .covariates
                            .insert(spec.name.clone(), CovariateValue::Fixed(value));
                    }
                    Some(CovariateValue::Fixed(existing)) if *existing == value => {}
                    Some(_) => {
                        return Err(Error::InconstantCovariate {
                            name: spec.name.clone(),
                            id: row.id.clone(),
                        })
                    }
                }
            }
        }
    }

    let subjects: Vec<SubjectRecord> = order.into_iter().map(|id| subjects[&id].clone()).collect();
    let mut dataset = LongDataset {
        subjects,
        occasions,
        schema: schema.clone(),
        arms: Vec::new(),
    };
    dataset.recompute_arms();
    if let Some(r) = &dataset.schema.treatment_reference {
        if !dataset.arms.is_empty() && &dataset.arms[0] != r {
            return Err(Error::Invalid(format!(
                "declared reference arm `{r}` does not occur in the data"
            )));
        }
    }
    Ok(dataset)
}

/// Write a dataset back out in the long CSV format accepted by
/// [`load_long_csv`]. Columns appear as id, occasion, treatment (if any),
/// covariates in schema order, outcome.
pub fn write_long_csv<W: Write>(dataset: &LongDataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["id".to_string(), "occasion".to_string()];
    if let Some(t) = &dataset.schema.treatment {
        header.push(t.clone());
    }
    for c in &dataset.schema.covariates {
        header.push(c.name.clone());
    }
    header.push("outcome".to_string());
    w.write_record(&header)?;

    let fmt = |v: &Value| match v {
        Value::Num(x) => format!("{x}"),
        Value::Cat(s) => s.clone(),
    };
    for s in &dataset.subjects {
        for (j, label) in dataset.occasions.iter().enumerate() {
            let mut row = vec![s.id.clone(), label.clone()];
            if dataset.schema.treatment.is_some() {
                row.push(s.treatment.clone());
            }
            for c in &dataset.schema.covariates {
                row.push(
                    s.covariate_at(&c.name, j)
                        .map(fmt)
                        .unwrap_or_else(|| OUTCOME_NA.to_string()),
                );
            }
            row.push(match s.outcomes[j] {
                Some(true) => "1".to_string(),
                Some(false) => "0".to_string(),
                None => OUTCOME_NA.to_string(),
            });
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn subject(id: &str, outcomes: &[Option<bool>]) -> SubjectRecord {
        SubjectRecord {
            id: id.to_string(),
            outcomes: outcomes.to_vec(),
            treatment: String::new(),
            covariates: BTreeMap::new(),
        }
    }

    const O: Option<bool> = Some(true);
    const M: Option<bool> = None;

    #[test]
    fn profile_of_monotone_dropout() {
        let p = missingness_profile(&subject("a", &[O, O, O, M]));
        assert_eq!(p.r, vec![true, true, true, false]);
        assert_eq!(p.d, 4);
        assert_eq!(p.pattern, Pattern::MonotoneDropout);
    }

    #[test]
    fn profile_of_intermittent() {
        let p = missingness_profile(&subject("a", &[O, O, M, O]));
        assert_eq!(p.pattern, Pattern::Intermittent);
    }

    #[test]
    fn profile_of_completer_uses_n_plus_one() {
        let p = missingness_profile(&subject("a", &[O, O, O, O]));
        assert_eq!(p.d, 5);
        assert_eq!(p.pattern, Pattern::Complete);
    }

    #[test]
    fn profile_of_all_missing() {
        let p = missingness_profile(&subject("a", &[M, M, M]));
        assert_eq!(p.pattern, Pattern::AllMissing);
        assert_eq!(p.d, 2);
    }

    #[test]
    fn classification_matches_brute_force_scan() {
        // Enumerate every profile of length <= 6 and compare against a
        // stand-alone scan over observation runs.
        for n in 1..=6usize {
            for mask in 0..(1u32 << n) {
                let outcomes: Vec<Option<bool>> =
                    (0..n).map(|j| (mask >> j) & 1 == 1).map(|o| if o { O } else { M }).collect();
                let p = missingness_profile(&subject("x", &outcomes));
                let obs: Vec<bool> = outcomes.iter().map(|o| o.is_some()).collect();
                let expected = if obs.iter().all(|&o| o) {
                    Pattern::Complete
                } else if obs.iter().all(|&o| !o) {
                    Pattern::AllMissing
                } else {
                    let mut seen_gap = false;
                    let mut intermittent = false;
                    for &o in &obs {
                        if !o {
                            seen_gap = true;
                        } else if seen_gap {
                            intermittent = true;
                        }
                    }
                    if intermittent {
                        Pattern::Intermittent
                    } else {
                        Pattern::MonotoneDropout
                    }
                };
                assert_eq!(p.pattern, expected, "profile {mask:b} n={n}");
                assert!((2..=n + 1).contains(&p.d));
                assert_eq!(p.pattern == Pattern::Complete, obs.iter().filter(|&&o| o).count() == n);
                assert_eq!(p.pattern == Pattern::AllMissing, obs.iter().all(|&o| !o));
            }
        }
    }

    #[test]
    fn load_all_na_subject() {
        let csv = "id,occasion,outcome\ns1,1,NA\ns1,2,NA\ns1,3,NA\ns1,4,NA\n";
        let ds = load_long_csv(csv.as_bytes(), &CovariateSchema::default()).unwrap();
        assert_eq!(ds.n_subjects(), 1);
        assert_eq!(ds.n_occasions(), 4);
        assert!(ds.subjects[0].outcomes.iter().all(|o| o.is_none()));
    }

    #[test]
    fn load_rejects_outcome_out_of_domain() {
        let csv = "id,occasion,outcome\ns1,1,2\n";
        let err = load_long_csv(csv.as_bytes(), &CovariateSchema::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidOutcome { .. }));
    }

    #[test]
    fn load_rejects_duplicate_rows() {
        let csv = "id,occasion,outcome\ns1,1,0\ns1,1,1\n";
        let err = load_long_csv(csv.as_bytes(), &CovariateSchema::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicateRow { .. }));
    }

    #[test]
    fn load_rejects_unknown_occasion() {
        let schema = CovariateSchema {
            occasions: Some(vec!["1".into(), "2".into()]),
            ..Default::default()
        };
        let csv = "id,occasion,outcome\ns1,1,0\ns1,3,1\n";
        let err = load_long_csv(csv.as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::UnknownOccasion(_)));
    }

    #[test]
    fn absent_rows_are_missing_outcomes() {
        let csv = "id,occasion,outcome\ns1,1,1\ns1,4,0\ns2,1,0\ns2,2,0\ns2,3,1\ns2,4,1\n";
        let ds = load_long_csv(csv.as_bytes(), &CovariateSchema::default()).unwrap();
        assert_eq!(ds.subjects[0].outcomes, vec![O, M, M, Some(false)]);
    }

    #[test]
    fn pattern_table_single_completer() {
        let csv = "id,occasion,outcome\ns1,1,1\ns1,2,0\ns1,3,0\ns1,4,1\n";
        let ds = load_long_csv(csv.as_bytes(), &CovariateSchema::default()).unwrap();
        let rows = pattern_table(&ds);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].pattern, "OOOO");
        assert_eq!(rows[0].count, 1);
        assert!((rows[0].percent - 100.0).abs() < 1e-12);
    }

    #[test]
    fn pattern_table_counts_sum_to_n() {
        let csv = "id,occasion,outcome\n\
                   a,1,1\na,2,NA\n\
                   b,1,0\nb,2,0\n\
                   c,1,NA\nc,2,1\n\
                   d,1,NA\nd,2,NA\n";
        let ds = load_long_csv(csv.as_bytes(), &CovariateSchema::default()).unwrap();
        let rows = pattern_table(&ds);
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 4);
        let pct: f64 = rows.iter().map(|r| r.percent).sum();
        assert!((pct - 100.0).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip_preserves_dataset() {
        let schema = CovariateSchema {
            treatment: Some("trt".into()),
            treatment_reference: Some("C".into()),
            covariates: vec![CovariateSpec::continuous("baseline")],
            occasions: None,
        };
        let csv = "id,occasion,trt,baseline,outcome\n\
                   s1,4,C,51.5,1\ns1,12,C,51.5,NA\n\
                   s2,4,Z,48.25,0\ns2,12,Z,48.25,1\n";
        let ds = load_long_csv(csv.as_bytes(), &schema).unwrap();
        let mut buf = Vec::new();
        write_long_csv(&ds, &mut buf).unwrap();
        let ds2 = load_long_csv(buf.as_slice(), &schema).unwrap();
        assert_eq!(ds.subjects, ds2.subjects);
        assert_eq!(ds.occasions, ds2.occasions);
        assert_eq!(ds.arms, vec!["C".to_string(), "Z".to_string()]);
    }
}
