//! Model formulas and design-matrix construction.
//!
//! The formula mini-language is `outcome ~ trt*visit + baseline*visit`
//! style: `+` separates terms, `a*b` expands to both main effects plus the
//! interaction, `a:b` is the bare interaction, a leading `0 +` suppresses
//! the intercept and `1` names it explicitly. `visit` always refers to the
//! occasion factor; the treatment variable is whatever column the dataset
//! schema declared. Visits are always categorical.
//!
//! Coding follows the usual conventions: categorical main effects are
//! reference-coded, except that the first categorical main term of an
//! intercept-free formula receives one column per level (which is how the
//! saturated per-occasion model `outcome ~ 0 + visit + visit:trt` obtains
//! its occasion-specific intercepts and treatment effects).

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};

use crate::dataset::{CovariateKind, LongDataset, SubjectRecord, Value};
use crate::error::{Error, Result};
use crate::linalg;

pub const VISIT_VAR: &str = "visit";

/// A parsed model term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Main(String),
    Interaction(String, String),
}

/// A parsed model formula.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub response: String,
    pub intercept: bool,
    pub terms: Vec<Term>,
}

impl Formula {
    /// The saturated per-occasion treatment model used by the trial tables.
    pub fn saturated() -> Self {
        parse_formula("outcome ~ 0 + visit + visit:trt").unwrap()
    }
}

impl std::str::FromStr for Formula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_formula(s)
    }
}

pub fn parse_formula(text: &str) -> Result<Formula> {
    let (lhs, rhs) = text
        .split_once('~')
        .ok_or_else(|| Error::Formula("expected `response ~ terms`".into()))?;
    let response = lhs.trim().to_string();
    if response != "outcome" {
        return Err(Error::Formula(format!(
            "unsupported response `{response}`; outcomes are always the `outcome` column"
        )));
    }
    let mut intercept = true;
    let mut terms: Vec<Term> = Vec::new();
    let push = |t: Term, terms: &mut Vec<Term>| {
        if !terms.contains(&t) {
            terms.push(t);
        }
    };
    for (k, raw) in rhs.split('+').enumerate() {
        let piece = raw.trim();
        if piece.is_empty() {
            return Err(Error::Formula("empty term".into()));
        }
        if piece == "0" {
            if k != 0 {
                return Err(Error::Formula("`0` must be the first term".into()));
            }
            intercept = false;
            continue;
        }
        if piece == "1" {
            intercept = true;
            continue;
        }
        let ident_ok = |s: &str| {
            !s.is_empty()
                && s.chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        };
        if let Some((a, b)) = piece.split_once('*') {
            let (a, b) = (a.trim(), b.trim());
            if !ident_ok(a) || !ident_ok(b) {
                return Err(Error::Formula(format!("cannot parse term `{piece}`")));
            }
            push(Term::Main(a.into()), &mut terms);
            push(Term::Main(b.into()), &mut terms);
            push(Term::Interaction(a.into(), b.into()), &mut terms);
        } else if let Some((a, b)) = piece.split_once(':') {
            let (a, b) = (a.trim(), b.trim());
            if !ident_ok(a) || !ident_ok(b) {
                return Err(Error::Formula(format!("cannot parse term `{piece}`")));
            }
            push(Term::Interaction(a.into(), b.into()), &mut terms);
        } else {
            if !ident_ok(piece) {
                return Err(Error::Formula(format!("cannot parse term `{piece}`")));
            }
            push(Term::Main(piece.into()), &mut terms);
        }
    }
    if terms.is_empty() && !intercept {
        return Err(Error::Formula("formula has no terms".into()));
    }
    Ok(Formula {
        response,
        intercept,
        terms,
    })
}

/// What a formula variable refers to.
#[derive(Debug, Clone, PartialEq, Eq)]
enum VarRole {
    Visit,
    Treatment,
    Continuous,
    Categorical,
}

/// The role and level (for factors) behind one multiplicative piece of a
/// design column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnPart {
    pub var: String,
    pub level: Option<String>,
    pub is_visit: bool,
    pub is_treatment: bool,
}

/// Metadata describing one design column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMeta {
    pub name: String,
    /// Empty for the intercept.
    pub parts: Vec<ColumnPart>,
}

impl ColumnMeta {
    pub fn visit_level(&self) -> Option<&str> {
        self.parts
            .iter()
            .find(|p| p.is_visit)
            .and_then(|p| p.level.as_deref())
    }

    pub fn treatment_level(&self) -> Option<&str> {
        self.parts
            .iter()
            .find(|p| p.is_treatment)
            .and_then(|p| p.level.as_deref())
    }

    pub fn involves_treatment(&self) -> bool {
        self.parts.iter().any(|p| p.is_treatment)
    }
}

/// Structured description of a built design: column metadata plus the level
/// sets contrasts need.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignInfo {
    pub columns: Vec<ColumnMeta>,
    pub visit_levels: Vec<String>,
    /// Arms with the reference first (empty when no treatment declared).
    pub arms: Vec<String>,
    pub treatment_var: Option<String>,
}

impl DesignInfo {
    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }
}

/// One subject's design block, restricted to rows with an outcome value.
#[derive(Debug, Clone)]
pub struct SubjectFrame {
    pub id: String,
    /// Occasion indices (into the dataset's occasion list) for each row.
    pub occasions: Vec<usize>,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub treatment: String,
}

/// Per-subject design matrices plus pooled views.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    pub info: DesignInfo,
    pub subjects: Vec<SubjectFrame>,
    pub n_occasions: usize,
}

impl ModelFrame {
    pub fn n_columns(&self) -> usize {
        self.info.columns.len()
    }

    pub fn n_rows(&self) -> usize {
        self.subjects.iter().map(|s| s.y.len()).sum()
    }

    /// Stack all subject blocks into one (X, y) pair.
    pub fn pooled(&self) -> (Array2<f64>, Array1<f64>) {
        let p = self.n_columns();
        let m = self.n_rows();
        let mut x = Array2::<f64>::zeros((m, p));
        let mut y = Array1::<f64>::zeros(m);
        let mut row = 0;
        for s in &self.subjects {
            for i in 0..s.y.len() {
                x.row_mut(row).assign(&s.x.row(i));
                y[row] = s.y[i];
                row += 1;
            }
        }
        (x, y)
    }
}

struct ResolvedVar {
    name: String,
    role: VarRole,
    /// Ordered levels (reference first) for factors.
    levels: Vec<String>,
}

fn resolve_var(dataset: &LongDataset, name: &str) -> Result<ResolvedVar> {
    if name == VISIT_VAR {
        return Ok(ResolvedVar {
            name: name.into(),
            role: VarRole::Visit,
            levels: dataset.occasions.clone(),
        });
    }
    if dataset.schema.treatment.as_deref() == Some(name) {
        if dataset.arms.is_empty() {
            return Err(Error::Formula(format!(
                "treatment variable `{name}` has no observed arms"
            )));
        }
        return Ok(ResolvedVar {
            name: name.into(),
            role: VarRole::Treatment,
            levels: dataset.arms.clone(),
        });
    }
    if let Some(spec) = dataset.schema.covariates.iter().find(|c| c.name == name) {
        return match spec.kind {
            CovariateKind::Continuous => Ok(ResolvedVar {
                name: name.into(),
                role: VarRole::Continuous,
                levels: vec![],
            }),
            CovariateKind::Categorical => {
                let mut levels: BTreeSet<String> = BTreeSet::new();
                for s in &dataset.subjects {
                    for j in 0..dataset.n_occasions() {
                        if let Some(Value::Cat(l)) = s.covariate_at(name, j) {
                            levels.insert(l.clone());
                        }
                    }
                }
                let mut levels: Vec<String> = levels.into_iter().collect();
                if let Some(r) = &spec.reference {
                    if let Some(pos) = levels.iter().position(|l| l == r) {
                        let r = levels.remove(pos);
                        levels.insert(0, r);
                    } else {
                        return Err(Error::Formula(format!(
                            "reference level `{r}` for `{name}` not present in the data"
                        )));
                    }
                }
                if levels.is_empty() {
                    return Err(Error::Formula(format!(
                        "categorical covariate `{name}` has no observed levels"
                    )));
                }
                Ok(ResolvedVar {
                    name: name.into(),
                    role: VarRole::Categorical,
                    levels,
                })
            }
        };
    }
    Err(Error::Formula(format!("unknown term `{name}`")))
}

fn factor_expansion(var: &ResolvedVar, full: bool) -> Vec<ColumnPart> {
    match var.role {
        VarRole::Continuous => vec![ColumnPart {
            var: var.name.clone(),
            level: None,
            is_visit: false,
            is_treatment: false,
        }],
        _ => {
            let levels: Vec<&String> = if full {
                var.levels.iter().collect()
            } else {
                var.levels.iter().skip(1).collect()
            };
            levels
                .into_iter()
                .map(|l| ColumnPart {
                    var: var.name.clone(),
                    level: Some(l.clone()),
                    is_visit: var.role == VarRole::Visit,
                    is_treatment: var.role == VarRole::Treatment,
                })
                .collect()
        }
    }
}

fn part_name(p: &ColumnPart) -> String {
    match &p.level {
        Some(l) => format!("{}[{}]", p.var, l),
        None => p.var.clone(),
    }
}

fn part_value(
    dataset: &LongDataset,
    subject: &SubjectRecord,
    j: usize,
    p: &ColumnPart,
) -> Result<f64> {
    if p.is_visit {
        return Ok((dataset.occasions[j] == *p.level.as_ref().unwrap()) as u8 as f64);
    }
    if p.is_treatment {
        return Ok((subject.treatment == *p.level.as_ref().unwrap()) as u8 as f64);
    }
    let value = subject
        .covariate_at(&p.var, j)
        .ok_or_else(|| Error::MissingCovariate {
            name: p.var.clone(),
            id: subject.id.clone(),
            occasion: dataset.occasions[j].clone(),
        })?;
    match (value, &p.level) {
        (Value::Num(v), None) => Ok(*v),
        (Value::Cat(l), Some(level)) => Ok((l == level) as u8 as f64),
        _ => Err(Error::Invalid(format!(
            "covariate `{}` has a value of the wrong kind for subject `{}`",
            p.var, subject.id
        ))),
    }
}

/// Build per-subject design matrices for every observed (or imputed)
/// subject-occasion. Column order is deterministic: intercept first, then
/// term columns in formula order with factor levels in level order.
pub fn build_design(dataset: &LongDataset, formula: &Formula) -> Result<ModelFrame> {
    let mut columns: Vec<ColumnMeta> = Vec::new();
    if formula.intercept {
        columns.push(ColumnMeta {
            name: "Intercept".into(),
            parts: vec![],
        });
    }

    // The first categorical main term of an intercept-free formula is
    // fully coded; everything else is reference-coded.
    let mut full_coded: BTreeSet<String> = BTreeSet::new();
    let mut absorbed_intercept = formula.intercept;
    for term in &formula.terms {
        match term {
            Term::Main(name) => {
                let var = resolve_var(dataset, name)?;
                let full = !absorbed_intercept && var.role != VarRole::Continuous;
                if full {
                    full_coded.insert(name.clone());
                    absorbed_intercept = true;
                }
                for part in factor_expansion(&var, full) {
                    columns.push(ColumnMeta {
                        name: part_name(&part),
                        parts: vec![part],
                    });
                }
            }
            Term::Interaction(a, b) => {
                let va = resolve_var(dataset, a)?;
                let vb = resolve_var(dataset, b)?;
                let ea = factor_expansion(&va, full_coded.contains(a));
                let eb = factor_expansion(&vb, full_coded.contains(b));
                for pa in &ea {
                    for pb in &eb {
                        columns.push(ColumnMeta {
                            name: format!("{}:{}", part_name(pa), part_name(pb)),
                            parts: vec![pa.clone(), pb.clone()],
                        });
                    }
                }
            }
        }
    }
    if columns.is_empty() {
        return Err(Error::Formula("design has no columns".into()));
    }

    let p = columns.len();
    let mut subjects = Vec::with_capacity(dataset.n_subjects());
    for s in &dataset.subjects {
        let occasions: Vec<usize> = (0..dataset.n_occasions())
            .filter(|&j| s.outcomes[j].is_some())
            .collect();
        let mut x = Array2::<f64>::zeros((occasions.len(), p));
        let mut y = Array1::<f64>::zeros(occasions.len());
        for (row, &j) in occasions.iter().enumerate() {
            y[row] = s.outcomes[j].unwrap() as u8 as f64;
            for (c, meta) in columns.iter().enumerate() {
                let mut v = 1.0;
                for part in &meta.parts {
                    v *= part_value(dataset, s, j, part)?;
                }
                x[[row, c]] = v;
            }
        }
        subjects.push(SubjectFrame {
            id: s.id.clone(),
            occasions,
            x,
            y,
            treatment: s.treatment.clone(),
        });
    }

    let info = DesignInfo {
        columns,
        visit_levels: dataset.occasions.clone(),
        arms: dataset.arms.clone(),
        treatment_var: dataset.schema.treatment.clone(),
    };
    let frame = ModelFrame {
        info,
        subjects,
        n_occasions: dataset.n_occasions(),
    };

    // Collinearity check on the pooled Gram matrix.
    let (x, _) = frame.pooled();
    if x.nrows() > 0 {
        let gram = x.t().dot(&x);
        let mut fail = 0usize;
        if linalg::cholesky_with_tol(gram.view(), 1e-10, &mut fail).is_none() {
            return Err(Error::Collinear(frame.info.columns[fail].name.clone()));
        }
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_long_csv, CovariateSchema, CovariateSpec};

    fn two_arm_dataset() -> LongDataset {
        let schema = CovariateSchema {
            treatment: Some("trt".into()),
            treatment_reference: Some("C".into()),
            covariates: vec![CovariateSpec::continuous("baseline")],
            occasions: None,
        };
        let mut csv = String::from("id,occasion,trt,baseline,outcome\n");
        for i in 0..12 {
            let arm = if i % 2 == 0 { "C" } else { "Z" };
            let base = 50.0 + i as f64;
            for j in 1..=4 {
                let y = (i + j) % 2;
                csv.push_str(&format!("s{i},{j},{arm},{base},{y}\n"));
            }
        }
        load_long_csv(csv.as_bytes(), &schema).unwrap()
    }

    #[test]
    fn saturated_two_arm_four_visit_design_has_eight_columns() {
        let ds = two_arm_dataset();
        let frame = build_design(&ds, &Formula::saturated()).unwrap();
        assert_eq!(frame.n_columns(), 8);
        let names = frame.info.column_names();
        assert_eq!(names[0], "visit[1]");
        assert_eq!(names[4], "visit[1]:trt[Z]");
    }

    #[test]
    fn intercept_only_formula_gives_single_column_of_ones() {
        let ds = two_arm_dataset();
        let frame = build_design(&ds, &parse_formula("outcome ~ 1").unwrap()).unwrap();
        assert_eq!(frame.n_columns(), 1);
        let (x, _) = frame.pooled();
        assert!(x.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn three_arm_main_effect_uses_reference_coding() {
        let schema = CovariateSchema {
            treatment: Some("trt".into()),
            ..Default::default()
        };
        let mut csv = String::from("id,occasion,trt,outcome\n");
        for (i, arm) in ["A1", "B", "C"].iter().cycle().take(9).enumerate() {
            csv.push_str(&format!("s{i},1,{arm},{}\n", i % 2));
        }
        let ds = load_long_csv(csv.as_bytes(), &schema).unwrap();
        let frame = build_design(&ds, &parse_formula("outcome ~ trt").unwrap()).unwrap();
        // Intercept plus two dummies; A1 is the alphabetical reference.
        assert_eq!(frame.n_columns(), 3);
        assert_eq!(frame.info.column_names(), vec!["Intercept", "trt[B]", "trt[C]"]);
    }

    #[test]
    fn star_expands_to_mains_plus_interaction() {
        let ds = two_arm_dataset();
        let f = parse_formula("outcome ~ trt*visit + baseline*visit").unwrap();
        let frame = build_design(&ds, &f).unwrap();
        // 1 + 1 + 3 + 3 + 1 + 3 = 12 columns for 2 arms x 4 visits.
        assert_eq!(frame.n_columns(), 12);
    }

    #[test]
    fn unknown_term_is_rejected() {
        let ds = two_arm_dataset();
        let err = build_design(&ds, &parse_formula("outcome ~ nosuch").unwrap()).unwrap_err();
        assert!(matches!(err, Error::Formula(_)));
    }

    #[test]
    fn collinear_expansion_is_rejected() {
        let ds = two_arm_dataset();
        // Full visit coding plus an intercept is exactly collinear.
        let err = build_design(&ds, &parse_formula("outcome ~ 0 + visit + trt*visit").unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::Collinear(_)));
    }

    #[test]
    fn design_rows_follow_observed_occasions() {
        let schema = CovariateSchema {
            treatment: Some("trt".into()),
            ..Default::default()
        };
        let csv = "id,occasion,trt,outcome\n\
                   a,1,C,1\na,2,C,NA\na,3,C,0\na,4,C,NA\n";
        let ds = load_long_csv(csv.as_bytes(), &schema).unwrap();
        let frame = build_design(&ds, &parse_formula("outcome ~ 1").unwrap()).unwrap();
        assert_eq!(frame.subjects[0].occasions, vec![0, 2]);
        assert_eq!(frame.subjects[0].y.to_vec(), vec![1.0, 0.0]);
    }
}
