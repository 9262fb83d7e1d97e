//! Hypothesis tests and contrasts over fitted models: joint and average
//! treatment-effect Wald tests, last-occasion contrasts, and the
//! single-time-point Pearson chi-squared and Freeman-Halton exact tests.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::dataset::LongDataset;
use crate::design::DesignInfo;
use crate::error::{Error, Result};
use crate::linalg;
use crate::prep::{complete_case, locf_impute};

/// Upper-tail chi-squared probability.
pub(crate) fn chi2_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive df");
    dist.sf(x)
}

/// A Wald-type test result.
#[derive(Debug, Clone)]
pub struct WaldResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// The scalar contrast value, reported when df = 1.
    pub estimate: Option<f64>,
    /// Its standard error, reported when df = 1.
    pub se: Option<f64>,
}

/// Wald test of H0: L beta = 0 with covariance V:
/// statistic = (L beta)' (L V L')^{-1} (L beta) on rows(L) degrees of
/// freedom.
pub fn wald_test(
    l: ArrayView2<f64>,
    beta: ArrayView1<f64>,
    covariance: ArrayView2<f64>,
) -> Result<WaldResult> {
    let r = l.nrows();
    let p = l.ncols();
    if r == 0 {
        return Err(Error::Invalid("empty contrast matrix".into()));
    }
    if beta.len() != p || covariance.nrows() != p || covariance.ncols() != p {
        return Err(Error::Invalid("dimension mismatch in wald_test".into()));
    }
    let lb = l.dot(&beta);
    let lvl = linalg::symmetrize(&l.dot(&covariance).dot(&l.t()));
    let solved = linalg::spd_solve(lvl.view(), lb.view(), "L V L'")?;
    let statistic = lb.dot(&solved).max(0.0);
    let p_value = chi2_sf(statistic, r);
    let (estimate, se) = if r == 1 {
        (Some(lb[0]), Some(lvl[[0, 0]].sqrt()))
    } else {
        (None, None)
    };
    Ok(WaldResult {
        statistic,
        df: r,
        p_value,
        estimate,
        se,
    })
}

/// Contrast families over a saturated treatment-by-visit fit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContrastKind {
    /// Per-visit treatment effects stacked; all non-reference arms when
    /// `arm` is None.
    Joint { arm: Option<String> },
    /// Equal-weight average of the per-visit effects; one row per arm.
    Average { arm: Option<String> },
    /// Treatment effect(s) at the final visit.
    LastOccasion,
}

/// Row picking out the effect of `arm` at `visit`: the treatment main
/// column (when reference-coded) plus the matching interaction column.
fn effect_row(info: &DesignInfo, arm: &str, visit: &str) -> Result<Array1<f64>> {
    let p = info.columns.len();
    let mut row = Array1::<f64>::zeros(p);
    let mut found = false;
    for (c, meta) in info.columns.iter().enumerate() {
        if !meta.involves_treatment() || meta.treatment_level() != Some(arm) {
            continue;
        }
        if meta
            .parts
            .iter()
            .any(|part| !part.is_treatment && !part.is_visit)
        {
            return Err(Error::Formula(
                "treatment interacts with a non-visit covariate; per-visit effects are undefined"
                    .into(),
            ));
        }
        match meta.visit_level() {
            None => {
                row[c] = 1.0;
                found = true;
            }
            Some(v) if v == visit => {
                row[c] = 1.0;
                found = true;
            }
            Some(_) => {}
        }
    }
    if !found {
        return Err(Error::Formula(format!(
            "formula lacks a treatment effect for arm `{arm}` at visit `{visit}`"
        )));
    }
    Ok(row)
}

/// Build the contrast matrix for the requested test over a fitted design.
pub fn build_contrasts(info: &DesignInfo, kind: &ContrastKind) -> Result<Array2<f64>> {
    if info.arms.len() < 2 {
        return Err(Error::Formula(
            "contrasts need at least two treatment arms".into(),
        ));
    }
    let arms: Vec<String> = info.arms.iter().skip(1).cloned().collect();
    let visits = &info.visit_levels;
    let p = info.columns.len();
    let chosen = |requested: &Option<String>| -> Result<Vec<String>> {
        match requested {
            Some(a) => {
                if arms.contains(a) {
                    Ok(vec![a.clone()])
                } else {
                    Err(Error::Formula(format!(
                        "arm `{a}` is not a non-reference arm"
                    )))
                }
            }
            None => Ok(arms.clone()),
        }
    };
    let rows: Vec<Array1<f64>> = match kind {
        ContrastKind::Joint { arm } => {
            let mut rows = Vec::new();
            for a in chosen(arm)? {
                for v in visits {
                    rows.push(effect_row(info, &a, v)?);
                }
            }
            rows
        }
        ContrastKind::Average { arm } => {
            let mut rows = Vec::new();
            for a in chosen(arm)? {
                let mut avg = Array1::<f64>::zeros(p);
                for v in visits {
                    avg = avg + effect_row(info, &a, v)?;
                }
                rows.push(avg / visits.len() as f64);
            }
            rows
        }
        ContrastKind::LastOccasion => {
            let last = visits
                .last()
                .ok_or_else(|| Error::Formula("no visits".into()))?;
            arms.iter()
                .map(|a| effect_row(info, a, last))
                .collect::<Result<_>>()?
        }
    };
    let mut l = Array2::<f64>::zeros((rows.len(), p));
    for (i, r) in rows.iter().enumerate() {
        l.row_mut(i).assign(r);
    }
    Ok(l)
}

/// A 2 x k success/failure table over treatment arms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    pub labels: Vec<String>,
    pub successes: Vec<u64>,
    pub failures: Vec<u64>,
}

impl CountTable {
    pub fn new(labels: Vec<String>, successes: Vec<u64>, failures: Vec<u64>) -> Result<Self> {
        if labels.len() != successes.len() || labels.len() != failures.len() {
            return Err(Error::Invalid("ragged contingency table".into()));
        }
        if labels.is_empty() {
            return Err(Error::Invalid("empty contingency table".into()));
        }
        Ok(Self {
            labels,
            successes,
            failures,
        })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.successes.iter().sum::<u64>() + self.failures.iter().sum::<u64>()
    }

    pub fn column_totals(&self) -> Vec<u64> {
        (0..self.k())
            .map(|j| self.successes[j] + self.failures[j])
            .collect()
    }

    pub fn row_totals(&self) -> (u64, u64) {
        (
            self.successes.iter().sum(),
            self.failures.iter().sum(),
        )
    }
}

/// Classical Pearson chi-squared test on a 2 x k table, df = k - 1.
pub fn pearson_chi2(table: &CountTable) -> Result<WaldResult> {
    let (r1, r2) = table.row_totals();
    let cols = table.column_totals();
    if r1 == 0 || r2 == 0 || cols.iter().any(|&c| c == 0) {
        return Err(Error::Invalid("zero margin in contingency table".into()));
    }
    let n = table.total() as f64;
    let mut statistic = 0.0;
    for j in 0..table.k() {
        let cj = cols[j] as f64;
        let e1 = r1 as f64 * cj / n;
        let e2 = r2 as f64 * cj / n;
        let o1 = table.successes[j] as f64;
        let o2 = table.failures[j] as f64;
        statistic += (o1 - e1).powi(2) / e1 + (o2 - e2).powi(2) / e2;
    }
    let df = table.k() - 1;
    Ok(WaldResult {
        statistic,
        df,
        p_value: chi2_sf(statistic, df),
        estimate: None,
        se: None,
    })
}

/// Enumeration bound for the exact test.
pub const FISHER_MAX_TOTAL: u64 = 500;

/// Freeman-Halton exact test on a 2 x k table.
///
/// Enumerates every table with the observed margins; the two-sided p-value
/// sums the probabilities of tables no more probable than the observed one
/// (with a 1e-12 relative slack for ties).
pub fn fisher_exact(table: &CountTable) -> Result<f64> {
    let n = table.total();
    if n > FISHER_MAX_TOTAL {
        return Err(Error::Invalid(format!(
            "table total {n} exceeds the exact enumeration bound {FISHER_MAX_TOTAL}"
        )));
    }
    let (r1, _) = table.row_totals();
    let cols = table.column_totals();
    let k = table.k();

    let lnfact: Vec<f64> = (0..=n as usize)
        .map(|m| ln_gamma(m as f64 + 1.0))
        .collect();
    let ln_choose = |n: u64, k: u64| -> f64 {
        lnfact[n as usize] - lnfact[k as usize] - lnfact[(n - k) as usize]
    };
    let ln_denom = ln_choose(n, r1);
    let log_prob = |top: &[u64]| -> f64 {
        let mut lp = -ln_denom;
        for j in 0..k {
            lp += ln_choose(cols[j], top[j]);
        }
        lp
    };

    let observed_lp = log_prob(&table.successes);
    let threshold = observed_lp + 1e-12;

    // Depth-first walk over the first row of the margin class.
    let suffix_capacity: Vec<u64> = {
        let mut acc = vec![0u64; k + 1];
        for j in (0..k).rev() {
            acc[j] = acc[j + 1] + cols[j];
        }
        acc
    };
    let mut top = vec![0u64; k];
    let mut p = 0.0f64;
    fn walk(
        j: usize,
        remaining: u64,
        k: usize,
        cols: &[u64],
        suffix_capacity: &[u64],
        top: &mut Vec<u64>,
        threshold: f64,
        log_prob: &dyn Fn(&[u64]) -> f64,
        p: &mut f64,
    ) {
        if j == k {
            debug_assert_eq!(remaining, 0);
            let lp = log_prob(top);
            if lp <= threshold {
                *p += lp.exp();
            }
            return;
        }
        let hi = cols[j].min(remaining);
        let lo = remaining.saturating_sub(suffix_capacity[j + 1]);
        for t in lo..=hi {
            top[j] = t;
            walk(
                j + 1,
                remaining - t,
                k,
                cols,
                suffix_capacity,
                top,
                threshold,
                log_prob,
                p,
            );
        }
    }
    walk(
        0,
        r1,
        k,
        &cols,
        &suffix_capacity,
        &mut top,
        threshold,
        &log_prob,
        &mut p,
    );
    Ok(p.min(1.0))
}

/// Total probability of the margin class, for consistency checks.
#[cfg(test)]
fn fisher_class_total(table: &CountTable) -> f64 {
    let (r1, _) = table.row_totals();
    let cols = table.column_totals();
    let k = table.k();
    let n = table.total();
    let lnfact: Vec<f64> = (0..=n as usize)
        .map(|m| ln_gamma(m as f64 + 1.0))
        .collect();
    let ln_choose =
        |n: u64, k: u64| lnfact[n as usize] - lnfact[k as usize] - lnfact[(n - k) as usize];
    let ln_denom = ln_choose(n, r1);
    let mut total = 0.0;
    let suffix: Vec<u64> = {
        let mut acc = vec![0u64; k + 1];
        for j in (0..k).rev() {
            acc[j] = acc[j + 1] + cols[j];
        }
        acc
    };
    fn walk(
        j: usize,
        remaining: u64,
        cols: &[u64],
        suffix: &[u64],
        lp: f64,
        ln_choose: &dyn Fn(u64, u64) -> f64,
        total: &mut f64,
    ) {
        if j == cols.len() {
            *total += lp.exp();
            return;
        }
        let hi = cols[j].min(remaining);
        let lo = remaining.saturating_sub(suffix[j + 1]);
        for t in lo..=hi {
            walk(
                j + 1,
                remaining - t,
                cols,
                suffix,
                lp + ln_choose(cols[j], t),
                ln_choose,
                total,
            );
        }
    }
    walk(0, r1, &cols, &suffix, -ln_denom, &ln_choose, &mut total);
    total
}

/// Which measurement the single-time-point comparison uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointView {
    LastPlanned,
    LastObserved,
}

/// How incomplete sequences are handled before the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointStrategy {
    CompleteCase,
    Locf,
}

/// A single-time-point treatment comparison.
#[derive(Debug, Clone)]
pub struct EndpointAnalysis {
    pub table: CountTable,
    pub chi2: WaldResult,
    pub fisher_p: f64,
    /// Subjects dropped because no endpoint value could be formed.
    pub dropped_subjects: usize,
}

/// Summarize the chosen endpoint as a 2 x k table over arms and run both
/// the Pearson chi-squared and the exact test.
///
/// Complete-case analysis is rejected under the last-observed view: every
/// subject with at least one measurement has a last observed value, so
/// restricting to completers has no coherent meaning there.
pub fn endpoint_analysis(
    dataset: &LongDataset,
    view: EndpointView,
    strategy: EndpointStrategy,
) -> Result<EndpointAnalysis> {
    if dataset.arms.is_empty() {
        return Err(Error::Invalid(
            "endpoint analysis needs a declared treatment column".into(),
        ));
    }
    let n = dataset.n_occasions();
    let (values, dropped): (Vec<(String, bool)>, usize) = match (view, strategy) {
        (EndpointView::LastObserved, EndpointStrategy::CompleteCase) => {
            return Err(Error::Invalid(
                "complete case is not an option under the last-observed view".into(),
            ))
        }
        (EndpointView::LastPlanned, EndpointStrategy::CompleteCase) => {
            let cc = complete_case(dataset)?;
            let vals = cc
                .subjects
                .iter()
                .map(|s| (s.treatment.clone(), s.outcomes[n - 1].unwrap()))
                .collect();
            (vals, dataset.n_subjects() - cc.n_subjects())
        }
        (EndpointView::LastPlanned, EndpointStrategy::Locf) => {
            let (filled, dropped) = locf_impute(dataset);
            let vals = filled
                .subjects
                .iter()
                .map(|s| (s.treatment.clone(), s.outcomes[n - 1].unwrap()))
                .collect();
            (vals, dropped)
        }
        (EndpointView::LastObserved, EndpointStrategy::Locf) => {
            let mut vals = Vec::new();
            let mut dropped = 0usize;
            for s in &dataset.subjects {
                match s.outcomes.iter().rev().flatten().next() {
                    Some(&v) => vals.push((s.treatment.clone(), v)),
                    None => dropped += 1,
                }
            }
            (vals, dropped)
        }
    };

    let labels = dataset.arms.clone();
    let mut successes = vec![0u64; labels.len()];
    let mut failures = vec![0u64; labels.len()];
    for (arm, value) in values {
        let j = labels
            .iter()
            .position(|l| *l == arm)
            .ok_or_else(|| Error::Invalid(format!("unknown arm `{arm}`")))?;
        if value {
            successes[j] += 1;
        } else {
            failures[j] += 1;
        }
    }
    let table = CountTable::new(labels, successes, failures)?;
    let chi2 = pearson_chi2(&table)?;
    let fisher_p = fisher_exact(&table)?;
    Ok(EndpointAnalysis {
        table,
        chi2,
        fisher_p,
        dropped_subjects: dropped,
    })
}
