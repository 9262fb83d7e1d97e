//! Data-handling strategies compared throughout the analyses: complete-case
//! deletion, last-observation-carried-forward imputation, the observed/
//! missing component split, and monotonization of intermittent profiles.
//!
//! All functions return new datasets; the input is never mutated, so one
//! load can feed CC, LOCF and observed-data analyses side by side.

use crate::dataset::{missingness_profile, LongDataset, Pattern, SubjectRecord};
use crate::error::{Error, Result};

/// Restrict a dataset to subjects with all occasions observed.
pub fn complete_case(dataset: &LongDataset) -> Result<LongDataset> {
    let mut out = dataset.clone();
    out.subjects
        .retain(|s| missingness_profile(s).pattern == Pattern::Complete);
    if out.subjects.is_empty() {
        return Err(Error::NoCompleters);
    }
    out.recompute_arms();
    Ok(out)
}

/// Carry the last observed value forward into every later missing slot.
///
/// Leading missing slots stay missing (there is no earlier value to carry),
/// and intermittent gaps are forward-filled the same way. Subjects with no
/// observed outcome at all are dropped; the second component counts them.
pub fn locf_impute(dataset: &LongDataset) -> (LongDataset, usize) {
    let mut out = dataset.clone();
    let mut dropped = 0usize;
    out.subjects = dataset
        .subjects
        .iter()
        .filter_map(|s| {
            if s.n_observed() == 0 {
                dropped += 1;
                return None;
            }
            let mut filled = s.clone();
            let mut last: Option<bool> = None;
            for slot in filled.outcomes.iter_mut() {
                match slot {
                    Some(v) => last = Some(*v),
                    None => *slot = last,
                }
            }
            Some(filled)
        })
        .collect();
    out.recompute_arms();
    (out, dropped)
}

/// Index-preserving partition of a subject's outcomes into observed and
/// missing components.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSplit {
    /// (occasion index, value) for every observed slot, in occasion order.
    pub observed: Vec<(usize, bool)>,
    /// Occasion indices of the missing slots, in occasion order.
    pub missing: Vec<usize>,
}

pub fn observed_split(subject: &SubjectRecord) -> ObservedSplit {
    let mut observed = Vec::new();
    let mut missing = Vec::new();
    for (j, slot) in subject.outcomes.iter().enumerate() {
        match slot {
            Some(v) => observed.push((j, *v)),
            None => missing.push(j),
        }
    }
    ObservedSplit { observed, missing }
}

/// Discard every observation after a subject's first gap, turning each
/// intermittent profile into a monotone one. Monotone subjects pass through
/// unchanged. Returns the new dataset and the number of discarded
/// observations; subjects missing occasion 1 lose everything under this
/// rule and stay in the dataset as all-missing profiles.
pub fn monotonize(dataset: &LongDataset) -> (LongDataset, usize) {
    let mut out = dataset.clone();
    let mut discarded = 0usize;
    for s in out.subjects.iter_mut() {
        let first_gap = s.outcomes.iter().position(|o| o.is_none());
        if let Some(g) = first_gap {
            for slot in s.outcomes.iter_mut().skip(g) {
                if slot.is_some() {
                    *slot = None;
                    discarded += 1;
                }
            }
        }
    }
    (out, discarded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_long_csv, CovariateSchema};

    const O1: Option<bool> = Some(true);
    const O0: Option<bool> = Some(false);
    const M: Option<bool> = None;

    fn dataset_of(profiles: &[&[Option<bool>]]) -> LongDataset {
        let n = profiles[0].len();
        let mut csv = String::from("id,occasion,outcome\n");
        for (i, p) in profiles.iter().enumerate() {
            assert_eq!(p.len(), n);
            for (j, o) in p.iter().enumerate() {
                let v = match o {
                    Some(true) => "1",
                    Some(false) => "0",
                    None => "NA",
                };
                csv.push_str(&format!("s{i},{j},{v}\n"));
            }
        }
        load_long_csv(csv.as_bytes(), &CovariateSchema::default()).unwrap()
    }

    #[test]
    fn complete_case_keeps_only_completers() {
        let ds = dataset_of(&[&[O1, O1, O1, O1], &[O1, O0, M, M], &[O0, O0, O0, O0]]);
        let cc = complete_case(&ds).unwrap();
        assert_eq!(cc.n_subjects(), 2);
        assert!(cc.subjects.iter().all(|s| s.n_observed() == 4));
    }

    #[test]
    fn complete_case_is_identity_on_complete_data() {
        let ds = dataset_of(&[&[O1, O0], &[O0, O0]]);
        let cc = complete_case(&ds).unwrap();
        assert_eq!(cc.subjects, ds.subjects);
    }

    #[test]
    fn complete_case_errors_without_completers() {
        let ds = dataset_of(&[&[O1, O1, M, M]]);
        assert!(matches!(complete_case(&ds), Err(Error::NoCompleters)));
    }

    #[test]
    fn locf_forward_fills_from_last_observation() {
        let ds = dataset_of(&[&[O1, O0, M, M]]);
        let (filled, dropped) = locf_impute(&ds);
        assert_eq!(dropped, 0);
        assert_eq!(filled.subjects[0].outcomes, vec![O1, O0, O0, O0]);
    }

    #[test]
    fn locf_leaves_leading_missing_untouched() {
        let ds = dataset_of(&[&[M, O1, M, O0]]);
        let (filled, _) = locf_impute(&ds);
        assert_eq!(filled.subjects[0].outcomes, vec![M, O1, O1, O0]);
    }

    #[test]
    fn locf_is_identity_on_complete_sequences() {
        let ds = dataset_of(&[&[O1, O0, O1, O1]]);
        let (filled, dropped) = locf_impute(&ds);
        assert_eq!(dropped, 0);
        assert_eq!(filled.subjects, ds.subjects);
    }

    #[test]
    fn locf_drops_all_missing_subjects() {
        let ds = dataset_of(&[&[M, M], &[O1, M]]);
        let (filled, dropped) = locf_impute(&ds);
        assert_eq!(dropped, 1);
        assert_eq!(filled.n_subjects(), 1);
    }

    #[test]
    fn observed_split_partitions_by_index() {
        let ds = dataset_of(&[&[O1, O0, M, O1]]);
        let split = observed_split(&ds.subjects[0]);
        assert_eq!(split.observed, vec![(0, true), (1, false), (3, true)]);
        assert_eq!(split.missing, vec![2]);
    }

    #[test]
    fn observed_split_degenerate_cases() {
        let ds = dataset_of(&[&[O1, O1], &[M, M]]);
        assert!(observed_split(&ds.subjects[0]).missing.is_empty());
        assert!(observed_split(&ds.subjects[1]).observed.is_empty());
    }

    #[test]
    fn monotonize_truncates_at_first_gap() {
        let ds = dataset_of(&[&[O1, O1, M, O1]]);
        let (m, discarded) = monotonize(&ds);
        assert_eq!(m.subjects[0].outcomes, vec![O1, O1, M, M]);
        assert_eq!(discarded, 1);
    }

    #[test]
    fn monotonize_discards_subject_missing_first_occasion() {
        let ds = dataset_of(&[&[M, O1, O1, O1]]);
        let (m, discarded) = monotonize(&ds);
        assert!(m.subjects[0].outcomes.iter().all(|o| o.is_none()));
        assert_eq!(discarded, 3);
    }

    #[test]
    fn monotonize_is_identity_on_monotone_data() {
        let ds = dataset_of(&[&[O1, O0, M, M], &[O1, O1, O1, O1]]);
        let (m, discarded) = monotonize(&ds);
        assert_eq!(discarded, 0);
        assert_eq!(m.subjects, ds.subjects);
    }
}
