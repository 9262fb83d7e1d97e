//! GEE estimating-equation machinery checked against brute-force oracles
//! built from plain nested loops and an independent Gauss-Jordan inverse.

use approx::assert_abs_diff_eq;
use longit::{
    build_design, estimate_alpha, fit_gee, load_long_csv, parse_formula, Alpha,
    CorrelationStructure, CovariateSchema, LongDataset, SubjectResiduals,
};
use ndarray::Array1;

// ---------------------------------------------------------------------
// Test-local dense helpers (independent of the crate's linear algebra).
// ---------------------------------------------------------------------

fn gj_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| m[p][col].abs().partial_cmp(&m[q][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        let d = m[col][col];
        for k in 0..2 * n {
            m[col][k] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = m[row][col];
                for k in 0..2 * n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------

#[test]
fn exchangeable_alpha_matches_double_sum_oracle() {
    // Five subjects with different observed supports.
    let subjects = vec![
        SubjectResiduals {
            occasions: vec![0, 1, 2, 3],
            residuals: vec![0.4, -1.1, 0.8, 0.3],
            weight: 1.0,
        },
        SubjectResiduals {
            occasions: vec![0, 1, 2],
            residuals: vec![-0.6, -0.2, 1.4],
            weight: 1.0,
        },
        SubjectResiduals {
            occasions: vec![0, 1],
            residuals: vec![0.9, 0.7],
            weight: 1.0,
        },
        SubjectResiduals {
            occasions: vec![0, 2],
            residuals: vec![-1.3, 0.5],
            weight: 1.0,
        },
        SubjectResiduals {
            occasions: vec![1, 2, 3],
            residuals: vec![0.2, -0.4, -0.9],
            weight: 1.0,
        },
    ];
    // Brute force: (1/N) sum_i [1/(n_i(n_i-1))] sum over ordered pairs.
    let mut total = 0.0;
    for s in &subjects {
        let ni = s.residuals.len();
        let mut cross = 0.0;
        for j in 0..ni {
            for k in 0..ni {
                if j != k {
                    cross += s.residuals[j] * s.residuals[k];
                }
            }
        }
        total += cross / (ni * (ni - 1)) as f64;
    }
    let oracle = total / subjects.len() as f64;
    match estimate_alpha(&subjects, CorrelationStructure::Exchangeable, 4).unwrap() {
        Alpha::Scalar(a) => assert_abs_diff_eq!(a, oracle, epsilon = 1e-12),
        _ => panic!(),
    }

    // AR(1): flat average over design-adjacent observed pairs.
    let mut num = 0.0;
    let mut count = 0usize;
    for s in &subjects {
        for w in 0..s.occasions.len() - 1 {
            if s.occasions[w + 1] == s.occasions[w] + 1 {
                num += s.residuals[w] * s.residuals[w + 1];
                count += 1;
            }
        }
    }
    match estimate_alpha(&subjects, CorrelationStructure::Ar1, 4).unwrap() {
        Alpha::Scalar(a) => assert_abs_diff_eq!(a, num / count as f64, epsilon = 1e-12),
        _ => panic!(),
    }

    // Unstructured: per-cell averages over supporting subjects.
    match estimate_alpha(&subjects, CorrelationStructure::Unstructured, 4).unwrap() {
        Alpha::Matrix(m) => {
            for j in 0..4 {
                for k in 0..4 {
                    let mut num = 0.0;
                    let mut den = 0usize;
                    for s in &subjects {
                        let pj = s.occasions.iter().position(|&o| o == j);
                        let pk = s.occasions.iter().position(|&o| o == k);
                        if let (Some(pj), Some(pk)) = (pj, pk) {
                            num += s.residuals[pj] * s.residuals[pk];
                            den += 1;
                        }
                    }
                    let expected = if j == k {
                        1.0
                    } else if den > 0 {
                        num / den as f64
                    } else {
                        0.0
                    };
                    assert_abs_diff_eq!(m[[j, k]], expected, epsilon = 1e-12);
                }
            }
        }
        _ => panic!(),
    }
}

fn three_subject_dataset() -> LongDataset {
    // Patterns chosen so the exchangeable moment estimate stays inside its
    // validity region at this tiny scale.
    let schema = CovariateSchema::default();
    let csv = "id,occasion,outcome\n\
               a,1,1\na,2,1\na,3,1\n\
               b,1,0\nb,2,0\nb,3,NA\n\
               c,1,1\nc,2,0\nc,3,1\n";
    load_long_csv(csv.as_bytes(), &schema).unwrap()
}

#[test]
fn sandwich_matches_brute_force_assembly_oracle() {
    let ds = three_subject_dataset();
    let formula = parse_formula("outcome ~ 1").unwrap();
    let fit = fit_gee(&ds, &formula, CorrelationStructure::Exchangeable).unwrap();
    let alpha = match fit.correlation.alpha {
        Alpha::Scalar(a) => a,
        _ => panic!(),
    };

    // Rebuild I0, I1 and the sandwich with naive loops at the fitted
    // (beta, alpha).
    let frame = build_design(&ds, &formula).unwrap();
    let p = fit.beta.len();
    let mut i0 = vec![vec![0.0; p]; p];
    let mut i1 = vec![vec![0.0; p]; p];
    for s in &frame.subjects {
        let m = s.y.len();
        let mu: Vec<f64> = (0..m).map(|i| expit(s.x.row(i).dot(&fit.beta))).collect();
        let mut v = vec![vec![0.0; m]; m];
        for a in 0..m {
            for b in 0..m {
                let c = if a == b { 1.0 } else { alpha };
                v[a][b] = c * (mu[a] * (1.0 - mu[a])).sqrt() * (mu[b] * (1.0 - mu[b])).sqrt();
            }
        }
        let vinv = gj_inverse(&v);
        let d: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..p)
                    .map(|j| s.x[[i, j]] * mu[i] * (1.0 - mu[i]))
                    .collect()
            })
            .collect();
        // score_i = D' V^{-1} r
        let mut score_i = vec![0.0; p];
        for j in 0..p {
            for a in 0..m {
                for b in 0..m {
                    score_i[j] += d[a][j] * vinv[a][b] * (s.y[b] - mu[b]);
                }
            }
        }
        for j in 0..p {
            for k in 0..p {
                for a in 0..m {
                    for b in 0..m {
                        i0[j][k] += d[a][j] * vinv[a][b] * d[b][k];
                    }
                }
                i1[j][k] += score_i[j] * score_i[k];
            }
        }
    }
    let bread = gj_inverse(&i0);
    let sandwich = mat_mul(&mat_mul(&bread, &i1), &bread);
    for j in 0..p {
        for k in 0..p {
            assert_abs_diff_eq!(fit.model_based_cov[[j, k]], bread[j][k], epsilon = 1e-10);
            assert_abs_diff_eq!(fit.sandwich_cov[[j, k]], sandwich[j][k], epsilon = 1e-10);
        }
    }
}

/// Independent assembly of the estimating function at the returned
/// estimates; used across fits as the convergence oracle.
pub fn score_residual_norm(
    ds: &LongDataset,
    formula_text: &str,
    fit: &longit::GeeFit,
) -> f64 {
    let formula = parse_formula(formula_text).unwrap();
    let frame = build_design(ds, &formula).unwrap();
    let p = fit.beta.len();
    let mut score = vec![0.0; p];
    for s in &frame.subjects {
        let m = s.y.len();
        if m == 0 {
            continue;
        }
        let mu: Vec<f64> = (0..m).map(|i| expit(s.x.row(i).dot(&fit.beta))).collect();
        let mut v = vec![vec![0.0; m]; m];
        for a in 0..m {
            for b in 0..m {
                let c = match (&fit.correlation.structure, &fit.correlation.alpha) {
                    (CorrelationStructure::Independence, _) => (a == b) as u8 as f64,
                    (CorrelationStructure::Exchangeable, Alpha::Scalar(al)) => {
                        if a == b {
                            1.0
                        } else {
                            *al
                        }
                    }
                    (CorrelationStructure::Ar1, Alpha::Scalar(al)) => {
                        al.powi(s.occasions[a].abs_diff(s.occasions[b]) as i32)
                    }
                    (CorrelationStructure::Unstructured, Alpha::Matrix(mat)) => {
                        if a == b {
                            1.0
                        } else {
                            mat[[s.occasions[a], s.occasions[b]]]
                        }
                    }
                    _ => panic!("mismatched alpha"),
                };
                v[a][b] = c * (mu[a] * (1.0 - mu[a])).sqrt() * (mu[b] * (1.0 - mu[b])).sqrt();
            }
        }
        let vinv = gj_inverse(&v);
        for j in 0..p {
            for a in 0..m {
                for b in 0..m {
                    score[j] +=
                        s.x[[a, j]] * mu[a] * (1.0 - mu[a]) * vinv[a][b] * (s.y[b] - mu[b]);
                }
            }
        }
    }
    score.iter().fold(0.0f64, |acc, s| acc.max(s.abs()))
}

#[test]
fn estimating_function_vanishes_at_the_estimate() {
    let ds = exchangeable_mixture(60, 0.35, 0.6, 0.5, 314159);
    for structure in [
        CorrelationStructure::Independence,
        CorrelationStructure::Exchangeable,
        CorrelationStructure::Ar1,
        CorrelationStructure::Unstructured,
    ] {
        let fit = fit_gee(&ds, &parse_formula("outcome ~ trt + visit").unwrap(), structure)
            .unwrap();
        let norm = score_residual_norm(&ds, "outcome ~ trt + visit", &fit);
        assert!(norm < 1e-6, "{structure:?}: {norm}");
        assert!(fit.score_norm < 1e-6);
    }
}

/// Exchangeable binary data by the mixture construction: Y_ij equals a
/// subject-level draw with probability gamma, otherwise a fresh draw, so
/// Corr(Y_ij, Y_ik) = gamma^2 exactly and the mean is constant over time.
fn exchangeable_mixture(n_subj: usize, p_c: f64, p_z: f64, gamma: f64, seed: u64) -> LongDataset {
    // xorshift for test determinism without rand dependencies.
    let mut state = seed | 1;
    let mut unit = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut csv = String::from("id,occasion,trt,outcome\n");
    for i in 0..n_subj {
        let (arm, p) = if i % 2 == 0 { ("C", p_c) } else { ("Z", p_z) };
        let shared = (unit() < p) as u8;
        for j in 1..=4 {
            let y = if unit() < gamma {
                shared
            } else {
                (unit() < p) as u8
            };
            csv.push_str(&format!("s{i},{j},{arm},{y}\n"));
        }
    }
    let schema = CovariateSchema {
        treatment: Some("trt".into()),
        treatment_reference: Some("C".into()),
        ..Default::default()
    };
    load_long_csv(csv.as_bytes(), &schema).unwrap()
}

#[test]
fn correctly_specified_working_correlation_aligns_sandwich_and_model_based() {
    let ds = exchangeable_mixture(2000, 0.4, 0.6, 0.6, 20260810);
    let fit = fit_gee(
        &ds,
        &parse_formula("outcome ~ 0 + visit + visit:trt").unwrap(),
        CorrelationStructure::Exchangeable,
    )
    .unwrap();
    // Compare entries that are not essentially zero relative to the
    // diagonal scale.
    let p = fit.beta.len();
    for a in 0..p {
        for b in 0..p {
            let scale = (fit.model_based_cov[[a, a]] * fit.model_based_cov[[b, b]]).sqrt();
            if fit.model_based_cov[[a, b]].abs() < 0.05 * scale {
                continue;
            }
            let ratio = fit.sandwich_cov[[a, b]] / fit.model_based_cov[[a, b]];
            assert!(
                (0.8..=1.25).contains(&ratio),
                "entry ({a},{b}): ratio {ratio}"
            );
        }
    }
}

#[test]
fn permuting_subjects_leaves_estimates_unchanged() {
    let mut ds = exchangeable_mixture(80, 0.35, 0.55, 0.5, 7);
    let formula = parse_formula("outcome ~ trt + visit").unwrap();
    let base = fit_gee(&ds, &formula, CorrelationStructure::Exchangeable).unwrap();
    // Deterministic shuffle.
    ds.subjects.reverse();
    let mid = ds.subjects.len() / 2;
    ds.subjects.rotate_left(mid.max(1) - 1);
    let permuted = fit_gee(&ds, &formula, CorrelationStructure::Exchangeable).unwrap();
    for j in 0..base.beta.len() {
        assert_abs_diff_eq!(base.beta[j], permuted.beta[j], epsilon = 1e-10);
    }
    let (a0, a1) = match (&base.correlation.alpha, &permuted.correlation.alpha) {
        (Alpha::Scalar(a), Alpha::Scalar(b)) => (*a, *b),
        _ => panic!(),
    };
    assert_abs_diff_eq!(a0, a1, epsilon = 1e-10);
    for a in 0..base.beta.len() {
        for b in 0..base.beta.len() {
            assert_abs_diff_eq!(
                base.sandwich_cov[[a, b]],
                permuted.sandwich_cov[[a, b]],
                epsilon = 1e-10
            );
            assert_abs_diff_eq!(
                base.model_based_cov[[a, b]],
                permuted.model_based_cov[[a, b]],
                epsilon = 1e-10
            );
        }
    }
}

#[test]
fn gee_recovers_truth_on_simulated_exchangeable_data() {
    use longit::sim::{ArmSpec, DropoutSpec, SimSpec};
    use std::collections::BTreeMap;
    let spec = SimSpec {
        n_subjects: 500,
        n_occasions: 4,
        arms: vec![
            ArmSpec {
                label: "C".into(),
                share: 0.5,
            },
            ArmSpec {
                label: "Z".into(),
                share: 0.5,
            },
        ],
        intercepts: vec![-0.8, -0.4, 0.0, 0.4],
        treatment_effects: BTreeMap::from([("Z".to_string(), vec![0.9, 0.9, 0.9, 0.9])]),
        sigma: 1.2,
        dropout: DropoutSpec::default(),
        omega: 0.0,
        seed: 99173,
    };
    let ds = longit::simulate_complete(&spec).unwrap();
    let formula = parse_formula("outcome ~ 0 + visit + visit:trt").unwrap();
    let fit = fit_gee(&ds, &formula, CorrelationStructure::Exchangeable).unwrap();
    let frame = build_design(&ds, &formula).unwrap();
    let truth: Array1<f64> = spec.true_marginal(&frame.info).unwrap();
    let se = fit.robust_se();
    for j in 0..truth.len() {
        assert!(
            (fit.beta[j] - truth[j]).abs() < 3.0 * se[j],
            "param {} ({}): est {} truth {} se {}",
            j,
            fit.columns[j],
            fit.beta[j],
            truth[j],
            se[j]
        );
    }
}
