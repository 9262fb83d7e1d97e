//! Logistic-regression fixture checked against an independent hand-run
//! IRLS oracle: a from-scratch loop with naive Gaussian elimination, kept
//! free of any crate linear algebra or fitting code.

use approx::assert_abs_diff_eq;
use longit::fit_logistic;
use ndarray::{array, Array1, Array2};

fn fixture() -> (Array2<f64>, Array1<f64>) {
    let x = array![
        [1.0, -1.5, 0.0],
        [1.0, -1.0, 1.0],
        [1.0, -0.5, 0.0],
        [1.0, -0.2, 1.0],
        [1.0, 0.1, 0.0],
        [1.0, 0.4, 1.0],
        [1.0, 0.8, 0.0],
        [1.0, 1.2, 1.0],
        [1.0, 1.6, 0.0],
        [1.0, 2.0, 1.0]
    ];
    let y = array![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
    (x, y)
}

/// Textbook IRLS on plain slices with Gaussian elimination.
fn oracle_irls(x: &[[f64; 3]; 10], y: &[f64; 10]) -> [f64; 3] {
    let mut beta = [0.0f64; 3];
    for _ in 0..100 {
        let mut score = [0.0f64; 3];
        let mut info = [[0.0f64; 3]; 3];
        for i in 0..10 {
            let eta: f64 = (0..3).map(|j| x[i][j] * beta[j]).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let w = mu * (1.0 - mu);
            for a in 0..3 {
                score[a] += x[i][a] * (y[i] - mu);
                for b in 0..3 {
                    info[a][b] += w * x[i][a] * x[i][b];
                }
            }
        }
        // Gaussian elimination with partial pivoting on [info | score].
        let mut m = [[0.0f64; 4]; 3];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] = info[a][b];
            }
            m[a][3] = score[a];
        }
        for col in 0..3 {
            let pivot = (col..3)
                .max_by(|&p, &q| m[p][col].abs().partial_cmp(&m[q][col].abs()).unwrap())
                .unwrap();
            m.swap(col, pivot);
            for row in (col + 1)..3 {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
        let mut delta = [0.0f64; 3];
        for row in (0..3).rev() {
            let mut s = m[row][3];
            for k in (row + 1)..3 {
                s -= m[row][k] * delta[k];
            }
            delta[row] = s / m[row][row];
        }
        let mut max_step = 0.0f64;
        for j in 0..3 {
            beta[j] += delta[j];
            max_step = max_step.max(delta[j].abs());
        }
        if max_step < 1e-14 {
            break;
        }
    }
    beta
}

#[test]
fn fit_matches_hand_run_irls_oracle() {
    let (x, y) = fixture();
    let mut xo = [[0.0f64; 3]; 10];
    let mut yo = [0.0f64; 10];
    for i in 0..10 {
        for j in 0..3 {
            xo[i][j] = x[[i, j]];
        }
        yo[i] = y[i];
    }
    let oracle = oracle_irls(&xo, &yo);
    // Frozen oracle output for this fixture.
    assert_abs_diff_eq!(oracle[0], 0.4551694737402592, epsilon = 1e-10);
    assert_abs_diff_eq!(oracle[1], 1.5142214409943116, epsilon = 1e-10);
    assert_abs_diff_eq!(oracle[2], -1.7975785127192332, epsilon = 1e-10);

    let w = Array1::ones(10);
    let fit = fit_logistic(x.view(), y.view(), w.view(), None).unwrap();
    assert!(fit.converged);
    for j in 0..3 {
        assert_abs_diff_eq!(fit.beta[j], oracle[j], epsilon = 1e-8);
    }
    // Covariance diagonal against the frozen inverse Fisher information.
    assert_abs_diff_eq!(fit.covariance[[0, 0]], 1.2996539728573078, epsilon = 1e-7);
    assert_abs_diff_eq!(fit.covariance[[1, 1]], 0.9111702648092064, epsilon = 1e-7);
    assert_abs_diff_eq!(fit.covariance[[2, 2]], 3.2176530259623046, epsilon = 1e-7);
}
