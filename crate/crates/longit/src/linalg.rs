//! Small dense linear-algebra kernels.
//!
//! Every matrix in this crate is tiny (design widths and per-subject blocks
//! are at most a few dozen), so plain O(n^3) routines are used throughout.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Returns `None` when a pivot falls below `rel_tol` times the largest
/// diagonal entry, which doubles as the rank-deficiency test. The failing
/// pivot index is reported through `fail_col`.
pub(crate) fn cholesky_with_tol(
    a: ArrayView2<f64>,
    rel_tol: f64,
    fail_col: &mut usize,
) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0f64, f64::max);
    let tol = rel_tol * max_diag.max(1e-300);
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k] ] * l[[j, k]];
        }
        if !(d > tol) {
            *fail_col = j;
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Some(l)
}

pub(crate) fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let mut col = 0;
    cholesky_with_tol(a, 1e-12, &mut col)
}

/// Solve L L' x = b given the lower factor L.
pub(crate) fn chol_solve_vec(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve L L' X = B columnwise.
pub(crate) fn chol_solve_mat(l: &Array2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&chol_solve_vec(l, col));
    }
    out
}

pub(crate) fn spd_solve(a: ArrayView2<f64>, b: ArrayView1<f64>, what: &str) -> Result<Array1<f64>> {
    let l = cholesky(a).ok_or_else(|| Error::Singular(what.to_string()))?;
    Ok(chol_solve_vec(&l, b))
}

pub(crate) fn spd_inverse(a: ArrayView2<f64>, what: &str) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a).ok_or_else(|| Error::Singular(what.to_string()))?;
    let inv = chol_solve_mat(&l, Array2::<f64>::eye(n).view());
    Ok(symmetrize(&inv))
}

/// Force exact symmetry; solves accumulate tiny asymmetric round-off.
pub(crate) fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            out[[i, j]] = m;
            out[[j, i]] = m;
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
pub(crate) fn sym_eigenvalues(a: ArrayView2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = symmetrize(&a.to_owned());
    if n == 0 {
        return vec![];
    }
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * norm {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Neumaier compensated accumulator; keeps sums order-stable to ~1 ulp.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct NeumaierSum {
    s: f64,
    c: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    pub fn value(&self) -> f64 {
        self.s + self.c
    }
}

pub(crate) fn neumaier_total(xs: &[f64]) -> f64 {
    let mut acc = NeumaierSum::default();
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Compensated accumulator for a dense matrix plus a vector, used by the
/// estimating-equation assemblers so subject order cannot move results.
pub(crate) struct ScoreAccumulator {
    pub score: Vec<NeumaierSum>,
    pub info: Vec<NeumaierSum>,
    p: usize,
}

impl ScoreAccumulator {
    pub fn new(p: usize) -> Self {
        Self {
            score: vec![NeumaierSum::default(); p],
            info: vec![NeumaierSum::default(); p * p],
            p,
        }
    }

    pub fn add_score(&mut self, v: ArrayView1<f64>) {
        for (acc, &x) in self.score.iter_mut().zip(v.iter()) {
            acc.add(x);
        }
    }

    pub fn add_info(&mut self, m: ArrayView2<f64>) {
        for i in 0..self.p {
            for j in 0..self.p {
                self.info[i * self.p + j].add(m[[i, j]]);
            }
        }
    }

    pub fn score_vec(&self) -> Array1<f64> {
        Array1::from_iter(self.score.iter().map(|a| a.value()))
    }

    pub fn info_mat(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.p, self.p), |(i, j)| self.info[i * self.p + j].value())
    }
}

/// log(sum(exp(x))) with the usual max shift.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut acc = NeumaierSum::default();
    for &x in xs {
        acc.add((x - m).exp());
    }
    m + acc.value().ln()
}
