//! Cyclic coordinate descent for `‖z − Dα‖₂² + λ‖α‖₁`, run on the Gram
//! matrix `DᵀD` and correlations `Dᵀz` ("covariance updates").

use super::{max_violation, squared_residual, SparseCode, SparseDictionary};
use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky, cholesky_solve, sym_eig, Matrix};

/// Sweeps between attempts to solve the current support exactly.
const POLISH_EVERY: usize = 16;

pub const DEFAULT_LASSO_TOL: f64 = 1e-10;
pub const DEFAULT_LASSO_MAX_ITER: usize = 10_000;

pub fn lasso_objective(z: &[f64], dict: &SparseDictionary, alpha: &SparseCode, lambda: f64) -> f64 {
    squared_residual(z, &dict.atoms, &alpha.coeffs) + lambda * alpha.l1_norm()
}

#[inline]
fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

pub(crate) fn gram(atoms: &Matrix) -> Matrix {
    let d = atoms.cols();
    let mut g = Matrix::zeros(d, d);
    for i in 0..atoms.rows() {
        let row = atoms.row(i);
        for a in 0..d {
            for b in a..d {
                let v = g.get(a, b) + row[a] * row[b];
                g.set(a, b, v);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            g.set(a, b, g.get(b, a));
        }
    }
    g
}

fn residual_correlation(gram: &Matrix, corr: &[f64], coeffs: &[f64]) -> Vec<f64> {
    corr.iter()
        .enumerate()
        .map(|(j, c)| {
            c - gram
                .row(j)
                .iter()
                .zip(coeffs)
                .map(|(g, a)| g * a)
                .sum::<f64>()
        })
        .collect()
}

/// Moves the coefficient of an atom identical to an earlier active atom onto
/// that atom. With equal signs this leaves `Dα` and `‖α‖₁` unchanged and
/// keeps the support system nonsingular.
fn merge_duplicates(gram: &Matrix, coeffs: &mut [f64]) {
    let d = coeffs.len();
    for j in 0..d {
        if coeffs[j] == 0.0 {
            continue;
        }
        for i in 0..j {
            let (gi, gj, gij) = (gram.get(i, i), gram.get(j, j), gram.get(i, j));
            let same = gi > 0.0 && (gi - gj).abs() <= 1e-12 * gi && (gij - gi).abs() <= 1e-12 * gi;
            if same && coeffs[i] != 0.0 && coeffs[i].signum() == coeffs[j].signum() {
                coeffs[i] += coeffs[j];
                coeffs[j] = 0.0;
                break;
            }
        }
    }
}

/// With linearly dependent active atoms, moves along a null direction `v` of
/// `D_S` (so `Dα` is unchanged) with `sign(α)ᵀv ≤ 0` until a coefficient
/// reaches zero, and drops it.
fn drop_dependent(g: &Matrix, support: &[usize], coeffs: &mut [f64]) -> bool {
    let Ok(eig) = sym_eig(g, 1e-14) else {
        return false;
    };
    let n = support.len();
    let smallest = eig.eigenvalues[n - 1];
    if smallest > 1e-10 * eig.eigenvalues[0].max(f64::MIN_POSITIVE) {
        return false;
    }
    let mut v = eig.eigenvectors.col(n - 1);
    let drift: f64 = support
        .iter()
        .zip(&v)
        .map(|(&j, x)| coeffs[j].signum() * x)
        .sum();
    if drift > 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let mut step = f64::INFINITY;
    let mut blocking = None;
    for (&j, x) in support.iter().zip(&v) {
        if coeffs[j] * x < 0.0 {
            let t = -coeffs[j] / x;
            if t < step {
                step = t;
                blocking = Some(j);
            }
        }
    }
    let Some(b) = blocking else {
        return false;
    };
    for (&j, x) in support.iter().zip(&v) {
        coeffs[j] += step * x;
    }
    coeffs[b] = 0.0;
    true
}

/// Active-set refinement. Solves `G_SS α_S = c_S − (λ/2) sign(α_S)` on the
/// current support; if a sign would flip, steps to the orthant boundary,
/// drops the blocking coordinate and repeats. Every move lowers the
/// objective. Returns true once the result passes the stationarity check.
fn polish(gram: &Matrix, corr: &[f64], lambda: f64, tol: f64, coeffs: &mut [f64]) -> bool {
    merge_duplicates(gram, coeffs);
    for _ in 0..=coeffs.len() {
        let support: Vec<usize> = (0..coeffs.len()).filter(|&j| coeffs[j] != 0.0).collect();
        if support.is_empty() {
            break;
        }
        let n = support.len();
        let mut g = Matrix::zeros(n, n);
        for (a, &i) in support.iter().enumerate() {
            for (b, &j) in support.iter().enumerate() {
                g.set(a, b, gram.get(i, j));
            }
        }
        let Ok(l) = cholesky(&g) else {
            if !drop_dependent(&g, &support, coeffs) {
                return false;
            }
            continue;
        };
        let rhs: Vec<f64> = support
            .iter()
            .map(|&j| corr[j] - 0.5 * lambda * coeffs[j].signum())
            .collect();
        let sol = cholesky_solve(&l, &rhs);
        let mut step = 1.0;
        let mut blocking = None;
        for (&j, v) in support.iter().zip(&sol) {
            if v.signum() != coeffs[j].signum() || *v == 0.0 {
                let t = coeffs[j] / (coeffs[j] - v);
                if t < step {
                    step = t;
                    blocking = Some(j);
                }
            }
        }
        for (&j, v) in support.iter().zip(&sol) {
            coeffs[j] += step * (v - coeffs[j]);
        }
        match blocking {
            Some(j) => coeffs[j] = 0.0,
            None => break,
        }
    }
    let q = residual_correlation(gram, corr, coeffs);
    max_violation(&q, coeffs, lambda) <= tol
}

/// Solves the LASSO in place starting from `coeffs`. Stops once a sweep moves
/// no coefficient by more than `tol` and the stationarity violation is at
/// most `tol`, or once an exact solve on the current support passes the
/// stationarity check.
pub(crate) fn solve(
    gram: &Matrix,
    corr: &[f64],
    lambda: f64,
    tol: f64,
    max_iter: usize,
    coeffs: &mut [f64],
) -> Result<()> {
    let d = corr.len();
    let half = 0.5 * lambda;
    let mut q = residual_correlation(gram, corr, coeffs);
    for sweep in 0..max_iter {
        if sweep % POLISH_EVERY == POLISH_EVERY - 1 {
            if polish(gram, corr, lambda, tol, coeffs) {
                return Ok(());
            }
            q = residual_correlation(gram, corr, coeffs);
        }
        let mut max_delta = 0.0f64;
        for j in 0..d {
            let g = gram.get(j, j);
            let new = if g > 0.0 {
                soft_threshold(q[j] + g * coeffs[j], half) / g
            } else {
                0.0
            };
            let delta = new - coeffs[j];
            if delta != 0.0 {
                for (qi, gij) in q.iter_mut().zip(gram.row(j)) {
                    *qi -= gij * delta;
                }
                coeffs[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta <= tol {
            // refresh to shed the drift of incremental updates
            q = residual_correlation(gram, corr, coeffs);
            if max_violation(&q, coeffs, lambda) <= tol {
                return Ok(());
            }
        }
    }
    let q = residual_correlation(gram, corr, coeffs);
    let violation = max_violation(&q, coeffs, lambda);
    if violation <= tol {
        Ok(())
    } else {
        Err(Error::Numerical {
            message: format!("LASSO coordinate descent hit {max_iter} sweeps"),
            residual: violation,
        })
    }
}

/// Sparse code of `z` over `dict`.
pub fn sparse_code(
    z: &[f64],
    dict: &SparseDictionary,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SparseCode> {
    if !(lambda >= 0.0) {
        return invalid(format!("sparse_code: lambda {lambda} must be non-negative"));
    }
    if z.len() != dict.class_count() {
        return invalid(format!(
            "sparse_code: vector has {} entries, dictionary has {} rows",
            z.len(),
            dict.class_count()
        ));
    }
    let g = gram(&dict.atoms);
    let corr = dict.atoms.tr_mat_vec(z)?;
    let mut code = SparseCode::zeros(dict.atom_count());
    solve(&g, &corr, lambda, tol, max_iter, &mut code.coeffs)?;
    Ok(code)
}
