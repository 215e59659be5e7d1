//! Sparse soft targets: per-class dictionaries, LASSO codes and
//! reconstruction.
//!
//! The coding objective is `‖z − Dα‖₂² + λ‖α‖₁` exactly as written, with no
//! ½ on the quadratic term, so the stationarity conditions read
//! `2 d_jᵀ(z − Dα) = λ sign(α_j)` on the support and
//! `|2 d_jᵀ(z − Dα)| ≤ λ` off it.

mod dictionary;
mod lasso;

pub use dictionary::{
    default_atom_count, learn_dictionary, learn_dictionary_from_data, DictionaryConfig,
    LearnedDictionary,
};
pub use lasso::{lasso_objective, sparse_code, DEFAULT_LASSO_MAX_ITER, DEFAULT_LASSO_TOL};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::posterior::{make_posterior, PosteriorVector};

/// Default ℓ1 weight.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Per-class overcomplete dictionary; each atom has norm at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDictionary {
    pub class_id: usize,
    /// `K × d`, one atom per column.
    pub atoms: Matrix,
    pub lambda_train: f64,
}

impl SparseDictionary {
    pub fn atom_count(&self) -> usize {
        self.atoms.cols()
    }

    pub fn class_count(&self) -> usize {
        self.atoms.rows()
    }
}

/// LASSO coefficients over a dictionary's atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub coeffs: Vec<f64>,
}

impl SparseCode {
    pub fn zeros(d: usize) -> Self {
        Self {
            coeffs: vec![0.0; d],
        }
    }

    /// Indices of the nonzero coefficients.
    pub fn support(&self) -> Vec<usize> {
        self.coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn l1_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.abs()).sum()
    }
}

/// `D α` with negatives clamped to zero, renormalized onto the simplex.
pub fn sparse_reconstruct(alpha: &SparseCode, dict: &SparseDictionary) -> Result<PosteriorVector> {
    let recon = dict.atoms.mat_vec(&alpha.coeffs)?;
    let clamped: Vec<f64> = recon.iter().map(|v| v.max(0.0)).collect();
    if clamped.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateReconstruction(format!(
            "class {}: reconstruction has no positive entry",
            dict.class_id
        )));
    }
    make_posterior(&clamped)
}

/// Largest violation of the LASSO stationarity conditions at `alpha`.
pub fn kkt_violation(
    z: &[f64],
    dict: &SparseDictionary,
    alpha: &SparseCode,
    lambda: f64,
) -> Result<f64> {
    if z.len() != dict.class_count() || alpha.coeffs.len() != dict.atom_count() {
        return invalid("kkt_violation: dimension mismatch");
    }
    let fitted = dict.atoms.mat_vec(&alpha.coeffs)?;
    let residual: Vec<f64> = z.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let corr = dict.atoms.tr_mat_vec(&residual)?;
    Ok(max_violation(&corr, &alpha.coeffs, lambda))
}

/// `corr[j] = d_jᵀ(z − Dα)`.
pub(crate) fn max_violation(corr: &[f64], coeffs: &[f64], lambda: f64) -> f64 {
    corr.iter()
        .zip(coeffs)
        .map(|(q, a)| {
            if *a != 0.0 {
                (2.0 * q - lambda * a.signum()).abs()
            } else {
                (2.0 * q.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

pub(crate) fn squared_residual(z: &[f64], atoms: &Matrix, coeffs: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, zi) in z.iter().enumerate() {
        let r = zi - dot(atoms.row(i), coeffs);
        total += r * r;
    }
    total
}
