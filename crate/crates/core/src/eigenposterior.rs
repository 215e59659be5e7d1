//! Low-rank soft targets from per-class eigenposteriors.
//!
//! Posteriors of one class are taken to the log domain, mean-centered, and
//! their covariance is eigendecomposed. The leading eigenvectors holding a
//! fraction `sigma` of the variance form the projection basis; enhancement
//! projects a centered log posterior onto that basis, adds the class mean back
//! and exponentiates onto the simplex.
//!
//! Log posteriors are handled modulo the all-ones direction: each log vector
//! has its own average removed before class centering. Adding a constant to
//! every log probability does not change the normalized posterior, so this
//! only discards the normalizer, and it makes the projection exactly
//! idempotent after renormalization.

use crate::error::{invalid, Result};
use crate::linalg::{covariance, effective_rank, sym_eig, Matrix};
use crate::posterior::{log_floor, PosteriorVector, SenoneMatrix};

/// Fraction of spectral mass used to report effective rank.
pub const RANK_FRACTION: f64 = 0.95;

/// Default retained variance (80%).
pub const DEFAULT_SIGMA: f64 = 0.8;

const EIG_TOL: f64 = 1e-12;

/// Truncated eigenbasis of one class's centered log posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenposteriorBasis {
    pub class_id: usize,
    /// Class mean of the log posteriors.
    pub mean_log: Vec<f64>,
    /// `K × l`, orthonormal columns.
    pub basis: Matrix,
    pub kept_eigenvalues: Vec<f64>,
    pub variance_fraction: f64,
    /// Full clamped spectrum at fit time. Not persisted; a basis read from
    /// disk carries only its kept eigenvalues here.
    pub spectrum: Vec<f64>,
}

impl EigenposteriorBasis {
    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn class_count(&self) -> usize {
        self.mean_log.len()
    }

    /// True when the class showed no variance; such a basis projects
    /// everything to zero.
    pub fn is_degenerate(&self) -> bool {
        self.kept_eigenvalues.iter().all(|v| *v == 0.0)
    }
}

/// `log_floor(p)` with its own average subtracted.
pub fn log_coordinates(p: &PosteriorVector, eps: f64) -> Vec<f64> {
    let mut l = log_floor(p, eps);
    let avg = l.iter().sum::<f64>() / l.len() as f64;
    l.iter_mut().for_each(|v| *v -= avg);
    l
}

/// Log coordinates of every column, centered by their class mean. Returns the
/// centered `K × N` matrix and the mean.
pub fn centered_log_matrix(m: &SenoneMatrix, eps: f64) -> Result<(Matrix, Vec<f64>)> {
    let n = m.len();
    if n == 0 {
        return invalid("centered_log_matrix: empty class matrix");
    }
    let k = m.class_count();
    let logs: Vec<Vec<f64>> = (0..n).map(|j| log_coordinates(&m.column(j), eps)).collect();
    let mut mean = vec![0.0; k];
    for col in &logs {
        for (acc, v) in mean.iter_mut().zip(col) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let centered: Vec<Vec<f64>> = logs
        .into_iter()
        .map(|col| col.iter().zip(&mean).map(|(v, mu)| v - mu).collect())
        .collect();
    Ok((Matrix::from_columns(&centered)?, mean))
}

/// Eigenvalues below this share of the largest (plus an absolute floor) are
/// round-off and read as zero.
fn zero_round_off(values: &mut [f64]) {
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let floor = 1e-12 * top + 1e-24;
    for v in values.iter_mut() {
        if *v <= floor {
            *v = 0.0;
        }
    }
}

/// Clamped, round-off-zeroed eigen spectrum of the centered log covariance.
fn log_spectrum(centered: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let cov = covariance(centered)?;
    let eig = sym_eig(&cov, EIG_TOL)?;
    let mut values = eig.clamped_eigenvalues();
    zero_round_off(&mut values);
    Ok((eig.eigenvectors, values))
}

/// Effective rank at `fraction` of a class matrix's centered log posteriors.
pub fn log_domain_rank(m: &SenoneMatrix, eps: f64, fraction: f64) -> Result<usize> {
    let (centered, _) = centered_log_matrix(m, eps)?;
    let (_, values) = log_spectrum(&centered)?;
    effective_rank(&values, fraction)
}

/// Fits the eigenposterior basis for one class.
pub fn compute_basis(m: &SenoneMatrix, sigma: f64, eps: f64) -> Result<EigenposteriorBasis> {
    if m.len() < 2 {
        return invalid(format!(
            "compute_basis: class {} has {} columns, need at least 2",
            m.class_id,
            m.len()
        ));
    }
    if !(sigma > 0.0 && sigma <= 1.0) {
        return invalid(format!("compute_basis: sigma {sigma} not in (0,1]"));
    }
    let (centered, mean_log) = centered_log_matrix(m, eps)?;
    let (vectors, values) = log_spectrum(&centered)?;
    // a class with no variance keeps one deterministic direction
    let l = effective_rank(&values, sigma)?.max(1);
    let basis = if values.iter().all(|v| *v == 0.0) {
        Matrix::identity(m.class_count()).leading_columns(1)
    } else {
        vectors.leading_columns(l)
    };
    Ok(EigenposteriorBasis {
        class_id: m.class_id,
        mean_log,
        basis,
        kept_eigenvalues: values[..l].to_vec(),
        variance_fraction: sigma,
        spectrum: values,
    })
}

/// Softmax of a log vector onto the simplex.
pub fn softmax(logits: &[f64]) -> PosteriorVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let resum: f64 = probs.iter().sum();
    if resum != 1.0 {
        probs.iter_mut().for_each(|p| *p /= resum);
    }
    PosteriorVector::from_normalized(probs)
}

/// Low-rank reconstruction of one posterior against its class basis.
pub fn low_rank_enhance(
    z: &PosteriorVector,
    b: &EigenposteriorBasis,
    eps: f64,
) -> Result<PosteriorVector> {
    if z.class_count() != b.class_count() {
        return invalid(format!(
            "low_rank_enhance: posterior has K={}, basis has K={}",
            z.class_count(),
            b.class_count()
        ));
    }
    let centered: Vec<f64> = log_coordinates(z, eps)
        .iter()
        .zip(&b.mean_log)
        .map(|(v, mu)| v - mu)
        .collect();
    let mut logits = b.mean_log.clone();
    if !b.is_degenerate() {
        let coeffs = b.basis.tr_mat_vec(&centered)?;
        let projected = b.basis.mat_vec(&coeffs)?;
        logits.iter_mut().zip(&projected).for_each(|(a, p)| *a += p);
    }
    Ok(softmax(&logits))
}

/// Column-wise [`low_rank_enhance`].
pub fn enhance_matrix(m: &SenoneMatrix, b: &EigenposteriorBasis, eps: f64) -> Result<SenoneMatrix> {
    let enhanced = m
        .posteriors()
        .iter()
        .map(|z| low_rank_enhance(z, b, eps))
        .collect::<Result<Vec<_>>>()?;
    SenoneMatrix::from_posteriors(m.class_id, &enhanced, m.frame_indices.clone())
}
