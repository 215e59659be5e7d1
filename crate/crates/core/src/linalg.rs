//! Dense row-major matrices, covariance, and a cyclic Jacobi eigensolver for
//! symmetric input.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense `rows × cols` matrix of `f64`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("matrix entries must be finite");
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return invalid("ragged rows");
        }
        Self::new(r, c, rows.concat())
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let c = cols.len();
        let r = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|col| col.len() != r) {
            return invalid("ragged columns");
        }
        let mut data = vec![0.0; r * c];
        for (j, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                data[i * c + j] = *v;
            }
        }
        Self::new(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|j| self.col(j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self · x`.
    pub fn mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return invalid(format!(
                "mat_vec: matrix has {} cols, vector has {} entries",
                self.cols,
                x.len()
            ));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · x`.
    pub fn tr_mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return invalid(format!(
                "tr_mat_vec: matrix has {} rows, vector has {} entries",
                self.rows,
                x.len()
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return invalid("sub: shape mismatch");
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Keeps the first `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        let n = n.min(self.cols);
        let mut out = Matrix::zeros(self.rows, n);
        for i in 0..self.rows {
            out.data[i * n..(i + 1) * n].copy_from_slice(&self.row(i)[..n]);
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard product `a · b`. Each output entry accumulates left to right over
/// the shared dimension.
pub fn mat_mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return invalid(format!(
            "mat_mul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `C = M Mᵀ / (N − 1)` for a `K × N` matrix whose rows are already centered
/// over the columns.
pub fn covariance(m: &Matrix) -> Result<Matrix> {
    let n = m.cols;
    if n < 2 {
        return invalid(format!("covariance needs at least 2 columns, got {n}"));
    }
    for i in 0..m.rows {
        let row = m.row(i);
        let scale = row.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        let mean = row.iter().sum::<f64>() / n as f64;
        // rows of pure round-off (scale near 0) get an absolute floor
        if mean.abs() > 1e-8 * scale.max(1e-4) {
            return invalid(format!(
                "covariance: row {i} is not mean-centered (mean {mean:e})"
            ));
        }
    }
    let k = m.rows;
    let denom = (n - 1) as f64;
    let mut c = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(m.row(i), m.row(j)) / denom;
            c.data[i * k + j] = v;
            c.data[j * k + i] = v;
        }
    }
    Ok(c)
}

/// Eigenpairs of a symmetric matrix: `C = P diag(S) Pᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigDecomposition {
    /// Columns are eigenvectors, ordered like `eigenvalues`.
    pub eigenvectors: Matrix,
    /// Sorted non-increasing.
    pub eigenvalues: Vec<f64>,
    pub source_dim: usize,
}

impl EigDecomposition {
    /// Eigenvalues with round-off negatives clamped to zero, for PSD input.
    pub fn clamped_eigenvalues(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|v| v.max(0.0)).collect()
    }

    /// `P diag(S) Pᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.source_dim;
        let p = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (k, s) in self.eigenvalues.iter().enumerate() {
                    acc += p.get(i, k) * s * p.get(j, k);
                }
                out.data[i * n + j] = acc;
            }
        }
        out
    }
}

pub const JACOBI_MAX_SWEEPS: usize = 100;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j).powi(2);
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Iterates until the off-diagonal Frobenius norm is at most `tol · ‖C‖_F`,
/// for at most [`JACOBI_MAX_SWEEPS`] sweeps. Eigenvalues come back sorted
/// descending (stable on ties) and every eigenvector has its largest-magnitude
/// entry positive (first such entry on ties).
pub fn sym_eig(c: &Matrix, tol: f64) -> Result<EigDecomposition> {
    let n = c.rows;
    if c.cols != n {
        return invalid(format!("sym_eig: matrix is {}x{}", c.rows, c.cols));
    }
    let scale = c.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (c.get(i, j) - c.get(j, i)).abs() > 1e-10 * scale {
                return invalid(format!("sym_eig: matrix not symmetric at ({i},{j})"));
            }
        }
    }

    let mut a = c.clone();
    // symmetrize exactly so rotations act on a truly symmetric matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);
    let norm = c.frobenius_norm();
    let target = tol * norm;

    let mut converged = norm == 0.0;
    for sweep in 0..JACOBI_MAX_SWEEPS {
        if converged || off_diagonal_norm(&a) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let g = 100.0 * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a.set(p, q, 0.0);
                    a.set(q, p, 0.0);
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;

                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a.get(r, p);
                    let arq = a.get(r, q);
                    let new_rp = cs * arp - sn * arq;
                    let new_rq = sn * arp + cs * arq;
                    a.set(r, p, new_rp);
                    a.set(p, r, new_rp);
                    a.set(r, q, new_rq);
                    a.set(q, r, new_rq);
                }
                for r in 0..n {
                    let vrp = v.get(r, p);
                    let vrq = v.get(r, q);
                    v.set(r, p, cs * vrp - sn * vrq);
                    v.set(r, q, sn * vrp + cs * vrq);
                }
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > target {
        return Err(Error::Numerical {
            message: format!("Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"),
            residual: off_diagonal_norm(&a),
        });
    }

    let raw: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep their original index order
    order.sort_by(|&i, &j| {
        raw[j]
            .partial_cmp(&raw[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut vectors = Matrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(raw[src]);
        let mut col = v.col(src);
        let mut lead = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, x) in col.into_iter().enumerate() {
            vectors.set(i, dst, x);
        }
    }
    Ok(EigDecomposition {
        eigenvectors: vectors,
        eigenvalues: values,
        source_dim: n,
    })
}

/// Smallest `l` whose leading values hold at least `fraction` of the total.
/// Zero for an all-zero input.
pub fn effective_rank(values: &[f64], fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("effective_rank: fraction {fraction} not in (0,1]"));
    }
    if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return invalid("effective_rank: values must be finite and non-negative");
    }
    if values.windows(2).any(|w| w[0] < w[1]) {
        return invalid("effective_rank: values must be sorted descending");
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Ok(0);
    }
    let goal = fraction * total;
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if acc >= goal {
            return Ok(i + 1);
        }
    }
    // only reachable through round-off when fraction == 1
    Ok(values.iter().rposition(|v| *v > 0.0).map_or(0, |i| i + 1))
}

/// Cholesky factor `L` (lower triangular) of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return invalid("cholesky: matrix must be square");
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numerical {
                        message: "cholesky: matrix not positive definite".into(),
                        residual: s,
                    });
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let m = b[0].len();
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                for k in 0..b.len() {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn mat_mul_identity_zero_and_small_case() {
        let a = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.5],
        ])
        .unwrap();
        assert_eq!(mat_mul(&Matrix::identity(3), &a).unwrap(), a);
        assert_eq!(
            mat_mul(&a, &Matrix::zeros(3, 2)).unwrap(),
            Matrix::zeros(3, 2)
        );

        let lhs = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let rhs = vec![vec![5.0], vec![6.0]];
        let expected = triple_loop(&lhs, &rhs);
        assert_eq!(expected, vec![vec![17.0], vec![39.0]]);
        let got = mat_mul(
            &Matrix::from_rows(&lhs).unwrap(),
            &Matrix::from_rows(&rhs).unwrap(),
        )
        .unwrap();
        assert_eq!(got, Matrix::from_rows(&expected).unwrap());
    }

    #[test]
    fn mat_mul_rejects_mismatch() {
        let err = mat_mul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(
            covariance(&Matrix::zeros(3, 4)).unwrap(),
            Matrix::zeros(3, 3)
        );

        let m = Matrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let c = covariance(&m).unwrap();
        assert_eq!(
            c,
            Matrix::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap()
        );

        let a = 1.5;
        let single = Matrix::from_rows(&[vec![a, -a]]).unwrap();
        assert_eq!(covariance(&single).unwrap().get(0, 0), 2.0 * a * a);
    }

    #[test]
    fn covariance_rejects_bad_input() {
        assert!(covariance(&Matrix::zeros(2, 1)).is_err());
        let uncentered = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(covariance(&uncentered).is_err());
    }

    #[test]
    fn sym_eig_diagonal_gives_permuted_identity() {
        let d = Matrix::diag(&[2.0, 5.0, 1.0]);
        let e = sym_eig(&d, 1e-12).unwrap();
        assert_eq!(e.eigenvalues, vec![5.0, 2.0, 1.0]);
        assert_eq!(e.eigenvectors.col(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(e.eigenvectors.col(1), vec![1.0, 0.0, 0.0]);
        assert_eq!(e.eigenvectors.col(2), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sym_eig_two_by_two_matches_characteristic_polynomial() {
        // λ² − 4λ + 3 = 0 → λ ∈ {3, 1}
        let (b, c) = (-4.0f64, 3.0f64);
        let disc = (b * b - 4.0 * c).sqrt();
        let roots = [(-b + disc) / 2.0, (-b - disc) / 2.0];
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = sym_eig(&m, 1e-14).unwrap();
        for (got, want) in e.eigenvalues.iter().zip(roots) {
            assert!((got - want).abs() < 1e-12);
        }
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.eigenvectors.get(0, 0) - h).abs() < 1e-12);
        assert!((e.eigenvectors.get(1, 0) - h).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_identity_and_zero() {
        let e = sym_eig(&Matrix::identity(4), 1e-12).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0; 4]);
        assert_eq!(e.eigenvectors, Matrix::identity(4));
        let z = sym_eig(&Matrix::zeros(3, 3), 1e-12).unwrap();
        assert_eq!(z.eigenvalues, vec![0.0; 3]);
    }

    #[test]
    fn sym_eig_sign_convention() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0], vec![-2.0, 1.0]]).unwrap();
        let e = sym_eig(&m, 1e-14).unwrap();
        for j in 0..2 {
            let col = e.eigenvectors.col(j);
            let lead = col
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m, 1e-12), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&[1.0, 1.0, 1.0, 1.0], 0.95).unwrap(), 4);
        // cumulative sums 99, 100: 99 ≥ 95
        assert_eq!(effective_rank(&[99.0, 1.0, 0.0, 0.0], 0.95).unwrap(), 1);
        assert_eq!(effective_rank(&[0.0, 0.0, 0.0], 0.3).unwrap(), 0);
        assert_eq!(effective_rank(&[3.0, 1.0, 0.0], 1.0).unwrap(), 2);
    }

    #[test]
    fn effective_rank_rejects_bad_input() {
        assert!(effective_rank(&[1.0, 2.0], 0.5).is_err());
        assert!(effective_rank(&[1.0, -0.5], 0.5).is_err());
        assert!(effective_rank(&[1.0], 0.0).is_err());
        assert!(effective_rank(&[1.0], 1.5).is_err());
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let x = cholesky_solve(&l, &[1.0, 2.0]);
        let back = a.mat_vec(&x).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-14 && (back[1] - 2.0).abs() < 1e-14);
    }
}
