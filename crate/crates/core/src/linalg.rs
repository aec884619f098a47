//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, numerical, Result};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// non-increasing order.
///
/// Each eigenvector is oriented so that its largest-magnitude entry is
/// positive, which makes the decomposition reproducible across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns, aligned with `values`.
    pub vectors: DMatrix<f64>,
}

impl EigenPair {
    pub fn of_symmetric(s: &DMatrix<f64>) -> Result<Self> {
        if !s.is_square() {
            return Err(invalid(format!(
                "eigendecomposition needs a square matrix, got {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(numerical("matrix has non-finite entries"));
        }
        let sym = (s + s.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let n = s.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            let mut col = eig.eigenvectors.column(src).clone_owned();
            let pivot = col
                .iter()
                .enumerate()
                .fold((0, 0.0_f64), |best, (i, v)| {
                    if v.abs() > best.1.abs() {
                        (i, *v)
                    } else {
                        best
                    }
                })
                .1;
            if pivot < 0.0 {
                col.neg_mut();
            }
            vectors.set_column(dst, &col);
        }
        Ok(Self { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Sample mean and maximum-likelihood covariance (divisor N) of the rows of `x`.
pub fn sample_mean_cov(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.nrows() < 2 {
        return Err(invalid(format!(
            "sample covariance needs at least 2 rows, got {}",
            x.nrows()
        )));
    }
    let mean = column_means(x);
    let s = covariance_about(x, &mean);
    Ok((mean, s))
}

pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// (1/N) Σ (x_j − μ)(x_j − μ)ᵀ over the rows of `x`.
pub fn covariance_about(x: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let centered = center_rows(x, mu);
    let mut s = centered.transpose() * &centered / x.nrows() as f64;
    symmetrize(&mut s);
    s
}

pub fn center_rows(x: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    centered
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or_else(|| numerical("matrix is not positive definite"))
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| numerical("matrix is not positive definite"))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let l = cholesky(m)?;
    Ok(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Orthogonal matrix `R` minimising ‖A R − B‖_F (rotations and reflections).
pub fn procrustes_rotation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(invalid(format!(
            "procrustes shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let cross = a.transpose() * b;
    let svd = cross.svd(true, true);
    let u = svd.u.ok_or_else(|| numerical("svd failed"))?;
    let v_t = svd.v_t.ok_or_else(|| numerical("svd failed"))?;
    Ok(u * v_t)
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}
