//! Small complex linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::{CMatrix, C64};

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted
/// ascending. Column `i` of `vectors` belongs to `values[i]`.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

pub fn hermitian_eigen(m: &CMatrix) -> Result<HermitianEigen> {
    if !m.is_square() {
        return Err(Error::Shape(format!("eigen of {}x{} matrix", m.nrows(), m.ncols())));
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(hermitian_part(m), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("hermitian eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: ties keep solver order, i.e. lower column index first.
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(HermitianEigen { values, vectors })
}

/// (M + Mᴴ) / 2.
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// max |M - Mᴴ| over all entries.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..m.ncols().min(n) {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// M^{-1/2} for a Hermitian positive definite matrix.
pub fn inv_sqrt_hpd(m: &CMatrix) -> Result<CMatrix> {
    let eig = hermitian_eigen(m)?;
    let n = m.nrows();
    let floor = eig.values.last().copied().unwrap_or(0.0) * 1e-14;
    if eig.values.first().is_some_and(|&v| v <= floor) {
        return Err(Error::Numerical("matrix is not positive definite".into()));
    }
    let scale = DVector::from_iterator(n, eig.values.iter().map(|&v| C64::new(v.powf(-0.5), 0.0)));
    let v = &eig.vectors;
    let scaled = CMatrix::from_fn(n, n, |r, c| v[(r, c)] * scale[c]);
    Ok(hermitian_part(&(scaled * v.adjoint())))
}

/// Inverse of a Hermitian positive definite matrix (Cholesky).
pub fn inv_hpd(m: &CMatrix) -> Result<CMatrix> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    Ok(hermitian_part(&chol.inverse()))
}

/// Condition number of a real symmetric matrix from its eigenvalues.
pub fn symmetric_condition(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}
