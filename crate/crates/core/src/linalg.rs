//! Small dense linear-algebra helpers shared by the inference code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter levels tried, in order, after a plain factorization fails.
pub const JITTER_LEVELS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factor together with the absolute jitter that was added to the diagonal.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

fn mean_diag(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows().max(1);
    let m = k.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64;
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Rough condition estimate from the pivots of a Cholesky factor.
pub fn condition_from_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let d: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)]).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    (max / min).powi(2)
}

fn is_valid(chol: &Cholesky<f64, Dyn>) -> bool {
    let l = chol.l_dirty();
    (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0)
}

/// Factorizes `k`, escalating diagonal jitter through [`JITTER_LEVELS`] on failure.
///
/// With `always_jitter` the first attempt already uses the smallest level.
pub fn cholesky_jittered(k: &DMatrix<f64>, always_jitter: bool) -> Result<JitteredCholesky> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix".into()));
    }
    if !always_jitter {
        if let Some(chol) = Cholesky::new(k.clone()) {
            if is_valid(&chol) {
                return Ok(JitteredCholesky { chol, jitter: 0.0 });
            }
        }
    }
    let scale = mean_diag(k);
    let mut last_cond = f64::INFINITY;
    for rel in JITTER_LEVELS {
        let jitter = rel * scale;
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(kj) {
            if is_valid(&chol) {
                return Ok(JitteredCholesky { chol, jitter });
            }
            last_cond = condition_from_chol(&chol);
        }
    }
    Err(Error::Numerical {
        message: format!("Cholesky failed on a {0}x{0} matrix after maximal jitter", k.nrows()),
        condition: last_cond,
    })
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Column-wise sum of blocks: `out[a] = Σ_i v[i * nf + a]`.
pub fn sum_blocks(v: &DVector<f64>, nf: usize) -> DVector<f64> {
    let mut out = DVector::zeros(nf);
    for (k, x) in v.iter().enumerate() {
        out[k % nf] += x;
    }
    out
}
