//! Conditioning Gaussians on affine sum constraints `F f = S`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::GaussianDist;
use crate::linalg::{cholesky_jittered, symmetrize};

/// Relative pivot size below which a constraint row counts as dependent.
const DEPENDENCE_TOL: f64 = 1e-10;

type RowFn = dyn Fn(&[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> + Send + Sync;

/// Constraint `F(x) f'(x) = S(x)` over the task outputs at every input point.
#[derive(Clone)]
pub struct ConstraintSpec {
    eval: Arc<RowFn>,
    n_rows: usize,
    n_cols: usize,
    constant: Option<(DMatrix<f64>, DVector<f64>)>,
    /// `F` when it does not depend on the input (constant constraints and varying targets).
    fixed_f: Option<DMatrix<f64>>,
}

impl fmt::Debug for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSpec")
            .field("n_rows", &self.n_rows)
            .field("n_cols", &self.n_cols)
            .field("constant", &self.constant)
            .finish()
    }
}

impl ConstraintSpec {
    /// Position-independent constraint.
    pub fn constant(f: DMatrix<f64>, s: DVector<f64>) -> Result<Self> {
        if f.nrows() != s.len() {
            return Err(Error::input("F and S disagree on the number of constraints"));
        }
        if f.nrows() > f.ncols() {
            return Err(Error::input("more constraints than tasks"));
        }
        let (n_rows, n_cols) = f.shape();
        let (fc, sc) = (f.clone(), s.clone());
        Ok(ConstraintSpec {
            eval: Arc::new(move |_| Ok((fc.clone(), sc.clone()))),
            n_rows,
            n_cols,
            fixed_f: Some(f.clone()),
            constant: Some((f, s)),
        })
    }

    /// Position-dependent constraint given by a closure returning `(F(x), S(x))`.
    pub fn varying<G>(n_rows: usize, n_cols: usize, eval: G) -> Result<Self>
    where
        G: Fn(&[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> + Send + Sync + 'static,
    {
        if n_rows > n_cols {
            return Err(Error::input("more constraints than tasks"));
        }
        Ok(ConstraintSpec { eval: Arc::new(eval), n_rows, n_cols, constant: None, fixed_f: None })
    }

    /// Constant `F` with an input-dependent right-hand side.
    pub fn varying_target<G>(f: DMatrix<f64>, target: G) -> Result<Self>
    where
        G: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    {
        let (n_rows, n_cols) = f.shape();
        let fc = f.clone();
        let mut spec = Self::varying(n_rows, n_cols, move |x| Ok((fc.clone(), target(x))))?;
        spec.fixed_f = Some(f);
        Ok(spec)
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Whether `F` is the same at every input (only `S` may vary).
    pub fn has_fixed_matrix(&self) -> bool {
        self.fixed_f.is_some()
    }

    /// `(F, S)` when the constraint is position independent.
    pub fn constant_parts(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        self.constant.as_ref().map(|(f, s)| (f, s))
    }

    /// Constant constraint on `u` where `y = offset + scale · u`: `F diag(scale) u = S - F offset`.
    pub fn reparametrized(&self, offset: &DVector<f64>, scale: &DVector<f64>) -> Result<Self> {
        let (f, s) = self.constant_parts().ok_or_else(|| Error::input("only constant constraints can be reparametrized"))?;
        if offset.len() != f.ncols() || scale.len() != f.ncols() {
            return Err(Error::input("offset and scale must have one entry per constraint column"));
        }
        let fs = DMatrix::from_fn(f.nrows(), f.ncols(), |r, c| f[(r, c)] * scale[c]);
        ConstraintSpec::constant(fs, s - f * offset)
    }

    /// Evaluates `(F(x), S(x))`, zero-padding `F` to `n_tasks` columns for auxiliary outputs.
    pub fn evaluate(&self, x: &[f64], n_tasks: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (f, s) = (self.eval)(x)
            .map_err(|e| Error::input(format!("constraint evaluation failed at x = {x:?}: {e}")))?;
        if f.nrows() != self.n_rows || s.len() != self.n_rows {
            return Err(Error::input(format!("constraint at x = {x:?} has inconsistent shape")));
        }
        if s.iter().chain(f.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input(format!("constraint at x = {x:?} is not finite")));
        }
        Ok((pad_columns(&f, n_tasks)?, s))
    }
}

fn pad_columns(f: &DMatrix<f64>, n_tasks: usize) -> Result<DMatrix<f64>> {
    if f.ncols() > n_tasks {
        return Err(Error::input(format!(
            "constraint has {} columns but the model has {} tasks",
            f.ncols(),
            n_tasks
        )));
    }
    let mut out = DMatrix::zeros(f.nrows(), n_tasks);
    out.view_mut((0, 0), f.shape()).copy_from(f);
    Ok(out)
}

/// A conditioned Gaussian plus what is needed to backpropagate through the conditioning.
#[derive(Clone, Debug)]
pub struct Conditioned {
    pub dist: GaussianDist,
    /// `A = I - Σ Fᵀ M⁻¹ F`.
    a: DMatrix<f64>,
    /// `Fᵀ M⁻¹ (S - F μ)`.
    ft_r: DVector<f64>,
}

impl Conditioned {
    /// Maps adjoints of `(μ', Σ')` to adjoints of `(μ, Σ)`.
    ///
    /// With `dμ' = A dμ + A dΣ Fᵀr` and `dΣ' = A dΣ Aᵀ` the pullback is
    /// `μ̄ = Aᵀ μ̄'` and `Σ̄ = Aᵀ Σ̄' A + (Aᵀ μ̄') (Fᵀ r)ᵀ`.
    pub fn pullback(&self, mean_bar: &DVector<f64>, cov_bar: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let at = self.a.transpose();
        let mu_bar = &at * mean_bar;
        let cov_in = &at * cov_bar * &self.a + &mu_bar * self.ft_r.transpose();
        (mu_bar, cov_in)
    }
}

/// Finds constraint rows that are linearly dependent (with respect to Σ) on earlier rows.
fn dependent_rows(f: &DMatrix<f64>, sigma: &DMatrix<f64>, m: &DMatrix<f64>) -> Vec<usize> {
    let nfc = f.nrows();
    let abs_sigma = sigma.abs();
    let mut accepted: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for k in 0..nfc {
        let fk = f.row(k).abs();
        let reference = (&fk * &abs_sigma * fk.transpose())[(0, 0)];
        let pivot = if accepted.is_empty() {
            m[(k, k)]
        } else {
            let sub = DMatrix::from_fn(accepted.len(), accepted.len(), |i, j| m[(accepted[i], accepted[j])]);
            let cross = DVector::from_fn(accepted.len(), |i, _| m[(accepted[i], k)]);
            match sub.clone().cholesky() {
                Some(c) => m[(k, k)] - cross.dot(&c.solve(&cross)),
                None => 0.0,
            }
        };
        if !(pivot > DEPENDENCE_TOL * reference) || reference == 0.0 {
            bad.push(k);
        } else {
            accepted.push(k);
        }
    }
    bad
}

/// Conditions `dist` on `F f = S` and keeps the pieces needed for [`Conditioned::pullback`].
pub fn condition_with_pullback(dist: &GaussianDist, f: &DMatrix<f64>, s: &DVector<f64>) -> Result<Conditioned> {
    let n = dist.dim();
    if f.ncols() != n || f.nrows() != s.len() {
        return Err(Error::input(format!(
            "constraint of shape {}x{} with {} targets does not fit a {}-dimensional Gaussian",
            f.nrows(),
            f.ncols(),
            s.len(),
            n
        )));
    }
    if f.nrows() == 0 {
        return Ok(Conditioned {
            dist: dist.clone(),
            a: DMatrix::identity(n, n),
            ft_r: DVector::zeros(n),
        });
    }
    let sigma = &dist.cov;
    let sft = sigma * f.transpose();
    let m = symmetrize(&(f * &sft));
    let bad = dependent_rows(f, sigma, &m);
    if !bad.is_empty() {
        return Err(Error::SingularConstraint { rows: bad });
    }
    let chol = cholesky_jittered(&m, false)?;
    // Dᵀ = Σ Fᵀ M⁻¹
    let dt = chol.solve(&sft.transpose()).transpose();
    let a = DMatrix::identity(n, n) - &dt * f;
    let r = chol.solve_vec(&(s - f * &dist.mean));
    let mean = &dist.mean + &sft * &r;
    let cov = symmetrize(&(&a * sigma * a.transpose()));
    let ft_r = f.transpose() * r;
    Ok(Conditioned { dist: GaussianDist { mean, cov }, a, ft_r })
}

/// Gaussian conditioned on `F f = S`: `μ' = A μ + Dᵀ S`, `Σ' = A Σ Aᵀ` with `A = I - Dᵀ F`.
pub fn condition_gaussian(dist: &GaussianDist, f: &DMatrix<f64>, s: &DVector<f64>) -> Result<GaussianDist> {
    Ok(condition_with_pullback(dist, f, s)?.dist)
}

/// Block-diagonal `F_tot = diag(F(x_1), ...)` and stacked `S_tot` over the rows of `points`.
pub fn build_total_constraint(
    spec: &ConstraintSpec,
    points: &DMatrix<f64>,
    n_tasks: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = points.nrows();
    let nfc = spec.n_rows();
    let mut ftot = DMatrix::zeros(nfc * n, n_tasks * n);
    let mut stot = DVector::zeros(nfc * n);
    for i in 0..n {
        let x: Vec<f64> = points.row(i).iter().copied().collect();
        let (f, s) = spec.evaluate(&x, n_tasks)?;
        ftot.view_mut((i * nfc, i * n_tasks), (nfc, n_tasks)).copy_from(&f);
        stot.rows_mut(i * nfc, nfc).copy_from(&s);
    }
    Ok((ftot, stot))
}

/// Constant-constraint fast path: conditions the task distribution once with `S' = S / a`
/// and lifts it to `(a 1) ⊗ μ_t'`, `K_d ⊗ Σ_t'`.
pub fn condition_constant_kronecker(
    task_mean: &DVector<f64>,
    task_cov: &DMatrix<f64>,
    f: &DMatrix<f64>,
    s: &DVector<f64>,
    data_mean_scale: f64,
    data_cov: &DMatrix<f64>,
) -> Result<GaussianDist> {
    if data_mean_scale == 0.0 {
        return Err(Error::input("data mean scale must be non-zero"));
    }
    let task = GaussianDist::new(task_mean.clone(), task_cov.clone())?;
    let cond = condition_gaussian(&task, f, &(s / data_mean_scale))?;
    let n = data_cov.nrows();
    let nf = task_mean.len();
    let mean = DVector::from_fn(n * nf, |k, _| data_mean_scale * cond.mean[k % nf]);
    Ok(GaussianDist { mean, cov: data_cov.kronecker(&cond.cov) })
}

/// Orthogonal projector onto `null(F)` and the minimum-norm solution of `F m = S`.
pub fn nullspace_task_covariance(f: &DMatrix<f64>, s: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (nfc, nf) = f.shape();
    if s.len() != nfc {
        return Err(Error::input("F and S disagree on the number of constraints"));
    }
    let svd = f.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = svd.singular_values.iter().filter(|&&v| v > 1e-12 * smax.max(1e-300)).count();
    if rank < nfc {
        return Err(Error::input(format!("F has rank {rank} but {nfc} rows")));
    }
    let ffi = (f * f.transpose())
        .try_inverse()
        .ok_or_else(|| Error::input("F Fᵀ is not invertible"))?;
    let proj = DMatrix::identity(nf, nf) - f.transpose() * &ffi * f;
    let mean = f.transpose() * (ffi * s);
    Ok((symmetrize(&proj), mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_task_sum_example() {
        let d = GaussianDist::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let f = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let c = condition_gaussian(&d, &f, &DVector::from_vec(vec![2.0])).unwrap();
        assert_relative_eq!(c.mean, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-14);
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert_relative_eq!(c.cov, expect, epsilon = 1e-14);
    }

    #[test]
    fn reconditioning_is_rejected() {
        let d = GaussianDist::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let f = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 0.0]);
        let s = DVector::from_vec(vec![1.0]);
        let once = condition_gaussian(&d, &f, &s).unwrap();
        match condition_gaussian(&once, &f, &s) {
            Err(Error::SingularConstraint { rows }) => assert_eq!(rows, vec![0]),
            other => panic!("expected singular constraint, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_row_is_named() {
        let d = GaussianDist::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let f = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 2.0, 0.0, 2.0]);
        match condition_gaussian(&d, &f, &DVector::from_vec(vec![1.0, 2.0])) {
            Err(Error::SingularConstraint { rows }) => assert_eq!(rows, vec![1]),
            other => panic!("expected singular constraint, got {other:?}"),
        }
    }

    #[test]
    fn padding_adds_zero_columns() {
        let spec = ConstraintSpec::constant(
            DMatrix::from_row_slice(1, 2, &[0.5, 0.5]),
            DVector::from_vec(vec![0.8]),
        )
        .unwrap();
        let (f, _) = spec.evaluate(&[0.0], 4).unwrap();
        assert_eq!(f, DMatrix::from_row_slice(1, 4, &[0.5, 0.5, 0.0, 0.0]));
        assert!(spec.evaluate(&[0.0], 1).is_err());
    }

    #[test]
    fn too_many_rows_rejected() {
        assert!(ConstraintSpec::constant(DMatrix::zeros(3, 2), DVector::zeros(3)).is_err());
    }

    #[test]
    fn rank_deficient_nullspace_rejected() {
        let f = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0]);
        assert!(nullspace_task_covariance(&f, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn identity_rows_zero_the_projector() {
        let f = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let (p, _) = nullspace_task_covariance(&f, &DVector::zeros(1)).unwrap();
        assert!(p.row(0).iter().all(|v| v.abs() < 1e-15));
        assert!(p.column(0).iter().all(|v| v.abs() < 1e-15));
    }
}
