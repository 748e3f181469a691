//! Multitask GP prior, exact prediction and marginal likelihood.
//!
//! Joint vectors are laid out point-major: entry `i * n_tasks + a` holds task `a` at point `i`,
//! which makes the prior covariance `K_d ⊗ Σ_t`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, sorted_eigen};

/// Mean vector and covariance matrix of a multivariate normal.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::input(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(GaussianDist { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }

    /// Restriction to the given index set.
    pub fn select(&self, idx: &[usize]) -> GaussianDist {
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.cov[(idx[r], idx[c])]);
        GaussianDist { mean, cov }
    }
}

/// Kernel and task hyperparameters of a multitask GP in their natural (positive) scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparameters {
    pub sigma_f: f64,
    pub lengthscale: f64,
    /// Low-rank factor `B` of the task covariance, `N_f × r`.
    pub task_factor: DMatrix<f64>,
    /// Positive diagonal `v` of the task covariance.
    pub task_diag: DVector<f64>,
    /// Observation noise standard deviation `σ_n`.
    pub noise: f64,
    /// Constant prior mean per task.
    pub task_means: DVector<f64>,
}

impl Hyperparameters {
    pub fn new(num_tasks: usize, rank: usize) -> Self {
        Hyperparameters {
            sigma_f: 1.0,
            lengthscale: 1.0,
            task_factor: DMatrix::zeros(num_tasks, rank),
            task_diag: DVector::from_element(num_tasks, 1.0),
            noise: 0.1,
            task_means: DVector::zeros(num_tasks),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.task_diag.len()
    }

    pub fn rank(&self) -> usize {
        self.task_factor.ncols()
    }

    /// Length of the unconstrained parameter vector.
    pub fn num_params(num_tasks: usize, rank: usize) -> usize {
        2 + num_tasks * rank + num_tasks + 1 + num_tasks
    }

    /// Unconstrained vector: `[log σ_f, log l, vec(B), log v, log σ_n, μ_t]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut p = vec![self.sigma_f.ln(), self.lengthscale.ln()];
        let (nf, r) = self.task_factor.shape();
        for a in 0..nf {
            for k in 0..r {
                p.push(self.task_factor[(a, k)]);
            }
        }
        p.extend(self.task_diag.iter().map(|v| v.ln()));
        p.push(self.noise.ln());
        p.extend(self.task_means.iter());
        p
    }

    pub fn from_vector(num_tasks: usize, rank: usize, p: &[f64]) -> Result<Self> {
        if p.len() != Self::num_params(num_tasks, rank) {
            return Err(Error::input(format!(
                "expected {} hyperparameters, got {}",
                Self::num_params(num_tasks, rank),
                p.len()
            )));
        }
        let mut it = p.iter().copied();
        let sigma_f = it.next().unwrap().exp();
        let lengthscale = it.next().unwrap().exp();
        let mut task_factor = DMatrix::zeros(num_tasks, rank);
        for a in 0..num_tasks {
            for k in 0..rank {
                task_factor[(a, k)] = it.next().unwrap();
            }
        }
        let task_diag = DVector::from_iterator(num_tasks, (&mut it).take(num_tasks).map(f64::exp));
        let noise = it.next().unwrap().exp();
        let task_means = DVector::from_iterator(num_tasks, it);
        Ok(Hyperparameters {
            sigma_f,
            lengthscale,
            task_factor,
            task_diag,
            noise,
            task_means,
        })
    }
}

/// Gradient of a scalar with respect to the building blocks of the prior.
#[derive(Clone, Debug)]
pub struct PriorAdjoint {
    /// `∂L/∂K_d` (input kernel, `N × N`).
    pub kd: DMatrix<f64>,
    /// `∂L/∂Σ_t` (task covariance before conditioning).
    pub task_cov: DMatrix<f64>,
    /// `∂L/∂μ_t`.
    pub task_means: DVector<f64>,
    /// `∂L/∂σ_n²`.
    pub noise_var: f64,
}

/// Pairwise squared Euclidean distances between the rows of `x1` and `x2`.
pub fn squared_distances(x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x1.nrows(), x2.nrows(), |i, j| {
        (x1.row(i) - x2.row(j)).norm_squared()
    })
}

/// Squared-exponential kernel `σ_f² exp(-‖x - x'‖² / (2 l²))` between the rows of two input matrices.
pub fn rbf_kernel(x1: &DMatrix<f64>, x2: &DMatrix<f64>, sigma_f: f64, lengthscale: f64) -> Result<DMatrix<f64>> {
    if x1.ncols() != x2.ncols() {
        return Err(Error::input(format!(
            "input dimensions differ: {} vs {}",
            x1.ncols(),
            x2.ncols()
        )));
    }
    if !(sigma_f > 0.0 && lengthscale > 0.0) {
        return Err(Error::input("kernel scale and lengthscale must be positive"));
    }
    let s2 = sigma_f * sigma_f;
    let inv = 1.0 / (2.0 * lengthscale * lengthscale);
    Ok(squared_distances(x1, x2).map(|d| s2 * (-d * inv).exp()))
}

/// Index (task) kernel `B Bᵀ + diag(v)`.
pub fn index_task_kernel(task_factor: &DMatrix<f64>, task_diag: &DVector<f64>) -> Result<DMatrix<f64>> {
    if task_factor.nrows() != task_diag.len() {
        return Err(Error::input("task factor rows must equal number of tasks"));
    }
    if task_diag.iter().any(|v| *v <= 0.0) {
        return Err(Error::input("task kernel diagonal must be positive"));
    }
    Ok(task_factor * task_factor.transpose() + DMatrix::from_diagonal(task_diag))
}

/// Joint mean from per-task means repeated over `n_points` points.
pub fn repeat_task_means(task_means: &DVector<f64>, n_points: usize) -> DVector<f64> {
    let nf = task_means.len();
    DVector::from_fn(n_points * nf, |k, _| task_means[k % nf])
}

/// Multitask prior over the given points: mean `1 ⊗ μ_t`, covariance `K_d ⊗ Σ_t`.
pub fn build_multitask_prior(points: &DMatrix<f64>, hyp: &Hyperparameters) -> Result<GaussianDist> {
    let kd = rbf_kernel(points, points, hyp.sigma_f, hyp.lengthscale)?;
    let t = index_task_kernel(&hyp.task_factor, &hyp.task_diag)?;
    Ok(GaussianDist {
        mean: repeat_task_means(&hyp.task_means, points.nrows()),
        cov: kd.kronecker(&t),
    })
}

/// Keeps only observed coordinates. Returns the reduced distribution and the kept indices.
pub fn filter_missing(dist: &GaussianDist, observed: &[bool]) -> Result<(GaussianDist, Vec<usize>)> {
    if observed.len() != dist.dim() {
        return Err(Error::input(format!(
            "mask has length {} but distribution has dimension {}",
            observed.len(),
            dist.dim()
        )));
    }
    let idx: Vec<usize> = (0..observed.len()).filter(|&i| observed[i]).collect();
    Ok((dist.select(&idx), idx))
}

/// Posterior of the last `dim - n_obs` coordinates of a joint prior given noisy observations of
/// the first `n_obs` coordinates.
pub fn gp_predict(joint: &GaussianDist, n_obs: usize, y_obs: &DVector<f64>, noise_var: f64) -> Result<GaussianDist> {
    if y_obs.len() != n_obs || n_obs > joint.dim() {
        return Err(Error::input("observation vector does not match the joint prior"));
    }
    let n_test = joint.dim() - n_obs;
    let k = joint.cov.view((0, 0), (n_obs, n_obs)).clone_owned();
    let ks = joint.cov.view((0, n_obs), (n_obs, n_test)).clone_owned();
    let kss = joint.cov.view((n_obs, n_obs), (n_test, n_test)).clone_owned();
    let m = joint.mean.rows(0, n_obs).clone_owned();
    let ms = joint.mean.rows(n_obs, n_test).clone_owned();
    let mut c = k;
    for i in 0..n_obs {
        c[(i, i)] += noise_var;
    }
    let chol = cholesky_jittered(&c, false)?;
    let alpha = chol.solve_vec(&(y_obs - m));
    let mean = ms + ks.transpose() * alpha;
    let v = chol.solve(&ks);
    let cov = kss - ks.transpose() * v;
    Ok(GaussianDist { mean, cov: crate::linalg::symmetrize(&cov) })
}

/// Predictive mean and marginal variances only; avoids forming the test covariance.
pub fn gp_predict_marginals(
    k: &DMatrix<f64>,
    m: &DVector<f64>,
    ks: &DMatrix<f64>,
    kss_diag: &DVector<f64>,
    ms: &DVector<f64>,
    y_obs: &DVector<f64>,
    noise_var: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut c = k.clone();
    for i in 0..c.nrows() {
        c[(i, i)] += noise_var;
    }
    let chol = cholesky_jittered(&c, false)?;
    let alpha = chol.solve_vec(&(y_obs - m));
    let mean = ms + ks.transpose() * alpha;
    let mut w = ks.clone();
    chol.chol.l_dirty().solve_lower_triangular_mut(&mut w);
    let var = DVector::from_fn(kss_diag.len(), |j, _| (kss_diag[j] - w.column(j).norm_squared()).max(0.0));
    Ok((mean, var))
}

/// Log marginal likelihood `log N(y; m, K + σ_n² I)`.
pub fn log_marginal_likelihood(prior: &GaussianDist, y_obs: &DVector<f64>, noise_var: f64) -> Result<f64> {
    Ok(lml_with_adjoint(prior, y_obs, noise_var, false)?.0)
}

/// Exact LML and, on request, its adjoints `(∂/∂m, ∂/∂K, ∂/∂σ_n²)`.
pub fn lml_with_adjoint(
    prior: &GaussianDist,
    y_obs: &DVector<f64>,
    noise_var: f64,
    want_grad: bool,
) -> Result<(f64, Option<(DVector<f64>, DMatrix<f64>, f64)>)> {
    let n = prior.dim();
    if y_obs.len() != n {
        return Err(Error::input(format!(
            "{} observations for a prior of dimension {}",
            y_obs.len(),
            n
        )));
    }
    let mut c = prior.cov.clone();
    for i in 0..n {
        c[(i, i)] += noise_var;
    }
    let chol = cholesky_jittered(&c, false)?;
    let r = y_obs - &prior.mean;
    let alpha = chol.solve_vec(&r);
    let value = -0.5 * r.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n as f64 * (2.0 * PI).ln();
    if !value.is_finite() {
        return Err(Error::NonFinite("log marginal likelihood".into()));
    }
    if !want_grad {
        return Ok((value, None));
    }
    let cinv = chol.inverse();
    let kbar = (&alpha * alpha.transpose() - cinv) * 0.5;
    let var_bar = kbar.trace();
    Ok((value, Some((alpha, kbar, var_bar))))
}

/// Exact LML for complete data under a Kronecker prior `K_d ⊗ T` with mean `1 ⊗ μ`.
///
/// `y` is `N × N_f`. Uses the eigendecompositions of both factors, so the cost is cubic in
/// `N` and `N_f` separately rather than in their product. Returns the value and adjoints with
/// respect to `K_d`, `T`, `μ` and `σ_n²`.
pub fn kronecker_lml(
    kd: &DMatrix<f64>,
    t: &DMatrix<f64>,
    mu: &DVector<f64>,
    y: &DMatrix<f64>,
    noise_var: f64,
    want_grad: bool,
) -> Result<(f64, Option<(DMatrix<f64>, DMatrix<f64>, DVector<f64>, f64)>)> {
    let (n, nf) = y.shape();
    if kd.nrows() != n || t.nrows() != nf || mu.len() != nf {
        return Err(Error::input("Kronecker factors do not match the data shape"));
    }
    let (ld, ud) = sorted_eigen(kd);
    let (lt, ut) = sorted_eigen(t);
    let ld = ld.map(|v| v.max(0.0));
    let lt = lt.map(|v| v.max(0.0));
    let d = DMatrix::from_fn(n, nf, |p, q| ld[p] * lt[q] + noise_var);
    if d.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
        return Err(Error::Numerical {
            message: "Kronecker spectrum is not positive".into(),
            condition: f64::INFINITY,
        });
    }
    let mut r = y.clone();
    for i in 0..n {
        for a in 0..nf {
            r[(i, a)] -= mu[a];
        }
    }
    let rt = ud.transpose() * &r * &ut;
    let scaled = rt.component_div(&d);
    let value = -0.5 * rt.component_mul(&scaled).sum()
        - 0.5 * d.iter().map(|v| v.ln()).sum::<f64>()
        - 0.5 * (n * nf) as f64 * (2.0 * PI).ln();
    if !value.is_finite() {
        return Err(Error::NonFinite("log marginal likelihood".into()));
    }
    if !want_grad {
        return Ok((value, None));
    }
    let alpha = &ud * &scaled * ut.transpose();
    let c = DVector::from_fn(n, |p, _| (0..nf).map(|q| lt[q] / d[(p, q)]).sum::<f64>());
    let e = DVector::from_fn(nf, |q, _| (0..n).map(|p| ld[p] / d[(p, q)]).sum::<f64>());
    let kd_bar = (&alpha * t * alpha.transpose() - &ud * DMatrix::from_diagonal(&c) * ud.transpose()) * 0.5;
    let t_bar = (alpha.transpose() * kd * &alpha - &ut * DMatrix::from_diagonal(&e) * ut.transpose()) * 0.5;
    let mu_bar = DVector::from_fn(nf, |a, _| alpha.column(a).sum());
    let var_bar = 0.5 * (alpha.norm_squared() - d.iter().map(|v| 1.0 / v).sum::<f64>());
    Ok((value, Some((kd_bar, t_bar, mu_bar, var_bar))))
}

/// Pulls an adjoint with respect to `K_d ⊗ T` back onto the two factors.
pub fn kronecker_adjoint(
    cov_bar: &DMatrix<f64>,
    kd: &DMatrix<f64>,
    t: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = kd.nrows();
    let nf = t.nrows();
    let mut kd_bar = DMatrix::zeros(n, n);
    let mut t_bar = DMatrix::zeros(nf, nf);
    for i in 0..n {
        for j in 0..n {
            let block = cov_bar.view((i * nf, j * nf), (nf, nf));
            kd_bar[(i, j)] = block.component_mul(t).sum();
            t_bar += block * kd[(i, j)];
        }
    }
    (kd_bar, t_bar)
}

/// Chain rule from `(∂/∂K_d, ∂/∂Σ_t, ∂/∂μ_t, ∂/∂σ_n²)` to the unconstrained parameter vector.
pub fn hyper_gradient(
    hyp: &Hyperparameters,
    inputs: &DMatrix<f64>,
    kd: &DMatrix<f64>,
    adj: &PriorAdjoint,
) -> Vec<f64> {
    let l = hyp.lengthscale;
    let d2 = squared_distances(inputs, inputs);
    let g_sf = 2.0 * adj.kd.component_mul(kd).sum();
    let g_l = adj.kd.component_mul(&kd.component_mul(&d2)).sum() / (l * l);
    let tb = &adj.task_cov + adj.task_cov.transpose();
    let b_bar = tb * &hyp.task_factor;
    let mut g = vec![g_sf, g_l];
    let (nf, r) = hyp.task_factor.shape();
    for a in 0..nf {
        for k in 0..r {
            g.push(b_bar[(a, k)]);
        }
    }
    for a in 0..nf {
        g.push(adj.task_cov[(a, a)] * hyp.task_diag[a]);
    }
    g.push(adj.noise_var * 2.0 * hyp.noise * hyp.noise);
    g.extend(adj.task_means.iter());
    g
}
