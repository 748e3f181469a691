//! Assembled multitask GP: kernel, optional constraint, likelihood and inference method.
//!
//! The training objective (exact LML, Laplace LML or ELBO) is differentiated in reverse mode
//! through inference, constraint conditioning, the Kronecker structure and the kernels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::constraint::{build_total_constraint, condition_with_pullback, Conditioned, ConstraintSpec};
use crate::data::TaskedData;
use crate::error::{Error, Result};
use crate::gaussian::{
    gp_predict, gp_predict_marginals, hyper_gradient, index_task_kernel, kronecker_adjoint, kronecker_lml,
    lml_with_adjoint, rbf_kernel, repeat_task_means, GaussianDist, Hyperparameters, PriorAdjoint,
};
use crate::inference::{
    cholesky_pullback, expected_log_lik, laplace_lml, laplace_lml_adjoint, laplace_mode, laplace_predict,
    laplace_predict_marginals,
};
use crate::linalg::{cholesky_jittered, sum_blocks, symmetrize};
use crate::likelihood::ObsLikelihood;
use crate::transform::Nonlinearity;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMethod {
    Exact,
    Laplace,
    Variational,
}

impl std::str::FromStr for InferenceMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(InferenceMethod::Exact),
            "laplace" => Ok(InferenceMethod::Laplace),
            "vi" | "variational" => Ok(InferenceMethod::Variational),
            other => Err(Error::Config(format!("unknown inference method '{other}'"))),
        }
    }
}

/// Static description of a multitask GP.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub n_tasks: usize,
    /// Rank of the task factor `B`.
    pub rank: usize,
    pub constraint: Option<ConstraintSpec>,
    /// Likelihood of each task column; virtual observations always use the Gaussian one.
    pub likelihoods: Vec<Nonlinearity>,
    pub inference: InferenceMethod,
}

impl ModelSpec {
    /// Unconstrained Gaussian model with full-rank task kernel.
    pub fn gaussian(n_tasks: usize) -> Self {
        ModelSpec {
            n_tasks,
            rank: n_tasks,
            constraint: None,
            likelihoods: vec![Nonlinearity::Identity; n_tasks],
            inference: InferenceMethod::Exact,
        }
    }

    pub fn with_constraint(mut self, c: ConstraintSpec) -> Self {
        self.constraint = Some(c);
        self
    }

    pub fn with_likelihoods(mut self, liks: Vec<Nonlinearity>, inference: InferenceMethod) -> Self {
        self.likelihoods = liks;
        self.inference = inference;
        self
    }
}

/// Posterior at test points, as `N* × N_f` matrices.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
    /// Full joint covariance (point-major) when requested.
    pub cov: Option<DMatrix<f64>>,
}

impl Prediction {
    pub fn std(&self) -> DMatrix<f64> {
        self.var.map(|v| v.max(0.0).sqrt())
    }
}

/// Task-level distribution plus the Kronecker input kernel, or a fully materialized prior
/// when the constraint matrix varies with the input.
enum Structure {
    Kron {
        mu_t: DVector<f64>,
        t: DMatrix<f64>,
        cond: Option<Conditioned>,
        /// Per-point task conditioning when only the target `S(x)` varies; the conditioned
        /// covariance is the same at every point, the mean is not.
        point_conds: Option<Vec<Conditioned>>,
    },
    Full {
        cond: Conditioned,
    },
}

struct PriorParts {
    kd: DMatrix<f64>,
    t_raw: DMatrix<f64>,
    structure: Structure,
}

/// A multitask GP bound to its (transformed) training data.
#[derive(Clone, Debug)]
pub struct GpModel {
    pub spec: ModelSpec,
    pub data: TaskedData,
    obs_idx: Vec<usize>,
    y: DVector<f64>,
    liks: Vec<ObsLikelihood>,
    /// Laplace `a` from the last successful mode search, reused as a warm start.
    laplace_warm: Option<DVector<f64>>,
}

impl GpModel {
    pub fn new(spec: ModelSpec, data: TaskedData) -> Result<Self> {
        if data.n_tasks() != spec.n_tasks || spec.likelihoods.len() != spec.n_tasks {
            return Err(Error::input(format!(
                "model has {} tasks and {} likelihoods, data has {} tasks",
                spec.n_tasks,
                spec.likelihoods.len(),
                data.n_tasks()
            )));
        }
        if spec.rank == 0 {
            return Err(Error::input("task kernel rank must be positive"));
        }
        if data.n_observed() == 0 {
            return Err(Error::input("no observations"));
        }
        if let Some(c) = &spec.constraint {
            if c.n_cols() > spec.n_tasks {
                return Err(Error::input("constraint refers to more tasks than the model has"));
            }
        }
        if spec.inference == InferenceMethod::Exact && spec.likelihoods.iter().any(|l| !l.is_identity()) {
            return Err(Error::input("exact inference requires Gaussian likelihoods on every task"));
        }
        let mask = data.observed_flat();
        let obs_idx: Vec<usize> = (0..mask.len()).filter(|&k| mask[k]).collect();
        let y = data.observed_values();
        let virt = data.virtual_flat_observed();
        let tasks = data.observed_tasks();
        let liks = tasks
            .iter()
            .zip(&virt)
            .zip(y.iter())
            .map(|((&t, &v), &yv)| {
                if v {
                    ObsLikelihood::virtual_for(&spec.likelihoods[t], yv)
                } else {
                    ObsLikelihood::Transformed(spec.likelihoods[t].clone())
                }
            })
            .collect();
        Ok(GpModel { spec, data, obs_idx, y, liks, laplace_warm: None })
    }

    pub fn n_obs(&self) -> usize {
        self.obs_idx.len()
    }

    pub fn n_hyper(&self) -> usize {
        Hyperparameters::num_params(self.spec.n_tasks, self.spec.rank)
    }

    /// Length of the full parameter vector (hyperparameters plus variational parameters).
    pub fn n_params(&self) -> usize {
        let n = self.n_obs();
        match self.spec.inference {
            InferenceMethod::Variational => self.n_hyper() + n + n * (n + 1) / 2,
            _ => self.n_hyper(),
        }
    }

    pub fn hyperparameters(&self, params: &[f64]) -> Result<Hyperparameters> {
        if params.len() != self.n_params() {
            return Err(Error::input(format!("expected {} parameters, got {}", self.n_params(), params.len())));
        }
        Hyperparameters::from_vector(self.spec.n_tasks, self.spec.rank, &params[..self.n_hyper()])
    }

    /// Forgets the Laplace warm start (used when training restarts).
    pub fn reset_warm_start(&mut self) {
        self.laplace_warm = None;
    }

    /// Random initial parameter vector.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut h = Hyperparameters::new(self.spec.n_tasks, self.spec.rank);
        let log_u = |rng: &mut R, lo: f64, hi: f64| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
        h.lengthscale = log_u(rng, 0.3, 3.0);
        h.sigma_f = log_u(rng, 0.1, 1.0);
        h.noise = log_u(rng, 0.1, 1.0);
        let normal = Normal::new(0.0, 0.5f64.sqrt()).expect("valid normal");
        for v in h.task_factor.iter_mut() {
            *v = normal.sample(rng);
        }
        let mut count = vec![0usize; self.spec.n_tasks];
        for (&t, &v) in self.data.observed_tasks().iter().zip(self.y.iter()) {
            h.task_means[t] += v;
            count[t] += 1;
        }
        for (m, &c) in h.task_means.iter_mut().zip(&count) {
            *m = if c > 0 { *m / c as f64 } else { 0.0 };
        }
        let mut p = h.to_vector();
        if self.spec.inference == InferenceMethod::Variational {
            let n = self.n_obs();
            p.extend(std::iter::repeat_n(0.0, n + n * (n + 1) / 2));
        }
        p
    }

    fn prior_parts(&self, hyp: &Hyperparameters, x: &DMatrix<f64>) -> Result<PriorParts> {
        let kd = rbf_kernel(x, x, hyp.sigma_f, hyp.lengthscale)?;
        let t_raw = index_task_kernel(&hyp.task_factor, &hyp.task_diag)?;
        let nf = self.spec.n_tasks;
        let structure = match &self.spec.constraint {
            None => Structure::Kron { mu_t: hyp.task_means.clone(), t: t_raw.clone(), cond: None, point_conds: None },
            Some(c) if c.is_constant() => {
                let (f, s) = c.evaluate(&[], nf)?;
                let task = GaussianDist { mean: hyp.task_means.clone(), cov: t_raw.clone() };
                let cond = condition_with_pullback(&task, &f, &s)?;
                Structure::Kron { mu_t: cond.dist.mean.clone(), t: cond.dist.cov.clone(), cond: Some(cond), point_conds: None }
            }
            Some(c) if c.has_fixed_matrix() => {
                let conds = task_conditionings(c, &hyp.task_means, &t_raw, x)?;
                let first = conds[0].clone();
                Structure::Kron { mu_t: first.dist.mean.clone(), t: first.dist.cov.clone(), cond: Some(first), point_conds: Some(conds) }
            }
            Some(c) => {
                let full = GaussianDist {
                    mean: repeat_task_means(&hyp.task_means, x.nrows()),
                    cov: kd.kronecker(&t_raw),
                };
                let (ftot, stot) = build_total_constraint(c, x, nf)?;
                Structure::Full { cond: condition_with_pullback(&full, &ftot, &stot)? }
            }
        };
        Ok(PriorParts { kd, t_raw, structure })
    }

    /// Prior restricted to the given flat indices.
    fn prior_on(&self, parts: &PriorParts, idx: &[usize]) -> GaussianDist {
        let nf = self.spec.n_tasks;
        match &parts.structure {
            Structure::Kron { mu_t, t, point_conds, .. } => GaussianDist {
                mean: DVector::from_iterator(
                    idx.len(),
                    idx.iter().map(|&p| match point_conds {
                        Some(pc) => pc[p / nf].dist.mean[p % nf],
                        None => mu_t[p % nf],
                    }),
                ),
                cov: DMatrix::from_fn(idx.len(), idx.len(), |r, c| {
                    let (p, q) = (idx[r], idx[c]);
                    parts.kd[(p / nf, q / nf)] * t[(p % nf, q % nf)]
                }),
            },
            Structure::Full { cond } => cond.dist.select(idx),
        }
    }

    /// Pulls adjoints of the observed prior `(m̄, K̄)` back to the prior building blocks.
    fn backprop(&self, parts: &PriorParts, mbar: &DVector<f64>, kbar: &DMatrix<f64>, noise_var_bar: f64) -> PriorAdjoint {
        let nf = self.spec.n_tasks;
        let n = parts.kd.nrows();
        let idx = &self.obs_idx;
        match &parts.structure {
            Structure::Kron { t, cond, point_conds, .. } => {
                let mut kd_bar = DMatrix::zeros(n, n);
                let mut t_bar = DMatrix::zeros(nf, nf);
                let mut mu_bar = DVector::zeros(nf);
                let mut point_bar = point_conds.as_ref().map(|_| DMatrix::<f64>::zeros(nf, n));
                for (r, &p) in idx.iter().enumerate() {
                    match point_bar.as_mut() {
                        Some(pb) => pb[(p % nf, p / nf)] += mbar[r],
                        None => mu_bar[p % nf] += mbar[r],
                    }
                    for (c, &q) in idx.iter().enumerate() {
                        let v = kbar[(r, c)];
                        kd_bar[(p / nf, q / nf)] += v * t[(p % nf, q % nf)];
                        t_bar[(p % nf, q % nf)] += v * parts.kd[(p / nf, q / nf)];
                    }
                }
                let (mut mu_bar, mut t_bar) = match cond {
                    Some(c) => c.pullback(&mu_bar, &t_bar),
                    None => (mu_bar, t_bar),
                };
                if let (Some(pc), Some(pb)) = (point_conds, point_bar) {
                    let zero = DMatrix::zeros(nf, nf);
                    for (i, c) in pc.iter().enumerate() {
                        let col = pb.column(i).into_owned();
                        if col.iter().any(|&v| v != 0.0) {
                            let (m, tb) = c.pullback(&col, &zero);
                            mu_bar += m;
                            t_bar += tb;
                        }
                    }
                }
                PriorAdjoint { kd: kd_bar, task_cov: t_bar, task_means: mu_bar, noise_var: noise_var_bar }
            }
            Structure::Full { cond } => {
                let dim = n * nf;
                let mut m_full = DVector::zeros(dim);
                let mut k_full = DMatrix::zeros(dim, dim);
                for (r, &p) in idx.iter().enumerate() {
                    m_full[p] = mbar[r];
                    for (c, &q) in idx.iter().enumerate() {
                        k_full[(p, q)] = kbar[(r, c)];
                    }
                }
                let (m0, k0) = cond.pullback(&m_full, &k_full);
                let (kd_bar, t_bar) = kronecker_adjoint(&k0, &parts.kd, &parts.t_raw);
                PriorAdjoint { kd: kd_bar, task_cov: t_bar, task_means: sum_blocks(&m0, nf), noise_var: noise_var_bar }
            }
        }
    }

    fn variational_parts(&self, params: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n_obs();
        let off = self.n_hyper();
        let mu = DVector::from_column_slice(&params[off..off + n]);
        let mut l = DMatrix::zeros(n, n);
        let mut k = off + n;
        for i in 0..n {
            for j in 0..=i {
                l[(i, j)] = if i == j { params[k].exp() } else { params[k] };
                k += 1;
            }
        }
        (mu, l)
    }

    /// Training objective and (optionally) its gradient with respect to the parameter vector.
    pub fn objective(&mut self, params: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let hyp = self.hyperparameters(params)?;
        let x = self.data.inputs.clone();
        let parts = self.prior_parts(&hyp, &x)?;
        let noise_var = hyp.noise * hyp.noise;
        let fast_kron = self.spec.inference == InferenceMethod::Exact
            && self.data.is_complete()
            && matches!(parts.structure, Structure::Kron { point_conds: None, .. });
        if fast_kron {
            let Structure::Kron { mu_t, t, cond, .. } = &parts.structure else { unreachable!() };
            let (value, adj) = kronecker_lml(&parts.kd, t, mu_t, &self.data.values, noise_var, want_grad)?;
            let grad = adj.map(|(kd_bar, t_bar, mu_bar, var_bar)| {
                let (mu_bar, t_bar) = match cond {
                    Some(c) => c.pullback(&mu_bar, &t_bar),
                    None => (mu_bar, t_bar),
                };
                let adj = PriorAdjoint { kd: kd_bar, task_cov: t_bar, task_means: mu_bar, noise_var: var_bar };
                hyper_gradient(&hyp, &x, &parts.kd, &adj)
            });
            return Ok((value, grad));
        }
        let prior = self.prior_on(&parts, &self.obs_idx);
        match self.spec.inference {
            InferenceMethod::Exact => {
                let (value, adj) = lml_with_adjoint(&prior, &self.y, noise_var, want_grad)?;
                let grad = adj.map(|(mbar, kbar, var_bar)| {
                    let a = self.backprop(&parts, &mbar, &kbar, var_bar);
                    hyper_gradient(&hyp, &x, &parts.kd, &a)
                });
                Ok((value, grad))
            }
            InferenceMethod::Laplace => {
                let warm = self.laplace_warm.clone();
                let state = match laplace_mode(&prior, &self.y, &self.liks, hyp.noise, 1.0, warm.as_ref()) {
                    Ok(s) => s,
                    Err(_) if warm.is_some() => laplace_mode(&prior, &self.y, &self.liks, hyp.noise, 1.0, None)?,
                    Err(e) => return Err(e),
                };
                let value = laplace_lml(&state, &prior);
                if !value.is_finite() {
                    return Err(Error::NonFinite("Laplace log marginal likelihood".into()));
                }
                self.laplace_warm = Some(state.a.clone());
                if !want_grad {
                    return Ok((value, None));
                }
                let (mbar, kbar, sbar) = laplace_lml_adjoint(&state, &prior)?;
                let a = self.backprop(&parts, &mbar, &kbar, sbar / (2.0 * hyp.noise));
                Ok((value, Some(hyper_gradient(&hyp, &x, &parts.kd, &a))))
            }
            InferenceMethod::Variational => self.elbo_objective(params, &hyp, &x, &parts, &prior, want_grad),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn elbo_objective(
        &self,
        params: &[f64],
        hyp: &Hyperparameters,
        x: &DMatrix<f64>,
        parts: &PriorParts,
        prior: &GaussianDist,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let n = self.n_obs();
        let (mu_u, l_u) = self.variational_parts(params);
        let chol = cholesky_jittered(&prior.cov, true)?;
        let l = chol.l();
        let mean = &prior.mean + &l * &mu_u;
        let c = &l * &l_u;
        let var = DVector::from_fn(n, |i, _| c.row(i).norm_squared());
        let ell = expected_log_lik(&mean, &var, &self.y, &self.liks, hyp.noise)?;
        let logdiag: f64 = (0..n).map(|i| l_u[(i, i)].ln()).sum();
        let kl = 0.5 * (l_u.norm_squared() + mu_u.norm_squared() - n as f64) - logdiag;
        let value = ell.value - kl;
        if !value.is_finite() {
            return Err(Error::NonFinite("evidence lower bound".into()));
        }
        if !want_grad {
            return Ok((value, None));
        }
        let cbar = DMatrix::from_fn(n, n, |i, j| 2.0 * ell.d_var[i] * c[(i, j)]);
        let mut lbar = &ell.d_mean * mu_u.transpose() + &cbar * l_u.transpose();
        for i in 0..n {
            for j in i + 1..n {
                lbar[(i, j)] = 0.0;
            }
        }
        let kbar = cholesky_pullback(&l, &lbar);
        let adj = self.backprop(parts, &ell.d_mean, &kbar, ell.d_sigma / (2.0 * hyp.noise));
        let mut grad = hyper_gradient(hyp, x, &parts.kd, &adj);
        let mu_bar = l.transpose() * &ell.d_mean - &mu_u;
        grad.extend(mu_bar.iter());
        let lu_bar = l.transpose() * &cbar - &l_u;
        for i in 0..n {
            for j in 0..=i {
                if i == j {
                    // raw diagonal is log L_ii; the KL log-det term contributes +1
                    grad.push(lu_bar[(i, i)] * l_u[(i, i)] + 1.0);
                } else {
                    grad.push(lu_bar[(i, j)]);
                }
            }
        }
        Ok((value, Some(grad)))
    }

    /// Posterior of all tasks at the rows of `x_test`.
    pub fn predict(&self, params: &[f64], x_test: &DMatrix<f64>, full_cov: bool) -> Result<Prediction> {
        let hyp = self.hyperparameters(params)?;
        let nf = self.spec.n_tasks;
        let n_train = self.data.n_points();
        let n_test = x_test.nrows();
        if x_test.ncols() != self.data.inputs.ncols() {
            return Err(Error::input("test inputs have the wrong dimension"));
        }
        let mut x_all = DMatrix::zeros(n_train + n_test, x_test.ncols());
        x_all.rows_mut(0, n_train).copy_from(&self.data.inputs);
        x_all.rows_mut(n_train, n_test).copy_from(x_test);
        let (prior, ks, kss, kss_diag, ms) = self.joint_blocks(&hyp, &x_all, n_train, n_test, full_cov)?;
        let noise_var = hyp.noise * hyp.noise;
        let (mean, var, cov) = match self.spec.inference {
            InferenceMethod::Exact => {
                if let Some(kss) = kss {
                    let n = prior.dim();
                    let mut joint = GaussianDist { mean: DVector::zeros(n + ms.len()), cov: DMatrix::zeros(n + ms.len(), n + ms.len()) };
                    joint.mean.rows_mut(0, n).copy_from(&prior.mean);
                    joint.mean.rows_mut(n, ms.len()).copy_from(&ms);
                    joint.cov.view_mut((0, 0), (n, n)).copy_from(&prior.cov);
                    joint.cov.view_mut((0, n), ks.shape()).copy_from(&ks);
                    joint.cov.view_mut((n, 0), (ks.ncols(), ks.nrows())).copy_from(&ks.transpose());
                    joint.cov.view_mut((n, n), kss.shape()).copy_from(&kss);
                    let post = gp_predict(&joint, n, &self.y, noise_var)?;
                    let var = post.cov.diagonal();
                    (post.mean, var, Some(post.cov))
                } else {
                    let (m, v) = gp_predict_marginals(&prior.cov, &prior.mean, &ks, &kss_diag, &ms, &self.y, noise_var)?;
                    (m, v, None)
                }
            }
            InferenceMethod::Laplace => {
                let state = match laplace_mode(&prior, &self.y, &self.liks, hyp.noise, 1.0, self.laplace_warm.as_ref()) {
                    Ok(s) => s,
                    Err(_) => laplace_mode(&prior, &self.y, &self.liks, hyp.noise, 1.0, None)?,
                };
                if let Some(kss) = kss {
                    let post = laplace_predict(&state, &ks, &kss, &ms)?;
                    let var = post.cov.diagonal();
                    (post.mean, var, Some(post.cov))
                } else {
                    let (m, v) = laplace_predict_marginals(&state, &ks, &kss_diag, &ms)?;
                    (m, v, None)
                }
            }
            InferenceMethod::Variational => {
                let (mu_u, l_u) = self.variational_parts(params);
                let chol = cholesky_jittered(&prior.cov, true)?;
                let mut v = ks.clone();
                chol.chol.l_dirty().solve_lower_triangular_mut(&mut v);
                let mean = &ms + v.transpose() * &mu_u;
                let lv = l_u.transpose() * &v;
                if let Some(kss) = kss {
                    let cov = symmetrize(&(kss - v.transpose() * &v + lv.transpose() * &lv));
                    (mean, cov.diagonal(), Some(cov))
                } else {
                    let var = DVector::from_fn(ms.len(), |j, _| {
                        (kss_diag[j] - v.column(j).norm_squared() + lv.column(j).norm_squared()).max(0.0)
                    });
                    (mean, var, None)
                }
            }
        };
        let to_mat = |v: &DVector<f64>| DMatrix::from_fn(n_test, nf, |i, a| v[i * nf + a]);
        Ok(Prediction { mean: to_mat(&mean), var: to_mat(&var), cov })
    }

    /// Observed-train prior, cross covariance to all test entries, test covariance (or its
    /// diagonal) and test mean.
    #[allow(clippy::type_complexity)]
    fn joint_blocks(
        &self,
        hyp: &Hyperparameters,
        x_all: &DMatrix<f64>,
        n_train: usize,
        n_test: usize,
        full_cov: bool,
    ) -> Result<(GaussianDist, DMatrix<f64>, Option<DMatrix<f64>>, DVector<f64>, DVector<f64>)> {
        let nf = self.spec.n_tasks;
        let test_idx: Vec<usize> = (n_train * nf..(n_train + n_test) * nf).collect();
        let varying = matches!(&self.spec.constraint, Some(c) if !c.has_fixed_matrix());
        if varying {
            let parts = self.prior_parts(hyp, x_all)?;
            let Structure::Full { cond } = parts.structure else { unreachable!() };
            let joint = &cond.dist;
            let prior = joint.select(&self.obs_idx);
            let ks = DMatrix::from_fn(self.obs_idx.len(), test_idx.len(), |r, c| joint.cov[(self.obs_idx[r], test_idx[c])]);
            let test = joint.select(&test_idx);
            let diag = test.cov.diagonal();
            return Ok((prior, ks, full_cov.then_some(test.cov), diag, test.mean));
        }
        // Kronecker structure: only the task-level conditioning is needed
        let t_raw = index_task_kernel(&hyp.task_factor, &hyp.task_diag)?;
        let x_train = x_all.rows(0, n_train).clone_owned();
        let x_test = x_all.rows(n_train, n_test).clone_owned();
        // task means per point of x_all
        let (means, t) = match &self.spec.constraint {
            None => (DMatrix::from_fn(nf, n_train + n_test, |a, _| hyp.task_means[a]), t_raw),
            Some(c) if c.is_constant() => {
                let (f, s) = c.evaluate(&[], nf)?;
                let cond = condition_with_pullback(&GaussianDist { mean: hyp.task_means.clone(), cov: t_raw }, &f, &s)?;
                (DMatrix::from_fn(nf, n_train + n_test, |a, _| cond.dist.mean[a]), cond.dist.cov)
            }
            Some(c) => {
                let conds = task_conditionings(c, &hyp.task_means, &t_raw, x_all)?;
                let m = DMatrix::from_fn(nf, n_train + n_test, |a, i| conds[i].dist.mean[a]);
                (m, conds[0].dist.cov.clone())
            }
        };
        let kd = rbf_kernel(&x_train, &x_train, hyp.sigma_f, hyp.lengthscale)?;
        let kx = rbf_kernel(&x_train, &x_test, hyp.sigma_f, hyp.lengthscale)?;
        let idx = &self.obs_idx;
        let prior = GaussianDist {
            mean: DVector::from_iterator(idx.len(), idx.iter().map(|&p| means[(p % nf, p / nf)])),
            cov: DMatrix::from_fn(idx.len(), idx.len(), |r, c| kd[(idx[r] / nf, idx[c] / nf)] * t[(idx[r] % nf, idx[c] % nf)]),
        };
        let ks = DMatrix::from_fn(idx.len(), n_test * nf, |r, c| kx[(idx[r] / nf, c / nf)] * t[(idx[r] % nf, c % nf)]);
        let sf2 = hyp.sigma_f * hyp.sigma_f;
        let diag = DVector::from_fn(n_test * nf, |c, _| sf2 * t[(c % nf, c % nf)]);
        let ms = DVector::from_fn(n_test * nf, |c, _| means[(c % nf, n_train + c / nf)]);
        let kss = if full_cov {
            let kt = rbf_kernel(&x_test, &x_test, hyp.sigma_f, hyp.lengthscale)?;
            Some(kt.kronecker(&t))
        } else {
            None
        };
        Ok((prior, ks, kss, diag, ms))
    }

    /// Prior (after constraint conditioning) of all tasks at the given inputs.
    pub fn prior_at(&self, params: &[f64], x: &DMatrix<f64>) -> Result<GaussianDist> {
        let hyp = self.hyperparameters(params)?;
        let parts = self.prior_parts(&hyp, x)?;
        let all: Vec<usize> = (0..x.nrows() * self.spec.n_tasks).collect();
        Ok(self.prior_on(&parts, &all))
    }
}

/// Task-level conditioning at every input point for a constraint with fixed `F`.
fn task_conditionings(c: &ConstraintSpec, mu: &DVector<f64>, t: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Vec<Conditioned>> {
    let task = GaussianDist { mean: mu.clone(), cov: t.clone() };
    (0..x.nrows())
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let (f, s) = c.evaluate(&row, mu.len())?;
            condition_with_pullback(&task, &f, &s)
        })
        .collect()
}
