//! Laplace approximation and variational inference for transformed (non-Gaussian) likelihoods.
//!
//! Only the prior covariance `K` itself is used, never `K⁻¹`, because priors conditioned on a
//! constraint are singular.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::gaussian::GaussianDist;
use crate::likelihood::{observation_likelihood, LikDerivs, ObsLikelihood};
use crate::linalg::{cholesky_jittered, symmetrize};

/// Newton tolerance on `‖f_new - f‖∞` (relative to `max(1, ‖f‖∞)`).
pub const NEWTON_TOL: f64 = 1e-9;
pub const NEWTON_MAX_ITER: usize = 200;
/// Number of Gauss–Hermite nodes used for the expected log-likelihood.
pub const GH_ORDER: usize = 32;

/// Converged Laplace approximation around the posterior mode.
#[derive(Clone, Debug)]
pub struct LaplaceState {
    pub mode_f_hat: DVector<f64>,
    /// Negative second derivative of the log-likelihood at the mode.
    pub w: DVector<f64>,
    /// `max(W, 0)`, used wherever a factorization needs a non-negative diagonal.
    pub w_clipped: DVector<f64>,
    /// Gradient of the log-likelihood at the mode.
    pub grad: DVector<f64>,
    /// `a` with `f̂ = m + K a`.
    pub a: DVector<f64>,
    /// Step size of the last accepted Newton update.
    pub step_gamma: f64,
    pub iterations: usize,
    /// `Σ log p(y'|f̂)`.
    pub log_lik: f64,
    chol_b: Cholesky<f64, Dyn>,
    derivs: Vec<LikDerivs>,
}

impl LaplaceState {
    /// `‖f̂ - m - K ∇log p(y'|f̂)‖∞`.
    pub fn fixed_point_residual(&self, prior: &GaussianDist) -> f64 {
        let r = &self.mode_f_hat - &prior.mean - &prior.cov * &self.grad;
        r.amax()
    }
}

fn check_inputs(prior: &GaussianDist, y: &DVector<f64>, liks: &[ObsLikelihood]) -> Result<()> {
    if y.len() != prior.dim() || liks.len() != prior.dim() {
        return Err(Error::input(format!(
            "prior of dimension {} with {} observations and {} likelihoods",
            prior.dim(),
            y.len(),
            liks.len()
        )));
    }
    Ok(())
}

fn evaluate(liks: &[ObsLikelihood], y: &DVector<f64>, f: &DVector<f64>, sigma: f64) -> Vec<LikDerivs> {
    liks.iter()
        .enumerate()
        .map(|(i, l)| observation_likelihood(l, y[i], f[i], sigma))
        .collect()
}

fn factor_b(k: &DMatrix<f64>, sw: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let mut b = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)] * sw[j]);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    let c = cholesky_jittered(&b, false)?;
    Ok(c.chol)
}

/// Newton search for the mode of `log p(y'|f') + log N(f'; m, K)`.
///
/// Steps start at `gamma` and are halved until the objective does not decrease. `init` is a
/// warm start for `a` (with `f' = m + K a`), typically the `a` of a previous fit.
pub fn laplace_mode(
    prior: &GaussianDist,
    y: &DVector<f64>,
    liks: &[ObsLikelihood],
    sigma_n: f64,
    gamma: f64,
    init: Option<&DVector<f64>>,
) -> Result<LaplaceState> {
    check_inputs(prior, y, liks)?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::input("Newton step size must lie in (0, 1]"));
    }
    let k = &prior.cov;
    let m = &prior.mean;
    let n = m.len();
    let mut a = match init {
        Some(a0) if a0.len() == n => a0.clone(),
        _ => DVector::zeros(n),
    };
    let objective = |a: &DVector<f64>| -> (DVector<f64>, f64, Vec<LikDerivs>) {
        let f = m + k * a;
        let d = evaluate(liks, y, &f, sigma_n);
        let ll: f64 = d.iter().map(|v| v.logp).sum();
        let psi = -0.5 * a.dot(&(&f - m)) + ll;
        (f, psi, d)
    };
    let (mut f, mut psi, mut derivs) = objective(&a);
    let mut last_step = f64::INFINITY;
    let mut gamma_used = gamma;
    for it in 0..NEWTON_MAX_ITER {
        let g = DVector::from_iterator(n, derivs.iter().map(|d| d.d1));
        let wc = DVector::from_iterator(n, derivs.iter().map(|d| (-d.d2).max(0.0)));
        let sw = wc.map(f64::sqrt);
        let chol = factor_b(k, &sw)?;
        let b = wc.component_mul(&(&f - m)) + &g;
        let kb = k * &b;
        let inner = chol.solve(&sw.component_mul(&kb));
        let a_full = &b - sw.component_mul(&inner);
        let da = a_full - &a;
        let mut step = gamma;
        let mut accepted = None;
        for _ in 0..40 {
            let a_try = &a + &da * step;
            let (f_try, psi_try, d_try) = objective(&a_try);
            if psi_try.is_finite() && psi_try >= psi - 1e-12 * psi.abs().max(1.0) {
                accepted = Some((a_try, f_try, psi_try, d_try));
                break;
            }
            step *= 0.5;
        }
        let Some((a_new, f_new, psi_new, d_new)) = accepted else {
            // no ascent possible along the Newton direction: numerically at the optimum
            return finish(prior, a, f, derivs, gamma_used, it);
        };
        let scale = f.amax().max(1.0);
        last_step = (&f_new - &f).amax();
        gamma_used = step;
        a = a_new;
        f = f_new;
        psi = psi_new;
        derivs = d_new;
        if last_step <= NEWTON_TOL * scale {
            return finish(prior, a, f, derivs, gamma_used, it + 1);
        }
    }
    Err(Error::NoConvergence { iterations: NEWTON_MAX_ITER, last_step })
}

fn finish(
    prior: &GaussianDist,
    a: DVector<f64>,
    f: DVector<f64>,
    derivs: Vec<LikDerivs>,
    gamma: f64,
    iterations: usize,
) -> Result<LaplaceState> {
    let n = f.len();
    let grad = DVector::from_iterator(n, derivs.iter().map(|d| d.d1));
    let w = DVector::from_iterator(n, derivs.iter().map(|d| -d.d2));
    let w_clipped = w.map(|v| v.max(0.0));
    let chol_b = factor_b(&prior.cov, &w_clipped.map(f64::sqrt))?;
    let log_lik = derivs.iter().map(|d| d.logp).sum();
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Laplace mode".into()));
    }
    Ok(LaplaceState {
        mode_f_hat: f,
        w,
        w_clipped,
        grad,
        a,
        step_gamma: gamma,
        iterations,
        log_lik,
        chol_b,
        derivs,
    })
}

/// Predictive distribution `m* + K*ᵀ a`, `K** - K*ᵀ (K + W⁻¹)⁻¹ K*`.
pub fn laplace_predict(
    state: &LaplaceState,
    ks: &DMatrix<f64>,
    kss: &DMatrix<f64>,
    ms: &DVector<f64>,
) -> Result<GaussianDist> {
    let (mean, v) = laplace_predict_parts(state, ks, ms)?;
    let cov = kss - v.transpose() * &v;
    Ok(GaussianDist { mean, cov: symmetrize(&cov) })
}

/// Mean and marginal variances only.
pub fn laplace_predict_marginals(
    state: &LaplaceState,
    ks: &DMatrix<f64>,
    kss_diag: &DVector<f64>,
    ms: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (mean, v) = laplace_predict_parts(state, ks, ms)?;
    let var = DVector::from_fn(kss_diag.len(), |j, _| (kss_diag[j] - v.column(j).norm_squared()).max(0.0));
    Ok((mean, var))
}

fn laplace_predict_parts(
    state: &LaplaceState,
    ks: &DMatrix<f64>,
    ms: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if ks.nrows() != state.a.len() || ks.ncols() != ms.len() {
        return Err(Error::input("cross covariance does not match the Laplace state"));
    }
    let mean = ms + ks.transpose() * &state.a;
    let sw = state.w_clipped.map(f64::sqrt);
    let mut v = DMatrix::from_fn(ks.nrows(), ks.ncols(), |i, j| sw[i] * ks[(i, j)]);
    state.chol_b.l_dirty().solve_lower_triangular_mut(&mut v);
    Ok((mean, v))
}

/// Laplace approximation of the log marginal likelihood,
/// `-½ aᵀ(f̂ - m) + log p(y'|f̂) - ½ log|I + W^½ K W^½|`.
pub fn laplace_lml(state: &LaplaceState, prior: &GaussianDist) -> f64 {
    let l = state.chol_b.l_dirty();
    let half_logdet: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * state.a.dot(&(&state.mode_f_hat - &prior.mean)) + state.log_lik - half_logdet
}

/// Adjoints of [`laplace_lml`] with respect to `m`, `K` and `σ_n`, including the implicit
/// dependence of the mode on all three.
pub fn laplace_lml_adjoint(
    state: &LaplaceState,
    prior: &GaussianDist,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let k = &prior.cov;
    let n = k.nrows();
    let sw = state.w_clipped.map(f64::sqrt);
    let binv = state.chol_b.inverse();
    let r = DMatrix::from_fn(n, n, |i, j| sw[i] * binv[(i, j)] * sw[j]);
    let mut v = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)]);
    state.chol_b.l_dirty().solve_lower_triangular_mut(&mut v);
    let sigma_diag = DVector::from_fn(n, |i, _| k[(i, i)] - v.column(i).norm_squared());
    let active = DVector::from_fn(n, |i, _| if state.w[i] > 0.0 { 1.0 } else { 0.0 });
    let d3 = DVector::from_iterator(n, state.derivs.iter().map(|d| d.d3));
    let ds = DVector::from_iterator(n, state.derivs.iter().map(|d| d.ds));
    let ds_d1 = DVector::from_iterator(n, state.derivs.iter().map(|d| d.ds_d1));
    let ds_d2 = DVector::from_iterator(n, state.derivs.iter().map(|d| d.ds_d2));
    // gradient of -½ log|B| with respect to the mode
    let s2 = DVector::from_fn(n, |i, _| 0.5 * sigma_diag[i] * d3[i] * active[i]);
    // z = (I + W K)⁻¹ s2 with the unclipped W from the implicit mode equation
    let mut iwk = DMatrix::from_fn(n, n, |i, j| state.w[i] * k[(i, j)]);
    for i in 0..n {
        iwk[(i, i)] += 1.0;
    }
    let z = iwk
        .lu()
        .solve(&s2)
        .ok_or_else(|| Error::Numerical { message: "I + W K is singular".into(), condition: f64::INFINITY })?;
    let g = &state.grad;
    let mean_bar = &state.a + &z;
    let kbar = (&state.a * state.a.transpose() - r) * 0.5 + symmetrize(&(&z * g.transpose()));
    let sigma_bar = ds.sum()
        + 0.5 * (0..n).map(|i| sigma_diag[i] * ds_d2[i] * active[i]).sum::<f64>()
        + (k * &z).dot(&ds_d1);
    Ok((mean_bar, kbar, sigma_bar))
}

/// Gauss–Hermite nodes and weights for `∫ e^{-x²} g(x) dx` (Golub–Welsch).
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::zeros(order, order);
    for k in 1..order {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k, k - 1)] = b;
        jac[(k - 1, k)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], PI.sqrt() * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn gh32() -> &'static (Vec<f64>, Vec<f64>) {
    static GH: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GH.get_or_init(|| gauss_hermite(GH_ORDER))
}

/// Variational Gaussian `q(f') = N(μ_q, L_q L_qᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub mu_q: DVector<f64>,
    pub chol_l_q: DMatrix<f64>,
}

impl VariationalState {
    pub fn new(mu_q: DVector<f64>, chol_l_q: DMatrix<f64>) -> Result<Self> {
        let n = mu_q.len();
        if chol_l_q.shape() != (n, n) {
            return Err(Error::input("variational factor has the wrong shape"));
        }
        for i in 0..n {
            if !(chol_l_q[(i, i)] > 0.0) {
                return Err(Error::input("variational factor needs a positive diagonal"));
            }
            for j in i + 1..n {
                if chol_l_q[(i, j)] != 0.0 {
                    return Err(Error::input("variational factor must be lower triangular"));
                }
            }
        }
        Ok(VariationalState { mu_q, chol_l_q })
    }

    pub fn cov(&self) -> DMatrix<f64> {
        &self.chol_l_q * self.chol_l_q.transpose()
    }
}

/// Expected log-likelihood terms and their derivatives with respect to the marginal mean,
/// the marginal variance and `σ_n`.
pub struct ExpectedLogLik {
    pub value: f64,
    pub d_mean: DVector<f64>,
    pub d_var: DVector<f64>,
    pub d_sigma: f64,
}

/// `Σ_i E_{N(f; μ_i, s_i)}[log p(y'_i|f)]` by Gauss–Hermite quadrature.
pub fn expected_log_lik(
    mean: &DVector<f64>,
    var: &DVector<f64>,
    y: &DVector<f64>,
    liks: &[ObsLikelihood],
    sigma_n: f64,
) -> Result<ExpectedLogLik> {
    let (x, w) = gh32();
    let n = mean.len();
    let norm = 1.0 / PI.sqrt();
    let mut value = 0.0;
    let mut d_mean = DVector::<f64>::zeros(n);
    let mut d_var = DVector::<f64>::zeros(n);
    let mut d_sigma = 0.0;
    for i in 0..n {
        let sd = (2.0 * var[i].max(0.0)).sqrt();
        for (xk, wk) in x.iter().zip(w) {
            let d = observation_likelihood(&liks[i], y[i], mean[i] + sd * xk, sigma_n);
            let c = wk * norm;
            value += c * d.logp;
            d_mean[i] += c * d.d1;
            // derivative of the quadrature sum itself; Stein's ½E[g''] at zero variance
            d_var[i] += if sd > 1e-12 { c * d.d1 * xk / sd } else { 0.5 * c * d.d2 };
            d_sigma += c * d.ds;
        }
    }
    if !value.is_finite() || d_mean.iter().chain(d_var.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gauss-Hermite quadrature".into()));
    }
    Ok(ExpectedLogLik { value, d_mean, d_var, d_sigma })
}

/// Evidence lower bound with the Gaussian KL term in closed form.
pub fn elbo(
    vstate: &VariationalState,
    prior: &GaussianDist,
    y: &DVector<f64>,
    liks: &[ObsLikelihood],
    sigma_n: f64,
) -> Result<f64> {
    check_inputs(prior, y, liks)?;
    let n = prior.dim();
    if vstate.mu_q.len() != n {
        return Err(Error::input("variational state does not match the prior"));
    }
    let sq = vstate.cov();
    let var = sq.diagonal();
    let ell = expected_log_lik(&vstate.mu_q, &var, y, liks, sigma_n)?;
    let chol = cholesky_jittered(&prior.cov, false)?;
    let diff = &vstate.mu_q - &prior.mean;
    let mut lq_solved = vstate.chol_l_q.clone();
    chol.chol.l_dirty().solve_lower_triangular_mut(&mut lq_solved);
    let trace = lq_solved.norm_squared();
    let logdet_q = 2.0 * (0..n).map(|i| vstate.chol_l_q[(i, i)].ln()).sum::<f64>();
    let kl = 0.5 * (trace + diff.dot(&chol.solve_vec(&diff)) - n as f64 + chol.log_det() - logdet_q);
    Ok(ell.value - kl)
}

/// Predictive distribution `m* + K*ᵀK⁻¹(μ_q - m)`, `K** + K*ᵀK⁻¹(Σ_q K⁻¹ - I)K*`.
pub fn variational_predict(
    vstate: &VariationalState,
    prior: &GaussianDist,
    ks: &DMatrix<f64>,
    kss: &DMatrix<f64>,
    ms: &DVector<f64>,
) -> Result<GaussianDist> {
    let chol = cholesky_jittered(&prior.cov, false)?;
    let a = chol.solve(ks);
    let mean = ms + a.transpose() * (&vstate.mu_q - &prior.mean);
    let lqa = vstate.chol_l_q.transpose() * &a;
    let cov = kss - ks.transpose() * &a + lqa.transpose() * lqa;
    Ok(GaussianDist { mean, cov: symmetrize(&cov) })
}

/// Pullback of `L̄` through `L = chol(K)`: returns the symmetric `K̄ = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹`.
pub fn cholesky_pullback(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let lower = DMatrix::from_fn(n, n, |i, j| if j <= i { l_bar[(i, j)] } else { 0.0 });
    let mut p = l.transpose() * lower;
    for i in 0..n {
        p[(i, i)] *= 0.5;
        for j in i + 1..n {
            p[(i, j)] = 0.0;
        }
    }
    let x = l.tr_solve_lower_triangular(&p).expect("triangular factor has a zero pivot");
    let y = l.tr_solve_lower_triangular(&x.transpose()).expect("triangular factor has a zero pivot");
    symmetrize(&y.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{gp_predict, log_marginal_likelihood};
    use crate::transform::Nonlinearity;
    use approx::assert_relative_eq;

    fn toy_prior(n: usize) -> GaussianDist {
        let k = DMatrix::from_fn(n, n, |i, j| {
            let d = i as f64 - j as f64;
            1.3 * (-d * d / 4.0).exp()
        });
        let m = DVector::from_fn(n, |i, _| 0.1 * i as f64);
        GaussianDist { mean: m, cov: k }
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let (x, w) = gauss_hermite(32);
        let s0: f64 = w.iter().sum();
        let s2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let s4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert_relative_eq!(s0, PI.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(s2, PI.sqrt() / 2.0, epsilon = 1e-12);
        assert_relative_eq!(s4, 3.0 * PI.sqrt() / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn laplace_is_exact_for_gaussian() {
        let prior = toy_prior(4);
        let y = DVector::from_vec(vec![0.3, -0.2, 0.5, 1.0]);
        let liks = vec![ObsLikelihood::from(Nonlinearity::Identity); 4];
        let s = 0.3;
        let st = laplace_mode(&prior, &y, &liks, s, 1.0, None).unwrap();
        assert_relative_eq!(
            laplace_lml(&st, &prior),
            log_marginal_likelihood(&prior, &y, s * s).unwrap(),
            epsilon = 1e-10
        );
        let mut joint_cov = DMatrix::zeros(8, 8);
        joint_cov.view_mut((0, 0), (4, 4)).copy_from(&prior.cov);
        joint_cov.view_mut((0, 4), (4, 4)).copy_from(&prior.cov);
        joint_cov.view_mut((4, 0), (4, 4)).copy_from(&prior.cov);
        joint_cov.view_mut((4, 4), (4, 4)).copy_from(&prior.cov);
        let mut jm = DVector::zeros(8);
        jm.rows_mut(0, 4).copy_from(&prior.mean);
        jm.rows_mut(4, 4).copy_from(&prior.mean);
        let joint = GaussianDist { mean: jm, cov: joint_cov };
        let exact = gp_predict(&joint, 4, &y, s * s).unwrap();
        let lp = laplace_predict(&st, &prior.cov, &prior.cov, &prior.mean).unwrap();
        assert_relative_eq!(lp.mean, exact.mean, epsilon = 1e-9);
        assert_relative_eq!(lp.cov, exact.cov, epsilon = 1e-9);
        assert_relative_eq!(st.mode_f_hat, exact.mean, epsilon = 1e-9);
    }

    #[test]
    fn scalar_laplace_lml() {
        let prior = GaussianDist { mean: DVector::zeros(1), cov: DMatrix::from_element(1, 1, 1.0) };
        let st = laplace_mode(&prior, &DVector::zeros(1), &[Nonlinearity::Identity.into()], 1.0, 1.0, None).unwrap();
        assert_relative_eq!(laplace_lml(&st, &prior), -0.5 * (4.0 * PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn huge_noise_keeps_prior_mean() {
        let prior = toy_prior(3);
        let y = DVector::from_vec(vec![5.0, 5.0, 5.0]);
        let st = laplace_mode(&prior, &y, &vec![ObsLikelihood::from(Nonlinearity::Square); 3], 1e4, 1.0, None).unwrap();
        assert_relative_eq!(st.mode_f_hat, prior.mean, epsilon = 1e-5);
    }

    #[test]
    fn laplace_adjoint_matches_finite_differences() {
        let prior = toy_prior(4);
        let y = DVector::from_vec(vec![0.5, 0.1, 1.2, 0.8]);
        let liks: Vec<ObsLikelihood> =
            [Nonlinearity::Square, Nonlinearity::Square, Nonlinearity::Identity, Nonlinearity::Log].map(Into::into).to_vec();
        let s = 0.4;
        let value = |p: &GaussianDist, s: f64| {
            let st = laplace_mode(p, &y, &liks, s, 1.0, None).unwrap();
            laplace_lml(&st, p)
        };
        let st = laplace_mode(&prior, &y, &liks, s, 1.0, None).unwrap();
        let (mbar, kbar, sbar) = laplace_lml_adjoint(&st, &prior).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut p = prior.clone();
            p.mean[i] += h;
            let mut q = prior.clone();
            q.mean[i] -= h;
            assert_relative_eq!(mbar[i], (value(&p, s) - value(&q, s)) / (2.0 * h), epsilon = 1e-5, max_relative = 1e-4);
        }
        for (i, j) in [(0, 0), (0, 1), (2, 3), (1, 3)] {
            let mut p = prior.clone();
            let mut q = prior.clone();
            p.cov[(i, j)] += h;
            q.cov[(i, j)] -= h;
            if i != j {
                p.cov[(j, i)] += h;
                q.cov[(j, i)] -= h;
            }
            let fd = (value(&p, s) - value(&q, s)) / (2.0 * h);
            let an = if i == j { kbar[(i, i)] } else { kbar[(i, j)] + kbar[(j, i)] };
            assert_relative_eq!(an, fd, epsilon = 1e-5, max_relative = 1e-4);
        }
        let fd = (value(&prior, s + h) - value(&prior, s - h)) / (2.0 * h);
        assert_relative_eq!(sbar, fd, epsilon = 1e-5, max_relative = 1e-4);
    }

    #[test]
    fn elbo_equals_evidence_at_exact_posterior() {
        let prior = toy_prior(3);
        let y = DVector::from_vec(vec![0.2, -0.4, 0.9]);
        let s = 0.5;
        let liks = vec![ObsLikelihood::from(Nonlinearity::Identity); 3];
        let mut c = prior.cov.clone();
        for i in 0..3 {
            c[(i, i)] += s * s;
        }
        let ci = c.try_inverse().unwrap();
        let post_mean = &prior.mean + &prior.cov * &ci * (&y - &prior.mean);
        let post_cov = &prior.cov - &prior.cov * &ci * &prior.cov;
        let l = symmetrize(&post_cov).cholesky().unwrap().l();
        let v = VariationalState::new(post_mean, l).unwrap();
        let e = elbo(&v, &prior, &y, &liks, s).unwrap();
        let lml = log_marginal_likelihood(&prior, &y, s * s).unwrap();
        assert_relative_eq!(e, lml, epsilon = 1e-6);
        let worse = VariationalState::new(prior.mean.clone(), DMatrix::identity(3, 3) * 0.3).unwrap();
        assert!(elbo(&worse, &prior, &y, &liks, s).unwrap() <= lml + 1e-6);
    }

    #[test]
    fn variational_predict_at_prior_returns_prior() {
        let prior = toy_prior(3);
        let l = prior.cov.clone().cholesky().unwrap().l();
        let v = VariationalState::new(prior.mean.clone(), l).unwrap();
        let ks = prior.cov.columns(0, 2).clone_owned();
        let kss = prior.cov.view((0, 0), (2, 2)).clone_owned();
        let ms = prior.mean.rows(0, 2).clone_owned();
        let p = variational_predict(&v, &prior, &ks, &kss, &ms).unwrap();
        assert_relative_eq!(p.mean, ms, epsilon = 1e-10);
        assert_relative_eq!(p.cov, kss, epsilon = 1e-10);
    }

    #[test]
    fn cholesky_pullback_matches_finite_differences() {
        let k = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let lbar = DMatrix::from_row_slice(3, 3, &[0.4, 0.0, 0.0, -1.0, 0.7, 0.0, 0.2, 0.5, -0.3]);
        let loss = |k: &DMatrix<f64>| k.clone().cholesky().unwrap().l().component_mul(&lbar).sum();
        let kbar = cholesky_pullback(&k.clone().cholesky().unwrap().l(), &lbar);
        let h = 1e-6;
        for (i, j) in [(0, 0), (1, 0), (2, 1), (2, 2)] {
            let mut p = k.clone();
            let mut q = k.clone();
            p[(i, j)] += h;
            q[(i, j)] -= h;
            if i != j {
                p[(j, i)] += h;
                q[(j, i)] -= h;
            }
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            let an = if i == j { kbar[(i, i)] } else { kbar[(i, j)] + kbar[(j, i)] };
            assert_relative_eq!(an, fd, epsilon = 1e-7);
        }
    }
}
