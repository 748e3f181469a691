//! Acceptance criteria. Prints one verdict line per criterion and exits non-zero on any
//! failure not listed in `KNOWN_FAILURES`.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sumgp_core::bench::{run_experiment, ExperimentConfig, ModelKind, Report};
use sumgp_core::constraint::{
    build_total_constraint, condition_constant_kronecker, condition_gaussian, nullspace_task_covariance, ConstraintSpec,
};
use sumgp_core::data::{column, linspace, TaskedData};
use sumgp_core::datasets::{self, finite_difference_velocity, PendulumParams};
use sumgp_core::gaussian::{gp_predict, kronecker_lml, log_marginal_likelihood, rbf_kernel, GaussianDist};
use sumgp_core::inference::{laplace_lml, laplace_mode, laplace_predict};
use sumgp_core::likelihood::ObsLikelihood;
use sumgp_core::linalg::max_abs;
use sumgp_core::model::{GpModel, InferenceMethod, ModelSpec};
use sumgp_core::pose::{lift_to_gram, recover_coordinates, signed_area, AnchorPoint};
use sumgp_core::transform::{backtransform, BacktransformContext, Nonlinearity, TransformSpec};

/// Criteria expected to fail, with the reason printed next to the verdict.
const KNOWN_FAILURES: &[(&str, &str)] = &[(
    "9",
    "the unconstrained baseline reaches coordinate RMSE ~1e-4, far below the reported ~5e-3, \
     so its violation is only slightly larger than the constrained one",
)];

struct Verdict {
    id: &'static str,
    name: &'static str,
    pass: bool,
    skipped: bool,
    detail: String,
}

fn verdict(id: &'static str, name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, name, pass, skipped: false, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs_v(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Random task covariance `B Bᵀ + diag(v)`.
fn random_task_cov(r: &mut ChaCha8Rng, nf: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(nf, nf, |_, _| r.random_range(-1.0..1.0));
    let mut t = &b * b.transpose();
    for a in 0..nf {
        t[(a, a)] += r.random_range(0.1..1.0);
    }
    t
}

/// Sorted random inputs and an RBF data covariance with a small nugget.
fn random_data_cov(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut xs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..10.0)).collect();
    xs.sort_by(f64::total_cmp);
    let sf = r.random_range(0.5..2.0);
    let l = r.random_range(0.3..1.0);
    let mut kd = rbf_kernel(&column(&xs), &column(&xs), sf, l).unwrap();
    for i in 0..n {
        kd[(i, i)] += 1e-6;
    }
    (xs, kd)
}

fn random_full_row_rank(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    loop {
        let f = DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
        let sv = f.clone().svd(false, false).singular_values;
        if sv.iter().cloned().fold(f64::INFINITY, f64::min) > 0.1 {
            return f;
        }
    }
}

fn kron_prior(kd: &DMatrix<f64>, t: &DMatrix<f64>, mu: &DVector<f64>, scale: f64) -> GaussianDist {
    let n = kd.nrows();
    let nf = t.nrows();
    let mean = DVector::from_fn(n * nf, |k, _| scale * mu[k % nf]);
    GaussianDist::new(mean, kd.kronecker(t)).unwrap()
}

fn criterion_1() -> Verdict {
    let mut r = rng(101);
    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..=20);
        let nf = r.random_range(2..=3);
        let nc = r.random_range(1..nf);
        let (_, kd) = random_data_cov(&mut r, n);
        let t = random_task_cov(&mut r, nf);
        let mu = DVector::from_fn(nf, |_, _| r.random_range(-2.0..2.0));
        let prior = kron_prior(&kd, &t, &mu, 1.0);
        // point-varying rows and targets
        let mut ftot = DMatrix::zeros(n * nc, n * nf);
        let mut stot = DVector::zeros(n * nc);
        for i in 0..n {
            let fi = random_full_row_rank(&mut r, nc, nf);
            ftot.view_mut((i * nc, i * nf), (nc, nf)).copy_from(&fi);
            for c in 0..nc {
                stot[i * nc + c] = r.random_range(-5.0..5.0);
            }
        }
        let cond = condition_gaussian(&prior, &ftot, &stot).unwrap();
        let e_mean = max_abs_v(&(&ftot * &cond.mean - &stot)) / (1.0 + max_abs_v(&stot));
        let e_cov = max_abs(&(&ftot * &cond.cov * ftot.transpose())) / max_abs(&prior.cov);
        worst_mean = worst_mean.max(e_mean);
        worst_cov = worst_cov.max(e_cov);
    }
    verdict(
        "1",
        "conditioning exactness",
        worst_mean <= 1e-9 && worst_cov <= 1e-9,
        format!("100 instances: max |Fμ'-S|/(1+|S|) = {worst_mean:.2e}, max |FΣ'Fᵀ|/|Σ| = {worst_cov:.2e} (tol 1e-9)"),
    )
}

fn criterion_2() -> Verdict {
    let f = DMatrix::from_row_slice(1, 4, &[0.5, 0.5, 0.0, 0.0]);
    let s = DVector::zeros(1);
    let identity = GaussianDist::new(DVector::zeros(4), DMatrix::identity(4, 4)).unwrap();
    let expected_identity = DMatrix::from_row_slice(
        4,
        4,
        &[0.5, -0.5, 0.0, 0.0, -0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    );
    let k0 = DMatrix::from_row_slice(4, 4, &[1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let expected_k = DMatrix::from_row_slice(
        4,
        4,
        &[0.5, -0.5, 0.25, 0.0, -0.5, 0.5, -0.25, 0.0, 0.25, -0.25, 0.875, 0.0, 0.0, 0.0, 0.0, 1.0],
    );
    let c1 = condition_gaussian(&identity, &f, &s).unwrap().cov;
    let c2 = condition_gaussian(&GaussianDist::new(DVector::zeros(4), k0).unwrap(), &f, &s).unwrap().cov;
    let (proj, _) = nullspace_task_covariance(&f, &s).unwrap();
    let e1 = max_abs(&(&c1 - &expected_identity));
    let e2 = max_abs(&(&c2 - &expected_k));
    let e3 = max_abs(&(&proj - &expected_identity));
    let worst = e1.max(e2).max(e3);
    verdict(
        "2",
        "worked 4-task fixtures",
        worst <= 1e-12,
        format!("identity prior {e1:.1e}, correlated prior {e2:.1e}, nullspace projector {e3:.1e} (tol 1e-12)"),
    )
}

fn criterion_3() -> Verdict {
    let mut r = rng(303);
    let mut worst_dist = 0.0f64;
    let mut worst_lml = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..=12);
        let nf = r.random_range(2..=3);
        let nc = r.random_range(1..nf);
        let (xs, kd) = random_data_cov(&mut r, n);
        let t = random_task_cov(&mut r, nf);
        let mu = DVector::from_fn(nf, |_, _| r.random_range(-2.0..2.0));
        let f = random_full_row_rank(&mut r, nc, nf);
        let s = DVector::from_fn(nc, |_, _| r.random_range(-3.0..3.0));
        let a = if r.random_bool(0.5) { 1.0 } else { r.random_range(0.5..2.0) };
        let fast = condition_constant_kronecker(&mu, &t, &f, &s, a, &kd).unwrap();
        let spec = ConstraintSpec::constant(f.clone(), s.clone()).unwrap();
        let (ftot, stot) = build_total_constraint(&spec, &column(&xs), nf).unwrap();
        let general = condition_gaussian(&kron_prior(&kd, &t, &mu, a), &ftot, &stot).unwrap();
        let scale = 1.0 + max_abs(&general.cov).max(max_abs_v(&general.mean));
        let e = max_abs_v(&(&fast.mean - &general.mean)).max(max_abs(&(&fast.cov - &general.cov))) / scale;
        worst_dist = worst_dist.max(e);

        let noise = r.random_range(0.01..0.5);
        let y = DMatrix::from_fn(n, nf, |_, _| r.random_range(-3.0..3.0));
        let y_flat = DVector::from_fn(n * nf, |k, _| y[(k / nf, k % nf)]);
        let task = condition_gaussian(&GaussianDist::new(mu.clone(), t.clone()).unwrap(), &f, &(&s / a)).unwrap();
        let (lk, _) = kronecker_lml(&kd, &task.cov, &(task.mean * a), &y, noise, false).unwrap();
        let ld = log_marginal_likelihood(&general, &y_flat, noise).unwrap();
        worst_lml = worst_lml.max((lk - ld).abs() / (1.0 + ld.abs()));
    }
    verdict(
        "3",
        "Kronecker fast path",
        worst_dist <= 1e-8 && worst_lml <= 1e-8,
        format!("100 instances: conditioned moments {worst_dist:.2e}, LML {worst_lml:.2e} (relative, tol 1e-8)"),
    )
}

fn criterion_4() -> Verdict {
    let mut r = rng(404);
    let (mut e_mode, mut e_pred, mut e_lml) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = r.random_range(2..=10);
        let m = r.random_range(1..=5);
        let nf = r.random_range(1..=3);
        let (xs, kd_all) = random_data_cov(&mut r, n + m);
        let t = random_task_cov(&mut r, nf);
        let mu = DVector::from_fn(nf, |_, _| r.random_range(-1.0..1.0));
        let joint = kron_prior(&kd_all, &t, &mu, 1.0);
        let _ = xs;
        let no = n * nf;
        let prior = joint.select(&(0..no).collect::<Vec<_>>());
        let sigma = r.random_range(0.05..1.0);
        let y = DVector::from_fn(no, |_, _| r.random_range(-2.0..2.0));
        let liks = vec![ObsLikelihood::Transformed(Nonlinearity::Identity); no];
        let state = laplace_mode(&prior, &y, &liks, sigma, 1.0, None).unwrap();

        let exact_train = gp_posterior_mean(&prior, &y, sigma * sigma);
        e_mode = e_mode.max(max_abs_v(&(&state.mode_f_hat - &exact_train)));

        let nt = joint.dim() - no;
        let ks = joint.cov.view((0, no), (no, nt)).clone_owned();
        let kss = joint.cov.view((no, no), (nt, nt)).clone_owned();
        let ms = joint.mean.rows(no, nt).clone_owned();
        let lp = laplace_predict(&state, &ks, &kss, &ms).unwrap();
        let gp = gp_predict(&joint, no, &y, sigma * sigma).unwrap();
        e_pred = e_pred.max(max_abs_v(&(&lp.mean - &gp.mean)).max(max_abs(&(&lp.cov - &gp.cov))));

        let exact = log_marginal_likelihood(&prior, &y, sigma * sigma).unwrap();
        e_lml = e_lml.max((laplace_lml(&state, &prior) - exact).abs() / (1.0 + exact.abs()));
    }
    verdict(
        "4",
        "Laplace with identity transforms",
        e_mode <= 1e-8 && e_pred <= 1e-8 && e_lml <= 1e-8,
        format!("50 instances: mode {e_mode:.2e}, predictive {e_pred:.2e}, LML {e_lml:.2e} (tol 1e-8)"),
    )
}

/// `m + K (K + σ² I)⁻¹ (y - m)`.
fn gp_posterior_mean(prior: &GaussianDist, y: &DVector<f64>, noise_var: f64) -> DVector<f64> {
    let mut c = prior.cov.clone();
    for i in 0..c.nrows() {
        c[(i, i)] += noise_var;
    }
    let alpha = c.cholesky().unwrap().solve(&(y - &prior.mean));
    &prior.mean + &prior.cov * alpha
}

/// Largest `|g - fd| / max(|fd|, 1)` over all parameters, with central differences of step 1e-5.
fn gradient_error(model: &mut GpModel, p: &[f64]) -> f64 {
    model.reset_warm_start();
    let g = model.objective(p, true).unwrap().1.unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..p.len() {
        let mut a = p.to_vec();
        let mut b = p.to_vec();
        a[k] += h;
        b[k] -= h;
        model.reset_warm_start();
        let fa = model.objective(&a, false).unwrap().0;
        model.reset_warm_start();
        let fb = model.objective(&b, false).unwrap().0;
        let fd = (fa - fb) / (2.0 * h);
        worst = worst.max((g[k] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

fn five_point_data(seed: u64, nf: usize, positive: bool) -> TaskedData {
    let mut r = rng(seed);
    let xs = linspace(0.0, 3.0, 5);
    let v = DMatrix::from_fn(5, nf, |i, a| {
        let base = (xs[i] * (a + 1) as f64).sin() + 0.2 * r.random_range(-1.0..1.0);
        if positive {
            base * base + 0.1
        } else {
            base
        }
    });
    TaskedData::complete(column(&xs), v).unwrap()
}

fn criterion_5() -> Verdict {
    let sum_constraint = ConstraintSpec::constant(DMatrix::from_row_slice(1, 2, &[0.5, 0.5]), DVector::from_vec(vec![0.8])).unwrap();
    let mut worst = [0.0f64; 3];
    for seed in 0..3u64 {
        // exact: complete data (Kronecker path), missing entries (dense path), constrained
        let data = five_point_data(seed, 2, false);
        let mut missing = data.clone();
        missing.observed[(2, 1)] = false;
        for (spec, d) in [
            (ModelSpec::gaussian(2), data.clone()),
            (ModelSpec::gaussian(2), missing.clone()),
            (ModelSpec::gaussian(2).with_constraint(sum_constraint.clone()), missing),
        ] {
            let mut m = GpModel::new(spec, d).unwrap();
            let p = m.init_params(&mut rng(seed + 10));
            worst[0] = worst[0].max(gradient_error(&mut m, &p));
        }

        let sq = five_point_data(seed, 2, true);
        let liks = vec![Nonlinearity::Square, Nonlinearity::Identity];
        let lap = ModelSpec::gaussian(2)
            .with_constraint(sum_constraint.clone())
            .with_likelihoods(liks.clone(), InferenceMethod::Laplace);
        let mut m = GpModel::new(lap.clone(), sq.clone()).unwrap();
        let p = m.init_params(&mut rng(seed + 20));
        worst[1] = worst[1].max(gradient_error(&mut m, &p));

        for constraint in [None, Some(sum_constraint.clone())] {
            let spec = ModelSpec { inference: InferenceMethod::Variational, constraint, ..lap.clone() };
            let mut v = GpModel::new(spec, sq.clone()).unwrap();
            let mut p = v.init_params(&mut rng(seed + 30));
            let nh = v.n_hyper();
            let mut r = rng(seed + 40);
            for x in p.iter_mut().skip(nh) {
                *x = r.random_range(-0.2..0.2);
            }
            worst[2] = worst[2].max(gradient_error(&mut v, &p));
        }
    }
    verdict(
        "5",
        "gradient suite",
        worst.iter().all(|&e| e <= 1e-3),
        format!(
            "max |g-fd|/max(|fd|,1): exact LML {:.1e}, Laplace {:.1e}, ELBO {:.1e} (tol 1e-3)",
            worst[0], worst[1], worst[2]
        ),
    )
}

/// Runs an experiment with the default configuration, optionally overriding the inference method.
fn experiment(name: &str, models: &str, sigma: f64, replicates: usize, inference: Option<&str>) -> Report {
    let mut cfg = ExperimentConfig { noise_sigma_n: Some(sigma), replicates, seed: 0, ..ExperimentConfig::new(name, models) };
    if let Some(m) = inference {
        cfg.inference = m.into();
    }
    run_experiment(&cfg).unwrap()
}

fn summary(report: &Report, kind: ModelKind) -> String {
    let a = report.aggregate(kind);
    format!(
        "{} rmse {:.2e}±{:.1e} |dC| {:.2e}±{:.1e} (n={}, failed={})",
        kind.key(),
        a.rmse_mean,
        a.rmse_std,
        a.delta_c_mean,
        a.delta_c_std,
        a.n,
        a.failed
    )
}

fn criterion_6() -> Verdict {
    let rep = experiment("ho", "constrained,unconstrained", 0.1, 50, None);
    let c = rep.aggregate(ModelKind::Constrained);
    let u = rep.aggregate(ModelKind::Unconstrained);
    let pass = (3.2e-2..=5.6e-2).contains(&c.rmse_mean)
        && c.delta_c_mean <= 5e-3
        && (5.3e-2..=7.5e-2).contains(&u.rmse_mean)
        && (5.1e-2..=7.9e-2).contains(&u.delta_c_mean)
        && c.delta_c_mean * 10.0 <= u.delta_c_mean
        && c.failed == 0
        && u.failed == 0;
    verdict(
        "6",
        "harmonic oscillator table",
        pass,
        format!("{}; {}", summary(&rep, ModelKind::Constrained), summary(&rep, ModelKind::Unconstrained)),
    )
}

fn criterion_7() -> Verdict {
    let rep = experiment("ff", "constrained,unconstrained", 0.05, 50, None);
    let c = rep.aggregate(ModelKind::Constrained);
    let u = rep.aggregate(ModelKind::Unconstrained);
    verdict(
        "7",
        "free fall table",
        c.delta_c_mean <= 5e-2 && u.delta_c_mean >= 0.15 && c.failed == 0 && u.failed == 0,
        format!("{}; {}", summary(&rep, ModelKind::Constrained), summary(&rep, ModelKind::Unconstrained)),
    )
}

fn criterion_8() -> Verdict {
    let rep = experiment("logsin", "constrained,unconstrained", 0.1, 50, None);
    let c = rep.aggregate(ModelKind::Constrained);
    let u = rep.aggregate(ModelKind::Unconstrained);
    verdict(
        "8",
        "logsin table",
        c.delta_c_mean * 5.0 <= u.delta_c_mean && c.failed == 0 && u.failed == 0,
        format!("{}; {}", summary(&rep, ModelKind::Constrained), summary(&rep, ModelKind::Unconstrained)),
    )
}

fn criterion_9() -> Verdict {
    let rep = experiment("triangle", "constrained,unconstrained,transformed-unconstrained", 1e-4, 50, None);
    let c = rep.aggregate(ModelKind::Constrained);
    let u = rep.aggregate(ModelKind::Unconstrained);
    let tr = rep.aggregate(ModelKind::TransformedUnconstrained);
    let tr_ok = tr.n == 50 && tr.rmse_mean.is_finite() && tr.delta_c_mean.is_finite();
    let ratio = u.delta_c_mean / c.delta_c_mean;
    verdict(
        "9",
        "low-noise triangle table",
        ratio >= 2.0 && tr_ok,
        format!(
            "ratio {ratio:.2} (need >= 2); {}; {}; {}",
            summary(&rep, ModelKind::Constrained),
            summary(&rep, ModelKind::Unconstrained),
            summary(&rep, ModelKind::TransformedUnconstrained)
        ),
    )
}

fn criterion_10() -> Verdict {
    let lap = experiment("ho", "constrained", 0.05, 20, Some("laplace"));
    let vi = experiment("ho", "constrained", 0.05, 20, Some("vi"));
    let l = lap.aggregate(ModelKind::Constrained);
    let v = vi.aggregate(ModelKind::Constrained);
    verdict(
        "10",
        "Laplace versus variational ordering",
        l.rmse_mean < v.rmse_mean && l.delta_c_mean <= 5e-3 && v.delta_c_mean <= 5e-3,
        format!(
            "Laplace rmse {:.2e} |dC| {:.2e}; VI rmse {:.2e} |dC| {:.2e}",
            l.rmse_mean, l.delta_c_mean, v.rmse_mean, v.delta_c_mean
        ),
    )
}

/// Interior central-difference error of `sin(3t) + cos(7t)/2` at step `dt`.
fn fd_interior_error(dt: f64) -> f64 {
    let n = (1.0 / dt).round() as usize + 1;
    let t: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let pos: Vec<f64> = t.iter().map(|&t| (3.0 * t).sin() + 0.5 * (7.0 * t).cos()).collect();
    let vel = finite_difference_velocity(&pos, dt);
    (1..n - 1).map(|i| (vel[i] - (3.0 * (3.0 * t[i]).cos() - 3.5 * (7.0 * t[i]).sin())).abs()).fold(0.0, f64::max)
}

/// Synthetic recording of a double pendulum with known angles; returns the file and the exact
/// scaled blue-marker velocity at every frame.
fn write_pendulum_fixture(dir: &std::path::Path, rate: f64, frames: usize) -> (PathBuf, Vec<[f64; 2]>) {
    let p = PendulumParams { frame_rate: rate, ..Default::default() };
    let (lb, lg) = (p.length_blue, p.length_green);
    let th1 = |t: f64| 0.6 * (5.0 * t).sin();
    let dth1 = |t: f64| 3.0 * (5.0 * t).cos();
    let th2 = |t: f64| 0.9 * (8.0 * t + 0.3).sin();
    let path = dir.join(format!("fixture_{}.csv", rate as u64));
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "anchor_x,anchor_y,marker1_x,marker1_y,marker2_x,marker2_y").unwrap();
    let mut vel = Vec::new();
    for i in 0..frames {
        let t = i as f64 / rate;
        let (ax, ay) = (0.3, 0.2);
        let bx = ax + lb * th1(t).sin();
        let by = ay - lb * th1(t).cos();
        let gx = bx + lg * th2(t).sin();
        let gy = by - lg * th2(t).cos();
        writeln!(f, "{ax},{ay},{bx},{by},{gx},{gy}").unwrap();
        let vb = [lb * th1(t).cos() * dth1(t), lb * th1(t).sin() * dth1(t)];
        vel.push([vb[0] * p.scale_vel, vb[1] * p.scale_vel]);
    }
    (path, vel)
}

fn criterion_11a() -> Verdict {
    let e1 = fd_interior_error(1e-2);
    let e2 = fd_interior_error(5e-3);
    let order_synthetic = (e1 / e2).log2();

    let dir = tempfile::tempdir().unwrap();
    let mut errs = Vec::new();
    let mut ingest_ok = true;
    for (rate, frames) in [(250.0, 250usize), (500.0, 500usize)] {
        let (path, exact) = write_pendulum_fixture(dir.path(), rate, frames);
        let p = PendulumParams { frame_rate: rate, ..Default::default() };
        let rec = datasets::read_pendulum_csv(&path).unwrap();
        ingest_ok &= rec.rows.shape() == (frames, 6);
        let states = datasets::pendulum_states(&rec, &p).unwrap();
        ingest_ok &= states.n_points() == frames && states.n_tasks() == 8 && states.is_complete();
        let dt_scaled = p.scale_time / rate;
        ingest_ok &= (states.inputs[(frames - 1, 0)] - (frames - 1) as f64 * dt_scaled).abs() < 1e-12;
        let err = (1..frames - 1)
            .map(|i| (states.values[(i, 4)] - exact[i][0]).abs().max((states.values[(i, 5)] - exact[i][1]).abs()))
            .fold(0.0, f64::max);
        errs.push(err);
        let seg = datasets::load_double_pendulum(&path, &p, (10, 100)).unwrap();
        ingest_ok &= seg.data.n_points() == 100 && seg.constraint.constant_parts().is_some_and(|(_, s)| s[0].is_finite());
    }
    let order_ingest = (errs[0] / errs[1]).log2();
    verdict(
        "11a",
        "finite-difference velocity and ingestion",
        order_synthetic > 1.9 && order_ingest > 1.9 && ingest_ok,
        format!(
            "observed order {order_synthetic:.2} (synthetic) and {order_ingest:.2} (recording, errors {:.1e} -> {:.1e}); ingestion {}",
            errs[0],
            errs[1],
            if ingest_ok { "ok" } else { "mismatch" }
        ),
    )
}

fn criterion_11b() -> Verdict {
    let Some(path) = std::env::var_os("SUMGP_DP_CSV") else {
        return Verdict {
            id: "11b",
            name: "double pendulum recordings",
            pass: true,
            skipped: true,
            detail: "SUMGP_DP_CSV not set".into(),
        };
    };
    let cfg = ExperimentConfig {
        replicates: 20,
        seed: 0,
        dp_csv: Some(PathBuf::from(path)),
        ..ExperimentConfig::new("dp", "constrained,unconstrained")
    };
    let rep = run_experiment(&cfg).unwrap();
    let c = rep.aggregate(ModelKind::Constrained);
    let u = rep.aggregate(ModelKind::Unconstrained);
    verdict(
        "11b",
        "double pendulum recordings",
        c.delta_c_mean < u.delta_c_mean,
        format!("{}; {}", summary(&rep, ModelKind::Constrained), summary(&rep, ModelKind::Unconstrained)),
    )
}

fn transform_checks(r: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..500 {
        for nl in [Nonlinearity::Square, Nonlinearity::Log, Nonlinearity::Sine, Nonlinearity::Identity] {
            let y: f64 = match nl {
                Nonlinearity::Log => r.random_range(1e-3..50.0),
                _ => r.random_range(-10.0..10.0),
            };
            let yp = nl.forward(y).ok_or("forward outside domain")?;
            let (back, clamped) = nl.inverse_on_branch(yp, nl.branch_of(y));
            if clamped || (back - y).abs() > 1e-9 * (1.0 + y.abs()) {
                return Err(format!("{nl:?} roundtrip {y} -> {back}"));
            }
        }
    }
    let spec = TransformSpec::new(vec![Nonlinearity::Square, Nonlinearity::Sine, Nonlinearity::Identity]);
    let grid = linspace(0.0, 1.0, 11);
    let aux = DMatrix::from_fn(11, 3, |_, t| if t == 0 { 1.0 } else { 0.0 });
    let ctx = BacktransformContext::new(grid.clone(), aux, &spec).map_err(|e| e.to_string())?;
    for _ in 0..50 {
        let fp = DMatrix::from_fn(11, spec.n_transformed(), |_, _| r.random_range(-2.0..2.0));
        let (_, stats) = backtransform(&fp, &grid, &ctx, &spec).map_err(|e| e.to_string())?;
        let cols = spec.transformed_columns();
        let sq = fp.column(cols[0].unwrap()).iter().filter(|v| **v < 0.0).count();
        let sn = fp.column(cols[1].unwrap()).iter().filter(|v| v.abs() > 1.0).count();
        if (stats.square, stats.sine) != (sq, sn) {
            return Err(format!("clamp counters {:?}, expected ({sq}, {sn})", stats));
        }
    }
    Ok(())
}

fn pose_checks(r: &mut ChaCha8Rng) -> Result<(), String> {
    let anchor = AnchorPoint::default();
    for _ in 0..200 {
        let mut z = DMatrix::from_fn(2, 4, |_, _| r.random_range(-3.0..3.0));
        z[(0, 3)] = anchor.position[0];
        z[(1, 3)] = anchor.position[1];
        let theta = r.random_range(-3.0..3.0f64);
        let (s, c) = theta.sin_cos();
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let q = lift_to_gram(&z).map_err(|e| e.to_string())?;
        let qr = lift_to_gram(&(&rot * &z)).map_err(|e| e.to_string())?;
        if (&q - &qr).amax() > 1e-9 * (1.0 + q.amax()) {
            return Err("Gram vector not rotation invariant".into());
        }
        let rec = recover_coordinates(&q, &anchor, Some(signed_area(&z).signum()), None).map_err(|e| e.to_string())?;
        let err = (&rec.coords - &z).amax();
        if err > 1e-8 {
            return Err(format!("recovery error {err:.1e}"));
        }
    }
    Ok(())
}

fn generator_checks() -> Result<(), String> {
    for name in ["ho", "dho", "ff", "logsin", "triangle"] {
        for seed in 0..3 {
            let d = datasets::generate(name, 0.0, 0.0, seed).map_err(|e| e.to_string())?;
            let xs: Vec<f64> = d.train.inputs.column(0).iter().copied().collect();
            let res = d.mean_abs_residual(&xs, &d.truth_train).max(d.mean_abs_residual(&d.test_x, &d.truth_test));
            if res > 1e-10 {
                return Err(format!("{name}: noiseless residual {res:.1e}"));
            }
        }
    }
    Ok(())
}

/// Every per-replicate result except wall-clock time, in shortest round-trip formatting.
fn fingerprint(report: &Report) -> String {
    let mut s = String::new();
    for rep in &report.replicates {
        s.push_str(&format!("{} {}\n", rep.replicate, rep.data_seed));
        for (kind, r) in &rep.results {
            match r {
                Ok(m) => s.push_str(&format!(
                    "{} {:?} {:?} {} {:?} {:?}\n",
                    kind.key(),
                    m.rmse,
                    m.delta_c,
                    m.restarts,
                    m.prediction.mean.as_slice(),
                    m.trace.iter().map(|t| format!("{t:?}")).collect::<Vec<_>>()
                )),
                Err(e) => s.push_str(&format!("{} failed {e}\n", kind.key())),
            }
        }
    }
    s
}

fn determinism_check() -> Result<(), String> {
    for (name, models) in [("ho", "constrained,unconstrained"), ("logsin", "constrained")] {
        let cfg = ExperimentConfig { replicates: 2, seed: 11, trace: true, ..ExperimentConfig::new(name, models) };
        let a = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let b = run_experiment(&cfg).map_err(|e| e.to_string())?;
        if fingerprint(&a) != fingerprint(&b) {
            return Err(format!("{name}: reports differ between identical runs"));
        }
    }
    Ok(())
}

fn criterion_12() -> Verdict {
    let mut r = rng(1212);
    let checks: [(&str, Result<(), String>); 4] = [
        ("transforms", transform_checks(&mut r)),
        ("pose", pose_checks(&mut r)),
        ("generators", generator_checks()),
        ("determinism", determinism_check()),
    ];
    let failed: Vec<String> = checks.iter().filter_map(|(n, c)| c.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    verdict(
        "12",
        "property suites",
        failed.is_empty(),
        if failed.is_empty() {
            "transforms, pose, generators and determinism checks hold".into()
        } else {
            failed.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 13] = [
        ("1", criterion_1),
        ("2", criterion_2),
        ("3", criterion_3),
        ("4", criterion_4),
        ("5", criterion_5),
        ("6", criterion_6),
        ("7", criterion_7),
        ("8", criterion_8),
        ("9", criterion_9),
        ("10", criterion_10),
        ("11a", criterion_11a),
        ("11b", criterion_11b),
        ("12", criterion_12),
    ];
    // optional criterion ids as arguments, e.g. `cargo test --test acceptance -- 2 9`
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = 0;
    for (id, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let known = KNOWN_FAILURES.iter().find(|(id, _)| *id == v.id).map(|(_, why)| *why);
        let tag = if v.skipped {
            "SKIP"
        } else if v.pass {
            "PASS"
        } else {
            "FAIL"
        };
        println!("{tag} criterion {} ({}): {} [{:.1} s]", v.id, v.name, v.detail, start.elapsed().as_secs_f64());
        match (v.pass, known) {
            (false, Some(why)) => println!("     known failure: {why}"),
            (false, None) => unexpected += 1,
            (true, Some(_)) if !v.skipped => println!("     listed as a known failure but passed"),
            _ => {}
        }
    }
    if unexpected > 0 {
        println!("{unexpected} unexpected failure(s)");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
