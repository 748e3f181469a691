//! Seeded generators for the synthetic experiments and ingestion of the double-pendulum recording.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::constraint::ConstraintSpec;
use crate::data::{column, linspace, TaskedData};
use crate::error::{Error, Result};
use crate::pose::{lift_to_gram, AnchorPoint};
use crate::transform::{Nonlinearity, TransformSpec, VirtualPolicy};

/// Constraint residuals `F(x)·h(f(x)) − S(x)` of original-space outputs at one input.
pub type ResidualFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// A generated experiment: noisy training data, noiseless truth and the constraint machinery.
#[derive(Clone)]
pub struct ExperimentData {
    pub name: String,
    /// Noisy training data in original output space.
    pub train: TaskedData,
    pub truth_train: DMatrix<f64>,
    pub test_x: Vec<f64>,
    pub truth_test: DMatrix<f64>,
    /// Transformation for the constrained model (identity for the triangle, which uses the Gram lift).
    pub transform: TransformSpec,
    /// Constraint over the transformed outputs.
    pub constraint: ConstraintSpec,
    pub residual: ResidualFn,
    /// Points whose drop mask had to be redrawn because every task was removed.
    pub mask_redraws: usize,
}

impl fmt::Debug for ExperimentData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExperimentData")
            .field("name", &self.name)
            .field("train", &self.train)
            .field("test_x", &self.test_x.len())
            .field("constraint", &self.constraint)
            .finish()
    }
}

impl ExperimentData {
    /// Mean absolute constraint residual of original-space outputs at the given inputs.
    pub fn mean_abs_residual(&self, xs: &[f64], f: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &x) in xs.iter().enumerate() {
            let row: Vec<f64> = f.row(i).iter().copied().collect();
            for r in (self.residual)(x, &row) {
                total += r.abs();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Equally spaced grid `(start, end, n)` with inclusive endpoints.
pub type Grid = (f64, f64, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct OscillatorParams {
    pub energy: f64,
    pub mass: f64,
    pub omega0: f64,
    pub damping: f64,
    pub noise_sigma_n: f64,
    pub drop_prob_fd: f64,
    pub train_grid: Grid,
    pub test_grid: Grid,
}

impl Default for OscillatorParams {
    fn default() -> Self {
        OscillatorParams {
            energy: 0.8,
            mass: 1.0,
            omega0: 1.0,
            damping: 0.0,
            noise_sigma_n: 0.1,
            drop_prob_fd: 0.0,
            train_grid: (0.0, 10.0, 20),
            test_grid: (-0.1, 10.0, 100),
        }
    }
}

impl OscillatorParams {
    pub fn damped() -> Self {
        OscillatorParams { damping: 0.1, ..Self::default() }
    }

    pub fn spring_constant(&self) -> f64 {
        self.mass * self.omega0 * self.omega0
    }

    pub fn amplitude(&self) -> f64 {
        (2.0 * self.energy / self.spring_constant()).sqrt()
    }

    fn validate(&self) -> Result<()> {
        check_common(self.noise_sigma_n, self.drop_prob_fd)?;
        if !(self.energy > 0.0 && self.mass > 0.0 && self.omega0 > 0.0 && self.damping >= 0.0) {
            return Err(Error::input("oscillator parameters must be positive"));
        }
        if self.damping >= 2.0 * self.mass * self.omega0 {
            return Err(Error::input("damped oscillator must be underdamped"));
        }
        Ok(())
    }

    /// Noiseless `(z, v)` at time `t`.
    pub fn state(&self, t: f64) -> (f64, f64) {
        let gamma = self.damping / (2.0 * self.mass);
        let omega = (self.omega0 * self.omega0 - gamma * gamma).sqrt();
        let amp = self.amplitude() * (-gamma * t).exp();
        let (s, c) = (omega * t).sin_cos();
        (amp * s, amp * omega * c - amp * gamma * s)
    }

    pub fn energy_at(&self, t: f64) -> f64 {
        let (z, v) = self.state(t);
        0.5 * self.spring_constant() * z * z + 0.5 * self.mass * v * v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreeFallParams {
    pub energy: f64,
    pub mass: f64,
    pub g: f64,
    /// Data are divided by this factor.
    pub scale: f64,
    /// Noise standard deviation in scaled units.
    pub noise_sigma_n: f64,
    pub drop_prob_fd: f64,
    pub train_grid: Grid,
    pub test_grid: Grid,
}

impl Default for FreeFallParams {
    fn default() -> Self {
        FreeFallParams {
            energy: 200.0,
            mass: 1.0,
            g: 9.81,
            scale: 20.0,
            noise_sigma_n: 0.05,
            drop_prob_fd: 0.0,
            train_grid: (0.0, 6.0, 20),
            test_grid: (-0.1, 6.0, 100),
        }
    }
}

impl FreeFallParams {
    pub fn v0(&self) -> f64 {
        (2.0 * self.energy / self.mass).sqrt()
    }

    /// Unscaled `(z, v)` at time `t`.
    pub fn state(&self, t: f64) -> (f64, f64) {
        let v0 = self.v0();
        (v0 * t - 0.5 * self.g * t * t, v0 - self.g * t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogsinParams {
    pub noise_sigma_n: f64,
    pub drop_prob_fd: f64,
    pub train_grid: Grid,
    pub test_grid: Grid,
}

impl Default for LogsinParams {
    fn default() -> Self {
        LogsinParams { noise_sigma_n: 0.1, drop_prob_fd: 0.0, train_grid: (-1.2, 2.0, 20), test_grid: (-1.2, 2.0, 100) }
    }
}

pub fn logsin_f1(x: f64) -> f64 {
    2.0 * (-5.0 * (x - 1.0).powi(2)).exp() + (-5.0 * (x + 1.0).powi(2)).exp() + 0.2
}

pub fn logsin_f2(x: f64) -> f64 {
    -x.powi(3) / 2.0
}

pub fn logsin_target(x: f64) -> f64 {
    logsin_f1(x).ln() + logsin_f2(x).sin()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleParams {
    pub noise_sigma_n: f64,
    pub train_grid: Grid,
    pub test_grid: Grid,
}

impl Default for TriangleParams {
    fn default() -> Self {
        TriangleParams { noise_sigma_n: 1e-4, train_grid: (0.0, 5.0, 20), test_grid: (0.0, 5.0, 100) }
    }
}

/// Corner coordinates of the reference triangle, one corner per column.
pub fn triangle_reference() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 3, &[4.0, 8.0, 8.4, 4.0, 4.0, 6.0])
}

/// Noiseless triangle pose at parameter `alpha`, as a 2×3 matrix.
pub fn triangle_pose(alpha: f64) -> DMatrix<f64> {
    let d = 0.5 * (2.0 * alpha).cos();
    let z1 = triangle_reference().add_scalar(d);
    let (s, c) = alpha.sin_cos();
    let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    (r * z1).add_scalar(d)
}

/// Squared edge lengths `[L12², L13², L23²]` of a 2×3 (or wider) coordinate matrix.
pub fn triangle_edge_lengths_sq(z: &DMatrix<f64>) -> [f64; 3] {
    let d = |a: usize, b: usize| (z.column(a) - z.column(b)).norm_squared();
    [d(0, 1), d(0, 2), d(1, 2)]
}

fn check_common(noise: f64, drop: f64) -> Result<()> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::input("noise standard deviation must be nonnegative"));
    }
    if !(0.0..1.0).contains(&drop) {
        return Err(Error::input("drop probability must lie in [0, 1)"));
    }
    Ok(())
}

fn grid(g: Grid) -> Vec<f64> {
    linspace(g.0, g.1, g.2)
}

/// Adds noise and draws the missing-entry mask; points that would lose every task are redrawn.
fn noisy_observations(truth: &DMatrix<f64>, noise: f64, drop: f64, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<bool>, usize) {
    let (n, nf) = truth.shape();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut values = truth.clone();
    for i in 0..n {
        for a in 0..nf {
            values[(i, a)] += noise * normal.sample(rng);
        }
    }
    let mut observed = DMatrix::from_element(n, nf, true);
    let mut redraws = 0;
    if drop > 0.0 {
        for i in 0..n {
            loop {
                for a in 0..nf {
                    observed[(i, a)] = rng.random::<f64>() >= drop;
                }
                if observed.row(i).iter().any(|&o| o) {
                    break;
                }
                redraws += 1;
            }
        }
    }
    (values, observed, redraws)
}

fn linear_residual(coeffs: Vec<f64>, nls: Vec<Nonlinearity>, target: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> ResidualFn {
    Arc::new(move |x, f| {
        let s: f64 = coeffs
            .iter()
            .zip(&nls)
            .zip(f)
            .filter(|((a, _), _)| **a != 0.0)
            .map(|((a, nl), v)| a * nl.forward(*v).unwrap_or(f64::NAN))
            .sum();
        vec![s - target(x)]
    })
}

fn assemble(
    name: &str,
    names: &[&str],
    train_x: Vec<f64>,
    test_x: Vec<f64>,
    truth_fn: impl Fn(f64) -> Vec<f64>,
    noise: f64,
    drop: f64,
    seed: u64,
) -> Result<(TaskedData, DMatrix<f64>, DMatrix<f64>, usize)> {
    let nf = names.len();
    let eval = |xs: &[f64]| {
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| truth_fn(x)).collect();
        DMatrix::from_fn(xs.len(), nf, |i, a| rows[i][a])
    };
    let truth_train = eval(&train_x);
    let truth_test = eval(&test_x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (values, observed, redraws) = noisy_observations(&truth_train, noise, drop, &mut rng);
    if redraws > 0 {
        eprintln!("{name}: redrew the drop mask {redraws} time(s) to keep every point observed");
    }
    let data = TaskedData::new(column(&train_x), values, observed)?.with_names(names.iter().map(|s| s.to_string()).collect());
    Ok((data, truth_train, truth_test, redraws))
}

pub fn gen_harmonic_oscillator(p: &OscillatorParams, seed: u64) -> Result<ExperimentData> {
    p.validate()?;
    let name = if p.damping > 0.0 { "dho" } else { "ho" };
    let pc = p.clone();
    let (train, truth_train, truth_test, redraws) = assemble(
        name,
        &["z", "v"],
        grid(p.train_grid),
        grid(p.test_grid),
        move |t| {
            let (z, v) = pc.state(t);
            vec![z, v]
        },
        p.noise_sigma_n,
        p.drop_prob_fd,
        seed,
    )?;
    let k = p.spring_constant();
    let coeffs = vec![k / 2.0, p.mass / 2.0];
    let f = DMatrix::from_row_slice(1, 2, &coeffs);
    let (constraint, target): (ConstraintSpec, Arc<dyn Fn(f64) -> f64 + Send + Sync>) = if p.damping > 0.0 {
        let pc = p.clone();
        let pt = p.clone();
        (
            ConstraintSpec::varying_target(f, move |x| DVector::from_element(1, pc.energy_at(x[0])))?,
            Arc::new(move |t| pt.energy_at(t)),
        )
    } else {
        let e = p.energy;
        (ConstraintSpec::constant(f, DVector::from_element(1, e))?, Arc::new(move |_| e))
    };
    let nls = vec![Nonlinearity::Square, Nonlinearity::Square];
    Ok(ExperimentData {
        name: name.into(),
        train,
        truth_train,
        test_x: grid(p.test_grid),
        truth_test,
        transform: TransformSpec::new(nls.clone()).with_virtual(VirtualPolicy::AtZeroCrossings),
        constraint,
        residual: linear_residual(coeffs, nls, target),
        mask_redraws: redraws,
    })
}

/// Damped oscillator; identical to [`gen_harmonic_oscillator`] with `damping > 0`.
pub fn gen_damped_oscillator(p: &OscillatorParams, seed: u64) -> Result<ExperimentData> {
    gen_harmonic_oscillator(p, seed)
}

pub fn gen_free_fall(p: &FreeFallParams, seed: u64) -> Result<ExperimentData> {
    check_common(p.noise_sigma_n, p.drop_prob_fd)?;
    if !(p.energy > 0.0 && p.mass > 0.0 && p.g > 0.0 && p.scale > 0.0) {
        return Err(Error::input("free-fall parameters must be positive"));
    }
    let pc = p.clone();
    let (train, truth_train, truth_test, redraws) = assemble(
        "ff",
        &["z", "v"],
        grid(p.train_grid),
        grid(p.test_grid),
        move |t| {
            let (z, v) = pc.state(t);
            vec![z / pc.scale, v / pc.scale]
        },
        p.noise_sigma_n,
        p.drop_prob_fd,
        seed,
    )?;
    // m g a z̃ + (m/2) a² ṽ² = E, divided by a
    let coeffs = vec![p.mass * p.g, p.mass * p.scale / 2.0];
    let s = p.energy / p.scale;
    let f = DMatrix::from_row_slice(1, 2, &coeffs);
    let nls = vec![Nonlinearity::Identity, Nonlinearity::Square];
    Ok(ExperimentData {
        name: "ff".into(),
        train,
        truth_train,
        test_x: grid(p.test_grid),
        truth_test,
        transform: TransformSpec::new(nls.clone()).with_virtual(VirtualPolicy::AtZeroCrossings),
        constraint: ConstraintSpec::constant(f, DVector::from_element(1, s))?,
        residual: linear_residual(coeffs, nls, Arc::new(move |_| s)),
        mask_redraws: redraws,
    })
}

pub fn gen_logsin(p: &LogsinParams, seed: u64) -> Result<ExperimentData> {
    check_common(p.noise_sigma_n, p.drop_prob_fd)?;
    let (train, truth_train, truth_test, redraws) = assemble(
        "logsin",
        &["f1", "f2"],
        grid(p.train_grid),
        grid(p.test_grid),
        |x| vec![logsin_f1(x), logsin_f2(x)],
        p.noise_sigma_n,
        p.drop_prob_fd,
        seed,
    )?;
    let f = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
    let nls = vec![Nonlinearity::Log, Nonlinearity::Sine];
    let mut transform = TransformSpec::new(nls.clone()).with_virtual(VirtualPolicy::AtBranchCrossings(Vec::new()));
    transform.relearn_aux_jointly = false;
    Ok(ExperimentData {
        name: "logsin".into(),
        train,
        truth_train,
        test_x: grid(p.test_grid),
        truth_test,
        transform,
        constraint: ConstraintSpec::varying_target(f, |x| DVector::from_element(1, logsin_target(x[0])))?,
        residual: linear_residual(vec![1.0, 1.0], nls, Arc::new(logsin_target)),
        mask_redraws: redraws,
    })
}

/// Triangle poses; tasks are `[z1x, z1y, z2x, z2y, z3x, z3y]`. The constraint acts on the Gram
/// lift (see [`crate::pose`]).
pub fn gen_triangle(p: &TriangleParams, seed: u64) -> Result<ExperimentData> {
    check_common(p.noise_sigma_n, 0.0)?;
    let flat = |a: f64| {
        let z = triangle_pose(a);
        vec![z[(0, 0)], z[(1, 0)], z[(0, 1)], z[(1, 1)], z[(0, 2)], z[(1, 2)]]
    };
    let (train, truth_train, truth_test, redraws) = assemble(
        "triangle",
        &["z1x", "z1y", "z2x", "z2y", "z3x", "z3y"],
        grid(p.train_grid),
        grid(p.test_grid),
        flat,
        p.noise_sigma_n,
        0.0,
        seed,
    )?;
    let lengths = triangle_edge_lengths_sq(&triangle_reference());
    let anchor = AnchorPoint::default();
    let constraint = crate::pose::triangle_constraints(lengths.map(f64::sqrt), &anchor)?;
    let residual: ResidualFn = Arc::new(move |_, f| {
        let z = DMatrix::from_fn(2, 3, |r, c| f[2 * c + r]);
        let l = triangle_edge_lengths_sq(&z);
        (0..3).map(|k| l[k] - lengths[k]).collect()
    });
    // the lift itself is validated here so that a malformed anchor fails early
    lift_to_gram(&DMatrix::from_fn(2, 4, |r, c| if c == 3 { anchor.position[r] } else { 0.0 }))?;
    Ok(ExperimentData {
        name: "triangle".into(),
        train,
        truth_train,
        test_x: grid(p.test_grid),
        truth_test,
        transform: TransformSpec::identity(6),
        constraint,
        residual,
        mask_redraws: redraws,
    })
}

/// Double-pendulum constants; the blue/green labels follow the paper, not the source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumParams {
    pub length_blue: f64,
    pub length_green: f64,
    /// `m_b / m_g`, with `m_g = 1`.
    pub mass_ratio: f64,
    pub frame_rate: f64,
    pub g: f64,
    pub scale_pos: f64,
    pub scale_vel: f64,
    pub scale_time: f64,
    /// Meters per raw coordinate unit.
    pub unit_to_meter: f64,
    /// Negate raw vertical coordinates (image rows grow downward).
    pub flip_y: bool,
    pub columns: PendulumColumns,
}

/// Raw CSV column indices of the marker coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumColumns {
    pub anchor: [usize; 2],
    pub blue: [usize; 2],
    pub green: [usize; 2],
}

impl Default for PendulumColumns {
    /// Six columns `anchor x,y; green x,y; blue x,y` in the source labeling, whose green marker
    /// is the paper's blue one.
    fn default() -> Self {
        PendulumColumns { anchor: [0, 1], blue: [2, 3], green: [4, 5] }
    }
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            length_blue: 0.091,
            length_green: 0.070,
            mass_ratio: 6.5,
            frame_rate: 500.0,
            g: 9.81,
            scale_pos: 20.0,
            scale_vel: 10f64.sqrt(),
            scale_time: 5.0,
            unit_to_meter: 1.0,
            flip_y: false,
            columns: PendulumColumns::default(),
        }
    }
}

impl PendulumParams {
    pub fn mass_blue(&self) -> f64 {
        self.mass_ratio
    }

    pub fn mass_green(&self) -> f64 {
        1.0
    }

    /// Energy coefficients over the scaled outputs
    /// `[z_bx, z_by, z_gx, z_gy, v_bx, v_by, v_gx, v_gy]` with squared velocities.
    pub fn energy_coefficients(&self) -> Vec<f64> {
        let (mb, mg) = (self.mass_blue(), self.mass_green());
        let sp = self.scale_pos;
        let sv2 = self.scale_vel * self.scale_vel;
        vec![0.0, mb * self.g / sp, 0.0, mg * self.g / sp, mb / (2.0 * sv2), mb / (2.0 * sv2), mg / (2.0 * sv2), mg / (2.0 * sv2)]
    }

    pub fn nonlinearities() -> Vec<Nonlinearity> {
        let mut v = vec![Nonlinearity::Identity; 4];
        v.extend(vec![Nonlinearity::Square; 4]);
        v
    }

    fn validate(&self) -> Result<()> {
        let vals = [
            self.length_blue,
            self.length_green,
            self.mass_ratio,
            self.frame_rate,
            self.g,
            self.scale_pos,
            self.scale_vel,
            self.scale_time,
            self.unit_to_meter,
        ];
        if vals.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::input("pendulum parameters must be positive"))
        }
    }
}

/// Raw marker positions of one recording, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumRecording {
    pub rows: DMatrix<f64>,
}

pub fn read_pendulum_csv(path: &Path) -> Result<PendulumRecording> {
    let file = std::fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split([',', ' ', '\t']).filter(|s| !s.is_empty()).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|s| s.parse::<f64>()).collect();
        let vals = match parsed {
            Ok(v) => v,
            Err(_) if rows.is_empty() && width.is_none() => {
                // header line
                width = Some(fields.len());
                continue;
            }
            Err(e) => return Err(Error::Ingest { row: k + 1, message: e.to_string() }),
        };
        match width {
            Some(w) if w != vals.len() => {
                return Err(Error::Ingest { row: k + 1, message: format!("expected {w} fields, found {}", vals.len()) })
            }
            _ => width = Some(vals.len()),
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ingest { row: k + 1, message: "non-finite coordinate".into() });
        }
        rows.push(vals);
    }
    let w = width.unwrap_or(0);
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    }
    Ok(PendulumRecording { rows: DMatrix::from_fn(rows.len(), w, |i, j| rows[i][j]) })
}

/// Velocity by central differences in the interior and one-sided differences at the ends.
pub fn finite_difference_velocity(pos: &[f64], dt: f64) -> Vec<f64> {
    let n = pos.len();
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| {
                if i == 0 {
                    (pos[1] - pos[0]) / dt
                } else if i == n - 1 {
                    (pos[n - 1] - pos[n - 2]) / dt
                } else {
                    (pos[i + 1] - pos[i - 1]) / (2.0 * dt)
                }
            })
            .collect(),
    }
}

/// Scaled positions and velocities `[z_bx, z_by, z_gx, z_gy, v_bx, v_by, v_gx, v_gy]` of a whole
/// recording, with scaled time as input.
pub fn pendulum_states(rec: &PendulumRecording, p: &PendulumParams) -> Result<TaskedData> {
    p.validate()?;
    let c = p.columns;
    let needed = [c.anchor, c.blue, c.green].iter().flatten().copied().max().unwrap_or(0);
    if needed >= rec.rows.ncols() {
        return Err(Error::Input(format!("column {needed} requested but the recording has {} columns", rec.rows.ncols())));
    }
    let n = rec.rows.nrows();
    let dt = 1.0 / p.frame_rate;
    let ysign = if p.flip_y { -1.0 } else { 1.0 };
    let coord = |col: [usize; 2], axis: usize| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let raw = rec.rows[(i, col[axis])] - rec.rows[(i, c.anchor[axis])];
                let s = if axis == 1 { ysign } else { 1.0 };
                s * raw * p.unit_to_meter
            })
            .collect()
    };
    let pos = [coord(c.blue, 0), coord(c.blue, 1), coord(c.green, 0), coord(c.green, 1)];
    let vel: Vec<Vec<f64>> = pos.iter().map(|z| finite_difference_velocity(z, dt)).collect();
    let values = DMatrix::from_fn(n, 8, |i, a| {
        if a < 4 {
            pos[a][i] * p.scale_pos
        } else {
            vel[a - 4][i] * p.scale_vel
        }
    });
    let t: Vec<f64> = (0..n).map(|i| i as f64 * dt * p.scale_time).collect();
    Ok(TaskedData::complete(column(&t), values)?
        .with_names(["z_bx", "z_by", "z_gx", "z_gy", "v_bx", "v_by", "v_gx", "v_gy"].iter().map(|s| s.to_string()).collect()))
}

/// Double-pendulum segment with its energy constraint and transformation.
#[derive(Clone, Debug)]
pub struct PendulumSegment {
    pub data: TaskedData,
    pub constraint: ConstraintSpec,
    pub transform: TransformSpec,
}

/// Loads a recording and cuts out `segment = (start, len)`; the constraint uses the energy
/// averaged over the whole segment.
pub fn load_double_pendulum(path: &Path, p: &PendulumParams, segment: (usize, usize)) -> Result<PendulumSegment> {
    let rec = read_pendulum_csv(path)?;
    let all = pendulum_states(&rec, p)?;
    let (start, len) = segment;
    if len == 0 || start + len > all.n_points() {
        return Err(Error::Input(format!(
            "segment {start}:{len} lies outside the recording of {} frames",
            all.n_points()
        )));
    }
    let rows: Vec<usize> = (start..start + len).collect();
    let data = all.select_points(&rows);
    let e = energy_estimate(&data, &p.energy_coefficients(), &PendulumParams::nonlinearities())?;
    Ok(PendulumSegment { constraint: pendulum_constraint(p, e)?, transform: pendulum_transform(), data })
}

/// Constraint over the transformed outputs `[z_by, z_gy, v_bx², v_by², v_gx², v_gy²]`.
pub fn pendulum_constraint(p: &PendulumParams, energy: f64) -> Result<ConstraintSpec> {
    let a = p.energy_coefficients();
    let f = DMatrix::from_row_slice(1, 6, &[a[1], a[3], a[4], a[5], a[6], a[7]]);
    ConstraintSpec::constant(f, DVector::from_element(1, energy))
}

/// Positions identity (horizontal ones learned separately), velocities squared.
pub fn pendulum_transform() -> TransformSpec {
    let mut t = TransformSpec::new(PendulumParams::nonlinearities())
        .with_virtual(VirtualPolicy::AtZeroCrossings)
        .with_separate(&[0, 2]);
    t.relearn_aux_jointly = false;
    t
}

/// Mean of `Σ a_i h_i(y_i)` over the points where every task with nonzero coefficient is observed.
pub fn energy_estimate(data: &TaskedData, coeffs: &[f64], nls: &[Nonlinearity]) -> Result<f64> {
    if coeffs.len() != data.n_tasks() || nls.len() != data.n_tasks() {
        return Err(Error::input("energy coefficients do not match the tasks"));
    }
    let mut total = 0.0;
    let mut count = 0;
    'points: for i in 0..data.n_points() {
        let mut e = 0.0;
        for a in 0..data.n_tasks() {
            if coeffs[a] == 0.0 {
                continue;
            }
            if !data.observed[(i, a)] {
                continue 'points;
            }
            match nls[a].forward(data.values[(i, a)]) {
                Some(v) => e += coeffs[a] * v,
                None => continue 'points,
            }
        }
        total += e;
        count += 1;
    }
    if count == 0 {
        return Err(Error::input("no point has every constraint-relevant task observed"));
    }
    Ok(total / count as f64)
}

/// Writes `x, y1..yNf` with empty cells for missing entries and a leading comment line.
pub fn write_dataset_csv(path: &Path, data: &TaskedData, units: &str) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    writeln!(file, "# tasks={} units={}", data.task_names.join(";"), units)?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["x".to_string()];
    header.extend((1..=data.n_tasks()).map(|a| format!("y{a}")));
    w.write_record(&header)?;
    for i in 0..data.n_points() {
        let mut rec = vec![format!("{}", data.inputs[(i, 0)])];
        for a in 0..data.n_tasks() {
            rec.push(if data.observed[(i, a)] { format!("{}", data.values[(i, a)]) } else { String::new() });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_dataset_csv`].
pub fn read_dataset_csv(path: &Path) -> Result<TaskedData> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut names = None;
    let body: String = text
        .lines()
        .filter(|l| {
            if let Some(rest) = l.trim().strip_prefix('#') {
                if let Some(t) = rest.trim().strip_prefix("tasks=") {
                    let list = t.split_whitespace().next().unwrap_or("");
                    names = Some(list.split(';').map(str::to_string).collect::<Vec<_>>());
                }
                false
            } else {
                true
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    let nf = r.headers()?.len().saturating_sub(1);
    let mut xs = Vec::new();
    let mut vals = Vec::new();
    let mut obs = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Ingest { row: k + 2, message: format!("'{s}': {e}") });
        xs.push(parse(&rec[0])?);
        for a in 0..nf {
            let s = rec.get(a + 1).unwrap_or("");
            if s.is_empty() {
                vals.push(0.0);
                obs.push(false);
            } else {
                vals.push(parse(s)?);
                obs.push(true);
            }
        }
    }
    let n = xs.len();
    let data = TaskedData::new(column(&xs), DMatrix::from_row_slice(n, nf, &vals), DMatrix::from_row_slice(n, nf, &obs))?;
    Ok(match names {
        Some(nm) => data.with_names(nm),
        None => data,
    })
}

/// Generator by experiment name with default parameters, overriding noise and drop probability.
pub fn generate(name: &str, noise: f64, drop: f64, seed: u64) -> Result<ExperimentData> {
    match name {
        "ho" => gen_harmonic_oscillator(&OscillatorParams { noise_sigma_n: noise, drop_prob_fd: drop, ..Default::default() }, seed),
        "dho" => gen_damped_oscillator(&OscillatorParams { noise_sigma_n: noise, drop_prob_fd: drop, ..OscillatorParams::damped() }, seed),
        "ff" => gen_free_fall(&FreeFallParams { noise_sigma_n: noise, drop_prob_fd: drop, ..Default::default() }, seed),
        "logsin" => gen_logsin(&LogsinParams { noise_sigma_n: noise, drop_prob_fd: drop, ..Default::default() }, seed),
        "triangle" => {
            if drop != 0.0 {
                return Err(Error::Config("the triangle experiment has no missing entries".into()));
            }
            gen_triangle(&TriangleParams { noise_sigma_n: noise, ..Default::default() }, seed)
        }
        other => Err(Error::Config(format!("unknown dataset '{other}'"))),
    }
}

/// Unit label written into dataset CSV headers.
pub fn units_of(name: &str) -> &'static str {
    match name {
        "ho" | "dho" => "m;m/s",
        "ff" => "m/20;m/s/20",
        "triangle" => "m",
        _ => "1",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ho_defaults_at_zero() {
        let p = OscillatorParams::default();
        let (z, v) = p.state(0.0);
        assert_eq!(z, 0.0);
        assert_relative_eq!(v, 1.6f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn ff_zero_crossing() {
        let p = FreeFallParams::default();
        assert_eq!(p.state(0.0), (0.0, 20.0));
        assert_relative_eq!(p.v0() / p.g, 2.0387359836901124, epsilon = 1e-12);
    }

    #[test]
    fn logsin_values() {
        assert_relative_eq!(logsin_f1(0.0), 3.0 * (-5.0f64).exp() + 0.2, epsilon = 1e-15);
        assert_eq!(logsin_f2(0.0), 0.0);
        let x = std::f64::consts::PI.cbrt();
        assert_relative_eq!(logsin_f2(x), -std::f64::consts::PI / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn triangle_pose_at_zero() {
        let z = triangle_pose(0.0);
        assert_relative_eq!(z[(0, 0)], 5.0, epsilon = 1e-14);
        assert_relative_eq!(z[(1, 0)], 5.0, epsilon = 1e-14);
        let l = triangle_edge_lengths_sq(&triangle_reference());
        assert_relative_eq!(l[0], 16.0, epsilon = 1e-12);
        assert_relative_eq!(l[1], 23.36, epsilon = 1e-12);
    }

    #[test]
    fn drop_mask_keeps_points() {
        let p = OscillatorParams { drop_prob_fd: 0.9, ..Default::default() };
        let d = gen_harmonic_oscillator(&p, 1).unwrap();
        for i in 0..d.train.n_points() {
            assert!(d.train.observed.row(i).iter().any(|&o| o));
        }
        let full = gen_harmonic_oscillator(&OscillatorParams::default(), 1).unwrap();
        assert!(full.train.is_complete());
    }

    #[test]
    fn constant_velocity_fixture() {
        assert_eq!(finite_difference_velocity(&[2.0; 5], 0.01), vec![0.0; 5]);
    }

    #[test]
    fn energy_of_single_point() {
        let d = TaskedData::complete(column(&[0.0]), DMatrix::from_row_slice(1, 2, &[1.0, 2.0])).unwrap();
        let e = energy_estimate(&d, &[0.5, 0.5], &[Nonlinearity::Square, Nonlinearity::Square]).unwrap();
        assert_relative_eq!(e, 2.5, epsilon = 1e-15);
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let d = gen_harmonic_oscillator(&OscillatorParams { drop_prob_fd: 0.3, ..Default::default() }, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ho.csv");
        write_dataset_csv(&path, &d.train, "m;m/s").unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(back.observed, d.train.observed);
        assert_eq!(back.task_names, d.train.task_names);
        for i in 0..back.n_points() {
            for a in 0..2 {
                if back.observed[(i, a)] {
                    assert_eq!(back.values[(i, a)], d.train.values[(i, a)]);
                }
            }
        }
    }
}
