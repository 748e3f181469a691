//! Output transformations that turn nonlinear sum constraints into linear ones, plus the
//! auxiliary-output machinery needed to invert them.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::data::TaskedData;
use crate::error::{Error, Result};

/// User-supplied strictly monotone transformation `y' = g(y)`.
pub trait MonotoneTransform: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    /// `g(y)`, or `None` outside the domain.
    fn forward(&self, y: f64) -> Option<f64>;
    /// `g⁻¹(y')`.
    fn inverse(&self, y_prime: f64) -> f64;
    /// `g⁻¹` and its first three derivatives at `y'`.
    fn inverse_jet(&self, y_prime: f64) -> [f64; 4];
}

/// Per-task output nonlinearity `h_i`.
#[derive(Clone, Debug)]
pub enum Nonlinearity {
    Identity,
    Square,
    Log,
    Sine,
    Custom(Arc<dyn MonotoneTransform>),
}

impl Nonlinearity {
    /// Whether the inverse needs an auxiliary output to pick a branch.
    pub fn needs_aux(&self) -> bool {
        matches!(self, Nonlinearity::Square | Nonlinearity::Sine)
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Nonlinearity::Identity)
    }

    pub fn label(&self) -> String {
        match self {
            Nonlinearity::Identity => "identity".into(),
            Nonlinearity::Square => "square".into(),
            Nonlinearity::Log => "log".into(),
            Nonlinearity::Sine => "sine".into(),
            Nonlinearity::Custom(c) => c.name().to_string(),
        }
    }

    /// `h(y)`, or `None` when `y` is outside the domain.
    pub fn forward(&self, y: f64) -> Option<f64> {
        match self {
            Nonlinearity::Identity => Some(y),
            Nonlinearity::Square => Some(y * y),
            Nonlinearity::Log => (y > 0.0).then(|| y.ln()),
            Nonlinearity::Sine => Some(y.sin()),
            Nonlinearity::Custom(c) => c.forward(y),
        }
    }

    /// Local inverse on the given branch; also reports whether the input had to be clamped.
    ///
    /// Square: branch `>= 0` is the positive root. Sine: branch `k` covers
    /// `[kπ - π/2, kπ + π/2]` with inverse `kπ + (-1)^k asin(y')`.
    pub fn inverse_on_branch(&self, y_prime: f64, branch: i64) -> (f64, bool) {
        match self {
            Nonlinearity::Identity => (y_prime, false),
            Nonlinearity::Square => {
                let clamped = y_prime < 0.0;
                let r = y_prime.max(0.0).sqrt();
                (if branch >= 0 { r } else { -r }, clamped)
            }
            Nonlinearity::Log => (y_prime.exp(), false),
            Nonlinearity::Sine => {
                let clamped = y_prime.abs() > 1.0;
                let s = y_prime.clamp(-1.0, 1.0).asin();
                let sign = if branch.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                (branch as f64 * PI + sign * s, clamped)
            }
            Nonlinearity::Custom(c) => (c.inverse(y_prime), false),
        }
    }

    /// `(|h'|, |h''|)` at the preimage of `y'`; magnitudes do not depend on the branch.
    pub fn local_derivatives(&self, y_prime: f64) -> (f64, f64) {
        match self {
            Nonlinearity::Identity => (1.0, 0.0),
            Nonlinearity::Square => (2.0 * y_prime.max(0.0).sqrt(), 2.0),
            Nonlinearity::Log => (y_prime.exp().recip(), (-2.0 * y_prime).exp()),
            Nonlinearity::Sine => ((1.0 - y_prime * y_prime).max(0.0).sqrt(), y_prime.abs().min(1.0)),
            Nonlinearity::Custom(c) => {
                let g = c.inverse_jet(y_prime);
                let h1 = g[1].recip();
                (h1.abs(), (g[2] * h1.powi(3)).abs())
            }
        }
    }

    /// Branch that contains the untransformed value `y`.
    pub fn branch_of(&self, y: f64) -> i64 {
        match self {
            Nonlinearity::Square => {
                if y >= 0.0 {
                    0
                } else {
                    -1
                }
            }
            Nonlinearity::Sine => (y / PI).round() as i64,
            _ => 0,
        }
    }
}

/// Where virtual measurements are placed.
#[derive(Clone, Debug, PartialEq)]
pub enum VirtualPolicy {
    Off,
    /// Square tasks at zero crossings of their auxiliary mean.
    AtZeroCrossings,
    /// Square tasks at zero crossings and sine tasks where the auxiliary mean crosses one of the
    /// given levels. An empty list means every odd multiple of π/2.
    AtBranchCrossings(Vec<f64>),
}

/// Transformation applied to each task before constrained learning.
#[derive(Clone, Debug)]
pub struct TransformSpec {
    pub nonlinearities: Vec<Nonlinearity>,
    /// Tasks left out of the constrained model and taken straight from the auxiliary GP.
    pub separate: Vec<bool>,
    /// Append untransformed copies of every branch-ambiguous task to the constrained model.
    pub relearn_aux_jointly: bool,
    pub virtual_policy: VirtualPolicy,
    /// Sine branch at the leftmost prediction point.
    pub initial_branch: i64,
}

impl TransformSpec {
    pub fn new(nonlinearities: Vec<Nonlinearity>) -> Self {
        let n = nonlinearities.len();
        TransformSpec {
            nonlinearities,
            separate: vec![false; n],
            relearn_aux_jointly: true,
            virtual_policy: VirtualPolicy::Off,
            initial_branch: 0,
        }
    }

    pub fn identity(n_tasks: usize) -> Self {
        Self::new(vec![Nonlinearity::Identity; n_tasks])
    }

    pub fn with_virtual(mut self, policy: VirtualPolicy) -> Self {
        self.virtual_policy = policy;
        self
    }

    pub fn with_separate(mut self, tasks: &[usize]) -> Self {
        for &t in tasks {
            if t < self.separate.len() {
                self.separate[t] = true;
            }
        }
        self
    }

    pub fn n_original(&self) -> usize {
        self.nonlinearities.len()
    }

    pub fn is_identity(&self) -> bool {
        self.nonlinearities.iter().all(Nonlinearity::is_identity) && !self.separate.iter().any(|&s| s)
    }

    /// Column of each original task in the transformed output (`None` for separate tasks).
    pub fn transformed_columns(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.separate
            .iter()
            .map(|&sep| {
                if sep {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    }

    /// `(original task, column)` of every auxiliary copy in the transformed output.
    pub fn aux_columns(&self) -> Vec<(usize, usize)> {
        if !self.relearn_aux_jointly {
            return Vec::new();
        }
        let base = self.separate.iter().filter(|&&s| !s).count();
        self.nonlinearities
            .iter()
            .enumerate()
            .filter(|(t, nl)| nl.needs_aux() && !self.separate[*t])
            .enumerate()
            .map(|(k, (t, _))| (t, base + k))
            .collect()
    }

    /// Number of columns of the transformed output.
    pub fn n_transformed(&self) -> usize {
        self.separate.iter().filter(|&&s| !s).count() + self.aux_columns().len()
    }

    /// Nonlinearity governing each transformed column (aux copies are identity).
    pub fn column_nonlinearities(&self) -> Vec<Nonlinearity> {
        let mut out: Vec<Nonlinearity> = self
            .nonlinearities
            .iter()
            .zip(&self.separate)
            .filter(|(_, &s)| !s)
            .map(|(nl, _)| nl.clone())
            .collect();
        out.extend(self.aux_columns().iter().map(|_| Nonlinearity::Identity));
        out
    }

    fn validate(&self, n_tasks: usize) -> Result<()> {
        if n_tasks != self.n_original() || self.separate.len() != n_tasks {
            return Err(Error::input(format!(
                "transform describes {} tasks but data has {}",
                self.n_original(),
                n_tasks
            )));
        }
        Ok(())
    }

    /// Levels of the auxiliary mean at which task `t` receives virtual measurements.
    fn virtual_levels(&self, t: usize, aux_range: (f64, f64)) -> Vec<f64> {
        match (&self.virtual_policy, &self.nonlinearities[t]) {
            (VirtualPolicy::Off, _) => Vec::new(),
            (_, Nonlinearity::Square) => vec![0.0],
            (VirtualPolicy::AtBranchCrossings(levels), Nonlinearity::Sine) => {
                if levels.is_empty() {
                    let lo = ((aux_range.0 - FRAC_PI_2) / PI).floor() as i64;
                    let hi = ((aux_range.1 - FRAC_PI_2) / PI).ceil() as i64;
                    (lo..=hi).map(|k| FRAC_PI_2 + k as f64 * PI).collect()
                } else {
                    levels.clone()
                }
            }
            _ => Vec::new(),
        }
    }
}

/// Applies the transformation; values outside a task's domain are an error.
pub fn apply_transform(data: &TaskedData, spec: &TransformSpec) -> Result<TaskedData> {
    transform_inner(data, spec, false).map(|(d, _)| d)
}

/// Like [`apply_transform`] but marks out-of-domain values as missing and counts them.
pub fn apply_transform_lenient(data: &TaskedData, spec: &TransformSpec) -> Result<(TaskedData, usize)> {
    transform_inner(data, spec, true)
}

fn transform_inner(data: &TaskedData, spec: &TransformSpec, lenient: bool) -> Result<(TaskedData, usize)> {
    spec.validate(data.n_tasks())?;
    let n = data.n_points();
    let cols = spec.transformed_columns();
    let aux = spec.aux_columns();
    let width = spec.n_transformed();
    let mut values = DMatrix::zeros(n, width);
    let mut observed = DMatrix::from_element(n, width, false);
    let mut virtual_obs = DMatrix::from_element(n, width, false);
    let mut names = vec![String::new(); width];
    let mut dropped = 0;
    for (t, col) in cols.iter().enumerate() {
        let Some(c) = *col else { continue };
        let nl = &spec.nonlinearities[t];
        names[c] = match nl {
            Nonlinearity::Identity => data.task_names[t].clone(),
            Nonlinearity::Square => format!("{}^2", data.task_names[t]),
            other => format!("{}({})", other.label(), data.task_names[t]),
        };
        for i in 0..n {
            if !data.observed[(i, t)] {
                continue;
            }
            match nl.forward(data.values[(i, t)]) {
                Some(v) if v.is_finite() => {
                    values[(i, c)] = v;
                    observed[(i, c)] = true;
                    virtual_obs[(i, c)] = data.virtual_obs[(i, t)];
                }
                _ if lenient => dropped += 1,
                _ => {
                    return Err(Error::input(format!(
                        "value {} of task {} ('{}') at point {} is outside the domain of the {} transform",
                        data.values[(i, t)],
                        t,
                        data.task_names[t],
                        i,
                        nl.label()
                    )))
                }
            }
        }
    }
    for &(t, c) in &aux {
        names[c] = format!("{}_aux", data.task_names[t]);
        for i in 0..n {
            if data.observed[(i, t)] {
                values[(i, c)] = data.values[(i, t)];
                observed[(i, c)] = true;
                virtual_obs[(i, c)] = data.virtual_obs[(i, t)];
            }
        }
    }
    Ok((
        TaskedData {
            inputs: data.inputs.clone(),
            values,
            observed,
            virtual_obs,
            task_names: names,
        },
        dropped,
    ))
}

/// A location where a curve crosses a level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossing {
    pub x: f64,
    pub level: f64,
}

/// Linear-interpolated locations where `curve` (sampled on the sorted `grid`) crosses any of `levels`.
pub fn find_branch_crossings(grid: &[f64], curve: &[f64], levels: &[f64]) -> Vec<Crossing> {
    let mut out = Vec::new();
    if grid.len() < 2 || grid.len() != curve.len() {
        return out;
    }
    for &level in levels {
        let tol = 1e-12 * level.abs().max(1.0);
        let mut prev_touch = false;
        for j in 0..grid.len() {
            let dj = curve[j] - level;
            if dj.abs() <= tol {
                if !prev_touch {
                    out.push(Crossing { x: grid[j], level });
                }
                prev_touch = true;
                continue;
            }
            prev_touch = false;
            if j + 1 < grid.len() {
                let dk = curve[j + 1] - level;
                if dk.abs() > tol && dj * dk < 0.0 {
                    let w = dj / (dj - dk);
                    out.push(Crossing { x: grid[j] + w * (grid[j + 1] - grid[j]), level });
                }
            }
        }
    }
    out.sort_by(|a, b| a.x.total_cmp(&b.x));
    out
}

/// A virtual observation of one transformed column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VirtualMeasurement {
    pub x: f64,
    pub column: usize,
    pub value: f64,
}

/// Virtual observations `y' = h(level)` at the crossings found for each original task.
///
/// `crossings[t]` lists the crossings of task `t`'s auxiliary mean.
pub fn make_virtual_measurements(crossings: &[Vec<Crossing>], spec: &TransformSpec) -> Vec<VirtualMeasurement> {
    let cols = spec.transformed_columns();
    let mut out = Vec::new();
    for (t, list) in crossings.iter().enumerate() {
        let Some(Some(column)) = cols.get(t) else { continue };
        let nl = &spec.nonlinearities[t];
        for c in list {
            if let Some(value) = nl.forward(c.level) {
                out.push(VirtualMeasurement { x: c.x, column: *column, value });
            }
        }
    }
    out
}

/// Crossings of each task's auxiliary mean at the levels required by the virtual policy.
pub fn virtual_crossings(ctx: &BacktransformContext, spec: &TransformSpec) -> Vec<Vec<Crossing>> {
    (0..spec.n_original())
        .map(|t| {
            if spec.separate[t] {
                return Vec::new();
            }
            let curve: Vec<f64> = ctx.aux_means.column(t).iter().copied().collect();
            let lo = curve.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let levels = spec.virtual_levels(t, (lo, hi));
            find_branch_crossings(&ctx.grid, &curve, &levels)
        })
        .collect()
}

/// Auxiliary means on a dense grid and the sine branch index at each grid point.
#[derive(Clone, Debug)]
pub struct BacktransformContext {
    pub grid: Vec<f64>,
    /// `grid × N_original` auxiliary posterior means.
    pub aux_means: DMatrix<f64>,
    /// Branch index per grid point for every task (zero for tasks without branches).
    pub branch_state: Vec<Vec<i64>>,
}

/// Counts in how many branch changes of the sine inverse happen between two values.
fn sine_branch_shift(a: f64, b: f64) -> i64 {
    // branch boundaries sit at (k + 1/2)π; count signed crossings
    let ka = ((a - FRAC_PI_2) / PI).floor() as i64;
    let kb = ((b - FRAC_PI_2) / PI).floor() as i64;
    kb - ka
}

impl BacktransformContext {
    pub fn new(grid: Vec<f64>, aux_means: DMatrix<f64>, spec: &TransformSpec) -> Result<Self> {
        if grid.len() < 2 || aux_means.nrows() != grid.len() || aux_means.ncols() != spec.n_original() {
            return Err(Error::input("auxiliary grid does not match the transform"));
        }
        if grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::input("auxiliary grid must be sorted"));
        }
        let branch_state = (0..spec.n_original())
            .map(|t| {
                let mut state = vec![0i64; grid.len()];
                if matches!(spec.nonlinearities[t], Nonlinearity::Sine) {
                    let mut k = spec.initial_branch;
                    state[0] = k;
                    for j in 1..grid.len() {
                        k += sine_branch_shift(aux_means[(j - 1, t)], aux_means[(j, t)]);
                        state[j] = k;
                    }
                }
                state
            })
            .collect();
        Ok(BacktransformContext { grid, aux_means, branch_state })
    }

    fn segment(&self, x: f64) -> Result<(usize, f64)> {
        let g = &self.grid;
        let span = (g[g.len() - 1] - g[0]).abs().max(1.0);
        if x < g[0] - 1e-9 * span || x > g[g.len() - 1] + 1e-9 * span {
            return Err(Error::input(format!("prediction point {x} lies outside the auxiliary grid")));
        }
        let j = g.partition_point(|&v| v <= x).clamp(1, g.len() - 1) - 1;
        let w = if g[j + 1] > g[j] { ((x - g[j]) / (g[j + 1] - g[j])).clamp(0.0, 1.0) } else { 0.0 };
        Ok((j, w))
    }

    /// Interpolated auxiliary mean of task `t` at `x`.
    pub fn aux_at(&self, t: usize, x: f64) -> Result<f64> {
        let (j, w) = self.segment(x)?;
        Ok((1.0 - w) * self.aux_means[(j, t)] + w * self.aux_means[(j + 1, t)])
    }

    /// Branch index for task `t` at `x`.
    pub fn branch_at(&self, t: usize, x: f64, nl: &Nonlinearity) -> Result<i64> {
        match nl {
            Nonlinearity::Square => Ok(if self.aux_at(t, x)? >= 0.0 { 0 } else { -1 }),
            Nonlinearity::Sine => {
                let (j, _) = self.segment(x)?;
                let a = self.aux_at(t, x)?;
                Ok(self.branch_state[t][j] + sine_branch_shift(self.aux_means[(j, t)], a))
            }
            _ => Ok(0),
        }
    }
}

/// Counts of inputs that had to be clamped during backtransformation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClampStats {
    /// Negative `f'` on square tasks set to zero.
    pub square: usize,
    /// `|f'| > 1` on sine tasks clamped to `±1`.
    pub sine: usize,
}

/// Maps transformed predictions (`N × n_transformed`) back to the original tasks.
pub fn backtransform(
    f_prime: &DMatrix<f64>,
    xs: &[f64],
    ctx: &BacktransformContext,
    spec: &TransformSpec,
) -> Result<(DMatrix<f64>, ClampStats)> {
    if f_prime.nrows() != xs.len() || f_prime.ncols() < spec.separate.iter().filter(|&&s| !s).count() {
        return Err(Error::input("transformed predictions do not match the transform"));
    }
    let cols = spec.transformed_columns();
    let mut out = DMatrix::zeros(xs.len(), spec.n_original());
    let mut stats = ClampStats::default();
    for (t, col) in cols.iter().enumerate() {
        let nl = &spec.nonlinearities[t];
        for (i, &x) in xs.iter().enumerate() {
            out[(i, t)] = match col {
                None => ctx.aux_at(t, x)?,
                Some(c) => {
                    let branch = ctx.branch_at(t, x, nl)?;
                    let (v, clamped) = nl.inverse_on_branch(f_prime[(i, *c)], branch);
                    if clamped {
                        match nl {
                            Nonlinearity::Square => stats.square += 1,
                            Nonlinearity::Sine => stats.sine += 1,
                            _ => {}
                        }
                    }
                    v
                }
            };
        }
    }
    Ok((out, stats))
}

/// Backtransforms credible bounds with the same auxiliary means as the mean and re-sorts them.
pub fn backtransform_intervals(
    lower: &DMatrix<f64>,
    upper: &DMatrix<f64>,
    xs: &[f64],
    ctx: &BacktransformContext,
    spec: &TransformSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (lo, _) = backtransform(lower, xs, ctx, spec)?;
    let (hi, _) = backtransform(upper, xs, ctx, spec)?;
    let l = lo.zip_map(&hi, f64::min);
    let u = lo.zip_map(&hi, f64::max);
    Ok((l, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::column;
    use approx::assert_relative_eq;

    fn ctx_const(spec: &TransformSpec, aux: &[f64]) -> BacktransformContext {
        let grid = vec![0.0, 1.0];
        let m = DMatrix::from_fn(2, aux.len(), |_, t| aux[t]);
        BacktransformContext::new(grid, m, spec).unwrap()
    }

    #[test]
    fn square_transform_appends_aux() {
        let spec = TransformSpec::new(vec![Nonlinearity::Square, Nonlinearity::Square]);
        let d = TaskedData::complete(column(&[0.0]), DMatrix::from_row_slice(1, 2, &[3.0, -2.0])).unwrap();
        let t = apply_transform(&d, &spec).unwrap();
        assert_eq!(t.values, DMatrix::from_row_slice(1, 4, &[9.0, 4.0, 3.0, -2.0]));
    }

    #[test]
    fn logsin_transform() {
        let spec = TransformSpec::new(vec![Nonlinearity::Log, Nonlinearity::Sine]);
        let d = TaskedData::complete(
            column(&[0.0]),
            DMatrix::from_row_slice(1, 2, &[std::f64::consts::E, FRAC_PI_2]),
        )
        .unwrap();
        let t = apply_transform(&d, &spec).unwrap();
        assert_eq!(t.n_tasks(), 3);
        assert_relative_eq!(t.values[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(t.values[(0, 1)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(t.values[(0, 2)], FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn log_domain_violation_names_task_and_point() {
        let spec = TransformSpec::new(vec![Nonlinearity::Log]);
        let d = TaskedData::complete(column(&[0.0, 1.0]), column(&[1.0, -1.0])).unwrap();
        let err = apply_transform(&d, &spec).unwrap_err().to_string();
        assert!(err.contains("task 0") && err.contains("point 1"), "{err}");
        let (t, dropped) = apply_transform_lenient(&d, &spec).unwrap();
        assert_eq!(dropped, 1);
        assert!(!t.observed[(1, 0)]);
    }

    #[test]
    fn missing_flags_propagate() {
        let spec = TransformSpec::new(vec![Nonlinearity::Square]);
        let mut obs = DMatrix::from_element(2, 1, true);
        obs[(1, 0)] = false;
        let d = TaskedData::new(column(&[0.0, 1.0]), column(&[2.0, 0.0]), obs).unwrap();
        let t = apply_transform(&d, &spec).unwrap();
        assert!(!t.observed[(1, 0)] && !t.observed[(1, 1)]);
    }

    #[test]
    fn crossings_of_a_line() {
        let grid: Vec<f64> = (0..=20000).map(|i| i as f64 * 1e-4).collect();
        let curve: Vec<f64> = grid.iter().map(|t| t - 1.0).collect();
        let c = find_branch_crossings(&grid, &curve, &[0.0]);
        assert_eq!(c.len(), 1);
        assert!((c[0].x - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_curve_has_no_crossings() {
        assert!(find_branch_crossings(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0], &[0.0]).is_empty());
    }

    #[test]
    fn sine_crossings_on_full_period() {
        let grid = crate::data::linspace(0.0, 2.0 * PI, 1001);
        let curve: Vec<f64> = grid.iter().map(|t| t.sin()).collect();
        let h = grid[1] - grid[0];
        let c = find_branch_crossings(&grid, &curve, &[0.0]);
        assert_eq!(c.len(), 3);
        for (got, want) in c.iter().zip([0.0, PI, 2.0 * PI]) {
            assert!((got.x - want).abs() <= h);
        }
    }

    #[test]
    fn virtual_records() {
        let spec = TransformSpec::new(vec![Nonlinearity::Square, Nonlinearity::Sine]);
        let crossings = vec![
            vec![Crossing { x: PI, level: 0.0 }],
            vec![Crossing { x: 1.46, level: -FRAC_PI_2 }],
        ];
        let v = make_virtual_measurements(&crossings, &spec);
        assert_eq!(v[0], VirtualMeasurement { x: PI, column: 0, value: 0.0 });
        assert_eq!(v[1].column, 1);
        assert_relative_eq!(v[1].value, -1.0);
        assert!(make_virtual_measurements(&[vec![], vec![]], &spec).is_empty());
    }

    #[test]
    fn square_backtransform_examples() {
        let spec = TransformSpec::new(vec![Nonlinearity::Square]);
        let neg = ctx_const(&spec, &[-1.0]);
        let (v, _) = backtransform(&DMatrix::from_row_slice(1, 2, &[4.0, 0.0]), &[0.5], &neg, &spec).unwrap();
        assert_eq!(v[(0, 0)], -2.0);
        let pos = ctx_const(&spec, &[1.0]);
        let (v, stats) = backtransform(&DMatrix::from_row_slice(1, 2, &[-0.01, 0.0]), &[0.5], &pos, &spec).unwrap();
        assert_eq!(v[(0, 0)], 0.0);
        assert_eq!(stats.square, 1);
    }

    #[test]
    fn sine_branch_left_of_minus_half_pi() {
        let (v, _) = Nonlinearity::Sine.inverse_on_branch(0.5, -1);
        assert_relative_eq!(v, -PI - 0.5f64.asin(), epsilon = 1e-15);
        assert_relative_eq!(v.sin(), 0.5, epsilon = 1e-14);
        assert!((v + 3.665).abs() < 1e-3);
    }

    #[test]
    fn sine_branch_tracking_follows_aux() {
        let spec = TransformSpec::new(vec![Nonlinearity::Sine]);
        let grid = crate::data::linspace(-1.2, 2.0, 321);
        let aux = DMatrix::from_fn(grid.len(), 1, |j, _| -grid[j].powi(3) / 2.0);
        let ctx = BacktransformContext::new(grid.clone(), aux, &spec).unwrap();
        assert_eq!(ctx.branch_at(0, -1.0, &Nonlinearity::Sine).unwrap(), 0);
        assert_eq!(ctx.branch_at(0, 1.9, &Nonlinearity::Sine).unwrap(), -1);
    }

    #[test]
    fn interval_bounds_resorted() {
        let spec = TransformSpec::new(vec![Nonlinearity::Square]);
        let ctx = ctx_const(&spec, &[-1.0]);
        let lo = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let hi = DMatrix::from_row_slice(1, 2, &[9.0, 0.0]);
        let (l, u) = backtransform_intervals(&lo, &hi, &[0.2], &ctx, &spec).unwrap();
        assert_eq!((l[(0, 0)], u[(0, 0)]), (-3.0, -1.0));
        let ctx = ctx_const(&spec, &[1.0]);
        let (l, u) = backtransform_intervals(&lo, &hi, &[0.2], &ctx, &spec).unwrap();
        assert_eq!((l[(0, 0)], u[(0, 0)]), (1.0, 3.0));
    }
}
