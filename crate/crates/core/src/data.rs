//! Multitask observation container.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Observations of `N_f` tasks at `N` input points, with per-entry missing and virtual flags.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskedData {
    /// `N × D` input matrix, one point per row.
    pub inputs: DMatrix<f64>,
    /// `N × N_f` values; entries with `observed == false` carry no meaning.
    pub values: DMatrix<f64>,
    pub observed: DMatrix<bool>,
    /// Entries added as virtual measurements rather than measured.
    pub virtual_obs: DMatrix<bool>,
    pub task_names: Vec<String>,
}

impl TaskedData {
    /// Fully observed data set.
    pub fn complete(inputs: DMatrix<f64>, values: DMatrix<f64>) -> Result<Self> {
        let observed = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(inputs, values, observed)
    }

    pub fn new(inputs: DMatrix<f64>, values: DMatrix<f64>, observed: DMatrix<bool>) -> Result<Self> {
        if inputs.nrows() != values.nrows() || values.shape() != observed.shape() {
            return Err(Error::input(format!(
                "inputs have {} rows, values are {}x{}, mask is {}x{}",
                inputs.nrows(),
                values.nrows(),
                values.ncols(),
                observed.nrows(),
                observed.ncols()
            )));
        }
        let (n, nf) = values.shape();
        for i in 0..n {
            for a in 0..nf {
                if observed[(i, a)] && !values[(i, a)].is_finite() {
                    return Err(Error::input(format!("non-finite observation at point {i}, task {a}")));
                }
            }
        }
        let task_names = (1..=nf).map(|a| format!("y{a}")).collect();
        Ok(TaskedData {
            inputs,
            values,
            observed,
            virtual_obs: DMatrix::from_element(n, nf, false),
            task_names,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        if names.len() == self.n_tasks() {
            self.task_names = names;
        }
        self
    }

    pub fn n_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.values.ncols()
    }

    /// Number of observed entries.
    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// Per-task affine standardization `y = offset + scale · u` from the observed entries.
    ///
    /// Tasks with a single distinct observed value keep scale 1.
    pub fn standardized(&self) -> (TaskedData, DVector<f64>, DVector<f64>) {
        let (n, nf) = self.values.shape();
        let mut offset = DVector::zeros(nf);
        let mut scale = DVector::from_element(nf, 1.0);
        for a in 0..nf {
            let vals: Vec<f64> = (0..n).filter(|&i| self.observed[(i, a)]).map(|i| self.values[(i, a)]).collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            offset[a] = m;
            if sd > 1e-12 * (1.0 + m.abs()) {
                scale[a] = sd;
            }
        }
        let mut out = self.clone();
        for i in 0..n {
            for a in 0..nf {
                out.values[(i, a)] = (self.values[(i, a)] - offset[a]) / scale[a];
            }
        }
        (out, offset, scale)
    }

    /// Observation mask flattened point-major.
    pub fn observed_flat(&self) -> Vec<bool> {
        self.observed.transpose().iter().copied().collect()
    }

    /// Virtual flags of the observed entries, in flattened point-major order.
    pub fn virtual_flat_observed(&self) -> Vec<bool> {
        let (n, nf) = self.values.shape();
        let mut out = Vec::new();
        for i in 0..n {
            for a in 0..nf {
                if self.observed[(i, a)] {
                    out.push(self.virtual_obs[(i, a)]);
                }
            }
        }
        out
    }

    /// Observed values flattened point-major.
    pub fn observed_values(&self) -> DVector<f64> {
        let (n, nf) = self.values.shape();
        let mut out = Vec::with_capacity(n * nf);
        for i in 0..n {
            for a in 0..nf {
                if self.observed[(i, a)] {
                    out.push(self.values[(i, a)]);
                }
            }
        }
        DVector::from_vec(out)
    }

    /// Task index of every observed entry, in flattened point-major order.
    pub fn observed_tasks(&self) -> Vec<usize> {
        let (n, nf) = self.values.shape();
        let mut out = Vec::new();
        for i in 0..n {
            for a in 0..nf {
                if self.observed[(i, a)] {
                    out.push(a);
                }
            }
        }
        out
    }

    /// Keeps the listed task columns in the given order.
    pub fn select_tasks(&self, tasks: &[usize]) -> TaskedData {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), tasks.len(), |i, k| m[(i, tasks[k])]);
        let pickb = |m: &DMatrix<bool>| DMatrix::from_fn(m.nrows(), tasks.len(), |i, k| m[(i, tasks[k])]);
        TaskedData {
            inputs: self.inputs.clone(),
            values: pick(&self.values),
            observed: pickb(&self.observed),
            virtual_obs: pickb(&self.virtual_obs),
            task_names: tasks.iter().map(|&t| self.task_names[t].clone()).collect(),
        }
    }

    /// Drops points at which no task is observed.
    pub fn drop_empty_points(&self) -> TaskedData {
        let keep: Vec<usize> = (0..self.n_points())
            .filter(|&i| self.observed.row(i).iter().any(|&o| o))
            .collect();
        self.select_points(&keep)
    }

    pub fn select_points(&self, rows: &[usize]) -> TaskedData {
        TaskedData {
            inputs: self.inputs.select_rows(rows),
            values: self.values.select_rows(rows),
            observed: DMatrix::from_fn(rows.len(), self.n_tasks(), |i, a| self.observed[(rows[i], a)]),
            virtual_obs: DMatrix::from_fn(rows.len(), self.n_tasks(), |i, a| self.virtual_obs[(rows[i], a)]),
            task_names: self.task_names.clone(),
        }
    }

    /// Appends a point where only `task` is observed, flagged as virtual.
    pub fn push_virtual(&mut self, x: &[f64], task: usize, value: f64) -> Result<()> {
        if x.len() != self.inputs.ncols() || task >= self.n_tasks() {
            return Err(Error::input("virtual measurement does not match the data layout"));
        }
        let n = self.n_points();
        let nf = self.n_tasks();
        self.inputs = self.inputs.clone().insert_row(n, 0.0);
        for (d, v) in x.iter().enumerate() {
            self.inputs[(n, d)] = *v;
        }
        self.values = self.values.clone().insert_row(n, 0.0);
        self.values[(n, task)] = value;
        let mut obs = DMatrix::from_element(n + 1, nf, false);
        obs.view_mut((0, 0), (n, nf)).copy_from(&self.observed);
        obs[(n, task)] = true;
        self.observed = obs;
        let mut virt = DMatrix::from_element(n + 1, nf, false);
        virt.view_mut((0, 0), (n, nf)).copy_from(&self.virtual_obs);
        virt[(n, task)] = true;
        self.virtual_obs = virt;
        Ok(())
    }
}

/// `n` evenly spaced values from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Column matrix from a slice of scalar inputs.
pub fn column(xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(xs.len(), 1, xs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_rows_are_flagged() {
        let mut d = TaskedData::complete(column(&[0.0, 1.0]), DMatrix::from_element(2, 2, 1.0)).unwrap();
        d.push_virtual(&[0.5], 1, 0.0).unwrap();
        assert_eq!(d.n_points(), 3);
        assert_eq!(d.n_observed(), 5);
        assert!(d.virtual_obs[(2, 1)] && !d.observed[(2, 0)]);
        assert_eq!(d.virtual_flat_observed(), vec![false, false, false, false, true]);
    }

    #[test]
    fn nan_observation_rejected() {
        let v = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(TaskedData::complete(column(&[0.0]), v).is_err());
    }

    #[test]
    fn linspace_endpoints() {
        let v = linspace(-0.1, 10.0, 100);
        assert_eq!(v.len(), 100);
        assert_eq!(v[0], -0.1);
        assert!((v[99] - 10.0).abs() < 1e-12);
    }
}
