//! Experiment runner: configuration, the three-step constrained pipeline, metrics, replicate
//! orchestration and report emission.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{linspace, TaskedData};
use crate::datasets::{
    self, energy_estimate, pendulum_constraint, pendulum_states, pendulum_transform, read_pendulum_csv, ExperimentData,
    PendulumParams, ResidualFn,
};
use crate::error::{Error, Result};
use crate::figure::{render_svg, Curve, Panel};
use crate::model::{GpModel, InferenceMethod, ModelSpec, Prediction};
use crate::pose::{self, AnchorPoint};
use crate::training::{train, write_trace, RestartGuards, TraceRow, TrainConfig};
use crate::transform::{
    apply_transform_lenient, backtransform, backtransform_intervals, make_virtual_measurements, virtual_crossings,
    BacktransformContext, ClampStats, Nonlinearity, VirtualPolicy,
};

/// Which model a result belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Constrained,
    Unconstrained,
    /// Unconstrained GP on the Gram-lifted outputs (triangle only).
    TransformedUnconstrained,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Constrained => "GP-c",
            ModelKind::Unconstrained => "GP-u",
            ModelKind::TransformedUnconstrained => "GP-tr",
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            ModelKind::Constrained => "constrained",
            ModelKind::Unconstrained => "unconstrained",
            ModelKind::TransformedUnconstrained => "transformed-unconstrained",
        }
    }

    fn color(&self) -> &'static str {
        match self {
            ModelKind::Constrained => "#1f77b4",
            ModelKind::Unconstrained => "#d62728",
            ModelKind::TransformedUnconstrained => "#2ca02c",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constrained" | "gp-c" => Ok(ModelKind::Constrained),
            "unconstrained" | "gp-u" => Ok(ModelKind::Unconstrained),
            "transformed-unconstrained" | "gp-tr" => Ok(ModelKind::TransformedUnconstrained),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Restart-guard selection: `auto` enables the strict checks for the constrained logsin model only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GuardMode {
    #[default]
    Auto,
    On,
    Off,
}

fn default_model() -> String {
    "constrained".into()
}
fn default_inference() -> String {
    "laplace".into()
}
fn default_one() -> usize {
    1
}
fn default_restarts() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_aux_grid() -> usize {
    500
}
fn default_segment() -> usize {
    200
}
fn default_dp_train() -> usize {
    15
}

/// Flat key-value experiment configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One of `ho`, `dho`, `ff`, `logsin`, `triangle`, `dp`.
    pub experiment: String,
    /// Model name, or a comma-separated list of models sharing each replicate's data.
    #[serde(default = "default_model")]
    pub model: String,
    /// Inference for the constrained model: `exact`, `laplace` or `vi`.
    #[serde(default = "default_inference")]
    pub inference: String,
    pub noise_sigma_n: Option<f64>,
    #[serde(default)]
    pub drop_prob_fd: f64,
    #[serde(default = "default_one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    pub learning_rate: Option<f64>,
    pub iterations: Option<usize>,
    pub scheduler_steps: Option<usize>,
    pub scheduler_factor: Option<f64>,
    #[serde(default = "default_restarts")]
    pub max_restarts: usize,
    #[serde(default)]
    pub guards: GuardMode,
    #[serde(default = "default_true")]
    pub virtual_measurements: bool,
    /// Overrides whether auxiliary copies are learned jointly with the constrained outputs.
    pub relearn_aux: Option<bool>,
    /// Points of the dense grid carrying the auxiliary means.
    #[serde(default = "default_aux_grid")]
    pub aux_grid_points: usize,
    pub energy: Option<f64>,
    pub mass: Option<f64>,
    pub omega0: Option<f64>,
    pub damping: Option<f64>,
    pub frame_rate: Option<f64>,
    pub mass_ratio: Option<f64>,
    pub dp_unit_to_meter: Option<f64>,
    pub dp_flip_y: Option<bool>,
    #[serde(default = "default_segment")]
    pub dp_segment_len: usize,
    #[serde(default = "default_dp_train")]
    pub dp_train_points: usize,
    pub dp_csv: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub figures: bool,
    #[serde(default)]
    pub trace: bool,
    /// Worker threads for replicates; 0 uses all cores.
    #[serde(default)]
    pub workers: usize,
}

impl ExperimentConfig {
    /// Defaults for an experiment with the given models.
    pub fn new(experiment: &str, model: &str) -> Self {
        ExperimentConfig {
            experiment: experiment.into(),
            model: model.into(),
            inference: default_inference(),
            noise_sigma_n: None,
            drop_prob_fd: 0.0,
            replicates: 1,
            seed: 0,
            learning_rate: None,
            iterations: None,
            scheduler_steps: None,
            scheduler_factor: None,
            max_restarts: default_restarts(),
            guards: GuardMode::Auto,
            virtual_measurements: true,
            relearn_aux: None,
            aux_grid_points: default_aux_grid(),
            energy: None,
            mass: None,
            omega0: None,
            damping: None,
            frame_rate: None,
            mass_ratio: None,
            dp_unit_to_meter: None,
            dp_flip_y: None,
            dp_segment_len: default_segment(),
            dp_train_points: default_dp_train(),
            dp_csv: None,
            out_dir: None,
            figures: false,
            trace: false,
            workers: 0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn models(&self) -> Result<Vec<ModelKind>> {
        let mut out: Vec<ModelKind> = self.model.split(',').map(str::parse).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn inference_method(&self) -> Result<InferenceMethod> {
        self.inference.parse()
    }

    pub fn validate(&self) -> Result<()> {
        const EXPERIMENTS: [&str; 6] = ["ho", "dho", "ff", "logsin", "triangle", "dp"];
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return Err(Error::Config(format!("unknown experiment '{}'", self.experiment)));
        }
        let models = self.models()?;
        if models.is_empty() {
            return Err(Error::Config("no model selected".into()));
        }
        if models.contains(&ModelKind::TransformedUnconstrained) && self.experiment != "triangle" {
            return Err(Error::Config("transformed-unconstrained is only defined for the triangle experiment".into()));
        }
        self.inference_method()?;
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be positive".into()));
        }
        if self.experiment == "dp" && self.dp_csv.is_none() {
            return Err(Error::Config("the dp experiment requires dp_csv".into()));
        }
        if self.experiment == "dp" && (self.dp_train_points == 0 || self.dp_train_points >= self.dp_segment_len) {
            return Err(Error::Config("dp_train_points must lie in 1..dp_segment_len".into()));
        }
        if self.aux_grid_points < 2 {
            return Err(Error::Config("aux_grid_points must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.drop_prob_fd) {
            return Err(Error::Config("drop_prob_fd must lie in [0, 1)".into()));
        }
        for kind in &models {
            self.train_config(*kind, 0)?.validate()?;
        }
        Ok(())
    }

    pub fn noise(&self) -> f64 {
        self.noise_sigma_n.unwrap_or(match self.experiment.as_str() {
            "ff" => 0.05,
            "triangle" => 1e-4,
            "dp" => 0.0,
            _ => 0.1,
        })
    }

    /// Training schedule for one model, with the experiment's defaults.
    pub fn train_config(&self, kind: ModelKind, seed: u64) -> Result<TrainConfig> {
        let (lr, iters, steps, factor) = match (self.experiment.as_str(), kind) {
            ("triangle", _) => (0.1, 2000, 800, 0.2),
            ("dp", ModelKind::Constrained) => (0.1, 2000, 800, 0.2),
            ("dp", _) => (0.1, 2000, 500, 0.5),
            _ => (0.1, 200, 100, 0.5),
        };
        let mut cfg = TrainConfig::schedule(
            self.learning_rate.unwrap_or(lr),
            self.iterations.unwrap_or(iters),
            self.scheduler_steps.unwrap_or(steps),
            self.scheduler_factor.unwrap_or(factor),
        )
        .with_seed(seed);
        cfg.max_restarts = self.max_restarts;
        let strict = match self.guards {
            GuardMode::On => true,
            GuardMode::Off => false,
            GuardMode::Auto => self.experiment == "logsin" && kind == ModelKind::Constrained,
        };
        if strict {
            cfg.guards = RestartGuards::strict();
        }
        Ok(cfg)
    }

    pub fn hash_hex(&self) -> String {
        let mut h = DefaultHasher::new();
        toml::to_string(self).unwrap_or_default().hash(&mut h);
        format!("{:016x}", h.finish())
    }
}

/// Seed of an independent stream for `(replicate, stage)`.
pub fn derive_seed(base: u64, replicate: usize, stage: u64) -> u64 {
    let mut z = base
        .wrapping_add((replicate as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stage.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RMSE over all tasks and test points, and the mean absolute constraint violation.
pub fn compute_metrics(pred: &DMatrix<f64>, truth: &DMatrix<f64>, xs: &[f64], residual: &ResidualFn) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() || pred.nrows() != xs.len() {
        return Err(Error::input(format!(
            "prediction is {}x{}, truth is {}x{}, grid has {} points",
            pred.nrows(),
            pred.ncols(),
            truth.nrows(),
            truth.ncols(),
            xs.len()
        )));
    }
    let n = pred.len() as f64;
    let rmse = ((pred - truth).norm_squared() / n).sqrt();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &x) in xs.iter().enumerate() {
        let row: Vec<f64> = pred.row(i).iter().copied().collect();
        for r in residual(x, &row) {
            total += r.abs();
            count += 1;
        }
    }
    Ok((rmse, if count == 0 { 0.0 } else { total / count as f64 }))
}

/// Original-space predictions of one model on the test grid.
#[derive(Clone, Debug)]
pub struct ModelPrediction {
    pub kind: ModelKind,
    pub mean: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelResult {
    pub kind: ModelKind,
    pub rmse: f64,
    pub delta_c: f64,
    pub restarts: usize,
    pub clamps: ClampStats,
    pub n_virtual: usize,
    /// Transformed observations dropped for lying outside a transform's domain.
    pub dropped: usize,
    pub trace: Vec<TraceRow>,
    pub prediction: ModelPrediction,
}

#[derive(Clone, Debug)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub data_seed: u64,
    pub results: Vec<(ModelKind, std::result::Result<ModelResult, String>)>,
    pub data: Option<ExperimentData>,
    /// `(x, original task, value)` of the virtual measurements used by the constrained model.
    pub virtuals: Vec<(f64, usize, f64)>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub model: String,
    pub n: usize,
    pub failed: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub delta_c_mean: f64,
    pub delta_c_std: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub replicates: Vec<ReplicateOutcome>,
    pub seconds: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

impl Report {
    pub fn results_for(&self, kind: ModelKind) -> Vec<&ModelResult> {
        self.replicates
            .iter()
            .flat_map(|r| r.results.iter())
            .filter(|(k, _)| *k == kind)
            .filter_map(|(_, r)| r.as_ref().ok())
            .collect()
    }

    pub fn aggregate(&self, kind: ModelKind) -> Aggregate {
        let ok = self.results_for(kind);
        let failed = self
            .replicates
            .iter()
            .flat_map(|r| r.results.iter())
            .filter(|(k, r)| *k == kind && r.is_err())
            .count();
        let (rm, rs) = mean_std(&ok.iter().map(|r| r.rmse).collect::<Vec<_>>());
        let (dm, ds) = mean_std(&ok.iter().map(|r| r.delta_c).collect::<Vec<_>>());
        Aggregate { model: kind.key().into(), n: ok.len(), failed, rmse_mean: rm, rmse_std: rs, delta_c_mean: dm, delta_c_std: ds }
    }

    pub fn models(&self) -> Vec<ModelKind> {
        self.config.models().unwrap_or_default()
    }
}

/// Trained GP together with the parameters it was trained to.
struct Fitted {
    model: GpModel,
    params: Vec<f64>,
    restarts: usize,
    trace: Vec<TraceRow>,
}

fn fit(spec: ModelSpec, data: TaskedData, cfg: &TrainConfig) -> Result<Fitted> {
    let mut model = GpModel::new(spec, data)?;
    let out = train(&mut model, cfg)?;
    Ok(Fitted { model, params: out.params, restarts: out.restarts, trace: out.trace })
}

fn column_vec(xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(xs.len(), 1, xs)
}

fn band(p: &Prediction) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = p.std();
    (&p.mean - &s * 2.0, &p.mean + &s * 2.0)
}

fn effective_inference(requested: InferenceMethod, liks: &[Nonlinearity]) -> InferenceMethod {
    // Laplace with Gaussian likelihoods is exact GP regression
    if requested == InferenceMethod::Laplace && liks.iter().all(Nonlinearity::is_identity) {
        InferenceMethod::Exact
    } else {
        requested
    }
}

fn unconstrained_spec(n_tasks: usize) -> ModelSpec {
    ModelSpec::gaussian(n_tasks)
}

/// Steps 2 and 3 of the constrained pipeline for per-task transformations.
#[allow(clippy::too_many_arguments)]
fn run_transformed(
    data: &ExperimentData,
    aux: &Fitted,
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    grid: &[f64],
    virtuals_out: &mut Vec<(f64, usize, f64)>,
) -> Result<ModelResult> {
    let mut transform = data.transform.clone();
    if let Some(r) = cfg.relearn_aux {
        transform.relearn_aux_jointly = r;
    }
    if !cfg.virtual_measurements {
        transform.virtual_policy = VirtualPolicy::Off;
    }
    let aux_pred = aux.model.predict(&aux.params, &column_vec(grid), false)?;
    if let Some(t) = transform.nonlinearities.iter().position(|nl| matches!(nl, Nonlinearity::Sine)) {
        transform.initial_branch = Nonlinearity::Sine.branch_of(aux_pred.mean[(0, t)]);
    }
    let ctx = BacktransformContext::new(grid.to_vec(), aux_pred.mean.clone(), &transform)?;
    let crossings = virtual_crossings(&ctx, &transform);
    let virtuals = make_virtual_measurements(&crossings, &transform);
    for (t, list) in crossings.iter().enumerate() {
        for c in list {
            virtuals_out.push((c.x, t, c.level));
        }
    }
    let (mut tdata, dropped) = apply_transform_lenient(&data.train, &transform)?;
    for v in &virtuals {
        tdata.push_virtual(&[v.x], v.column, v.value)?;
    }
    let liks = transform.column_nonlinearities();
    let inference = effective_inference(cfg.inference_method()?, &liks);
    if inference == InferenceMethod::Exact && liks.iter().any(|l| !l.is_identity()) {
        return Err(Error::Config("exact inference cannot handle transformed likelihoods; use laplace or vi".into()));
    }
    let nt = transform.n_transformed();
    let spec = ModelSpec { n_tasks: nt, rank: nt, constraint: Some(data.constraint.clone()), likelihoods: liks, inference };
    let fitted = fit(spec, tdata, train_cfg)?;
    let pred = fitted.model.predict(&fitted.params, &column_vec(&data.test_x), false)?;
    let (lo, hi) = band(&pred);
    let (mean, clamps) = backtransform(&pred.mean, &data.test_x, &ctx, &transform)?;
    let (lower, upper) = backtransform_intervals(&lo, &hi, &data.test_x, &ctx, &transform)?;
    let (rmse, delta_c) = compute_metrics(&mean, &data.truth_test, &data.test_x, &data.residual)?;
    Ok(ModelResult {
        kind: ModelKind::Constrained,
        rmse,
        delta_c,
        restarts: fitted.restarts,
        clamps,
        n_virtual: virtuals.len(),
        dropped,
        trace: fitted.trace,
        prediction: ModelPrediction { kind: ModelKind::Constrained, mean, lower, upper },
    })
}

/// Gram-lifted triangle model, with or without the length constraints.
fn run_gram(data: &ExperimentData, cfg: &ExperimentConfig, train_cfg: &TrainConfig, constrained: bool) -> Result<ModelResult> {
    let anchor = AnchorPoint::default();
    let lifted = pose::lift_dataset(&data.train, &anchor)?;
    // Gram entries differ in level and spread by an order of magnitude; fit them standardized.
    let (scaled, offset, scale) = lifted.standardized();
    let mut spec = ModelSpec::gaussian(pose::GRAM_LEN);
    if constrained {
        spec.constraint = Some(data.constraint.reparametrized(&offset, &scale)?);
        spec.inference = effective_inference(cfg.inference_method()?, &spec.likelihoods);
    }
    let kind = if constrained { ModelKind::Constrained } else { ModelKind::TransformedUnconstrained };
    let fitted = fit(spec, scaled, train_cfg)?;
    let pred = fitted.model.predict(&fitted.params, &column_vec(&data.test_x), false)?;
    let unscale = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |i, a| offset[a] + scale[a] * m[(i, a)]);
    let (lo, hi) = band(&pred);
    let (lo, hi) = (unscale(&lo), unscale(&hi));
    let pred = Prediction { mean: unscale(&pred.mean), ..pred };
    let orientation = pose::signed_area(&datasets::triangle_reference()).signum();
    let recover = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(m.nrows(), 6);
        let mut prev: Option<DMatrix<f64>> = None;
        for i in 0..m.nrows() {
            let q = m.row(i).transpose();
            let r = pose::recover_coordinates(&q, &anchor, Some(orientation), prev.as_ref())?;
            for c in 0..3 {
                out[(i, 2 * c)] = r.coords[(0, c)];
                out[(i, 2 * c + 1)] = r.coords[(1, c)];
            }
            prev = Some(r.coords);
        }
        Ok(out)
    };
    let mean = recover(&pred.mean)?;
    let (a, b) = (recover(&lo)?, recover(&hi)?);
    let lower = a.zip_map(&b, f64::min);
    let upper = a.zip_map(&b, f64::max);
    let (rmse, delta_c) = compute_metrics(&mean, &data.truth_test, &data.test_x, &data.residual)?;
    Ok(ModelResult {
        kind,
        rmse,
        delta_c,
        restarts: fitted.restarts,
        clamps: ClampStats::default(),
        n_virtual: 0,
        dropped: 0,
        trace: fitted.trace,
        prediction: ModelPrediction { kind, mean, lower, upper },
    })
}

fn aux_grid(data: &ExperimentData, n: usize) -> Vec<f64> {
    let xs = data.train.inputs.column(0);
    let lo = xs.min().min(data.test_x.iter().cloned().fold(f64::INFINITY, f64::min));
    let hi = xs.max().max(data.test_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    linspace(lo, hi, n)
}

/// Runs every requested model on one data set.
pub fn run_on_data(data: &ExperimentData, cfg: &ExperimentConfig, replicate: usize) -> Result<ReplicateOutcome> {
    let start = Instant::now();
    let models = cfg.models()?;
    let mut results = Vec::new();
    let mut virtuals = Vec::new();
    let seed = |stage: u64| derive_seed(cfg.seed, replicate, stage);
    let needs_aux = models.contains(&ModelKind::Unconstrained)
        || (models.contains(&ModelKind::Constrained) && data.name != "triangle");
    let aux = if needs_aux {
        let tc = cfg.train_config(ModelKind::Unconstrained, seed(1))?;
        Some(fit(unconstrained_spec(data.train.n_tasks()), data.train.clone(), &tc).map_err(|e| e.to_string()))
    } else {
        None
    };
    for kind in &models {
        let res: std::result::Result<ModelResult, String> = match kind {
            ModelKind::Unconstrained => match aux.as_ref().expect("aux fitted") {
                Ok(f) => unconstrained_result(f, data).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            },
            ModelKind::Constrained if data.name == "triangle" => {
                let tc = cfg.train_config(*kind, seed(2))?;
                run_gram(data, cfg, &tc, true).map_err(|e| e.to_string())
            }
            ModelKind::Constrained => match aux.as_ref().expect("aux fitted") {
                Ok(f) => {
                    let tc = cfg.train_config(*kind, seed(2))?;
                    let grid = aux_grid(data, cfg.aux_grid_points);
                    run_transformed(data, f, cfg, &tc, &grid, &mut virtuals).map_err(|e| e.to_string())
                }
                Err(e) => Err(format!("auxiliary GP failed: {e}")),
            },
            ModelKind::TransformedUnconstrained => {
                let tc = cfg.train_config(*kind, seed(3))?;
                run_gram(data, cfg, &tc, false).map_err(|e| e.to_string())
            }
        };
        results.push((*kind, res));
    }
    Ok(ReplicateOutcome {
        replicate,
        data_seed: seed(0),
        results,
        data: Some(data.clone()),
        virtuals,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn unconstrained_result(f: &Fitted, data: &ExperimentData) -> Result<ModelResult> {
    let pred = f.model.predict(&f.params, &column_vec(&data.test_x), false)?;
    let (lower, upper) = band(&pred);
    let (rmse, delta_c) = compute_metrics(&pred.mean, &data.truth_test, &data.test_x, &data.residual)?;
    Ok(ModelResult {
        kind: ModelKind::Unconstrained,
        rmse,
        delta_c,
        restarts: f.restarts,
        clamps: ClampStats::default(),
        n_virtual: 0,
        dropped: 0,
        trace: f.trace.clone(),
        prediction: ModelPrediction { kind: ModelKind::Unconstrained, mean: pred.mean, lower, upper },
    })
}

/// Loaded double-pendulum recordings, as scaled states.
struct PendulumPool {
    recordings: Vec<TaskedData>,
    params: PendulumParams,
}

impl PendulumPool {
    fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let path = cfg.dp_csv.as_ref().ok_or_else(|| Error::Config("dp_csv not set".into()))?;
        let mut files: Vec<PathBuf> = if path.is_dir() {
            std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect()
        } else {
            vec![path.clone()]
        };
        files.sort();
        if files.is_empty() {
            return Err(Error::Input(format!("no CSV recordings found in {}", path.display())));
        }
        let mut params = PendulumParams::default();
        if let Some(r) = cfg.frame_rate {
            params.frame_rate = r;
        }
        if let Some(r) = cfg.mass_ratio {
            params.mass_ratio = r;
        }
        if let Some(u) = cfg.dp_unit_to_meter {
            params.unit_to_meter = u;
        }
        if let Some(f) = cfg.dp_flip_y {
            params.flip_y = f;
        }
        let recordings = files
            .iter()
            .map(|f| pendulum_states(&read_pendulum_csv(f)?, &params))
            .collect::<Result<Vec<_>>>()?;
        Ok(PendulumPool { recordings, params })
    }

    /// Random segment from the second half of a random recording, split into train and test.
    fn sample(&self, cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentData> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = &self.recordings[rng.random_range(0..self.recordings.len())];
        let n = rec.n_points();
        let len = cfg.dp_segment_len;
        let lo = n / 2;
        if n < len || lo > n - len {
            return Err(Error::Input(format!("recording of {n} frames is too short for segments of {len}")));
        }
        let start = rng.random_range(lo..=n - len);
        let seg = rec.select_points(&(start..start + len).collect::<Vec<_>>());
        let mut train_idx = sample(&mut rng, len, cfg.dp_train_points).into_vec();
        train_idx.sort_unstable();
        let test_idx: Vec<usize> = (0..len).filter(|i| !train_idx.contains(i)).collect();
        let train = seg.select_points(&train_idx);
        let test = seg.select_points(&test_idx);
        let coeffs = self.params.energy_coefficients();
        let nls = PendulumParams::nonlinearities();
        let e_train = energy_estimate(&train, &coeffs, &nls)?;
        let e_all = energy_estimate(&seg, &coeffs, &nls)?;
        let residual: ResidualFn = Arc::new(move |_, f| {
            let s: f64 = coeffs.iter().zip(&nls).zip(f).map(|((a, nl), v)| a * nl.forward(*v).unwrap_or(f64::NAN)).sum();
            vec![s - e_all]
        });
        Ok(ExperimentData {
            name: "dp".into(),
            truth_train: train.values.clone(),
            test_x: test.inputs.column(0).iter().copied().collect(),
            truth_test: test.values.clone(),
            train,
            transform: pendulum_transform(),
            constraint: pendulum_constraint(&self.params, e_train)?,
            residual,
            mask_redraws: 0,
        })
    }
}

/// Synthetic data for one replicate with the configured overrides.
pub fn generate_for(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentData> {
    let noise = cfg.noise();
    let drop = cfg.drop_prob_fd;
    match cfg.experiment.as_str() {
        "ho" | "dho" => {
            let base = if cfg.experiment == "dho" { datasets::OscillatorParams::damped() } else { Default::default() };
            let p = datasets::OscillatorParams {
                energy: cfg.energy.unwrap_or(base.energy),
                mass: cfg.mass.unwrap_or(base.mass),
                omega0: cfg.omega0.unwrap_or(base.omega0),
                damping: cfg.damping.unwrap_or(base.damping),
                noise_sigma_n: noise,
                drop_prob_fd: drop,
                ..base
            };
            datasets::gen_harmonic_oscillator(&p, seed)
        }
        "ff" => {
            let base = datasets::FreeFallParams::default();
            let p = datasets::FreeFallParams {
                energy: cfg.energy.unwrap_or(base.energy),
                mass: cfg.mass.unwrap_or(base.mass),
                noise_sigma_n: noise,
                drop_prob_fd: drop,
                ..base
            };
            datasets::gen_free_fall(&p, seed)
        }
        other => datasets::generate(other, noise, drop, seed),
    }
}

/// Runs all replicates of an experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = if cfg.experiment == "dp" { Some(PendulumPool::load(cfg)?) } else { None };
    let sink: Mutex<Vec<ReplicateOutcome>> = Mutex::new(Vec::with_capacity(cfg.replicates));
    let job = |rep: usize| -> Result<()> {
        let seed = derive_seed(cfg.seed, rep, 0);
        let data = match &pool {
            Some(p) => p.sample(cfg, seed)?,
            None => generate_for(cfg, seed)?,
        };
        let outcome = run_on_data(&data, cfg, rep)?;
        sink.lock().expect("report sink").push(outcome);
        Ok(())
    };
    let results: Vec<Result<()>> = if cfg.workers == 1 {
        (0..cfg.replicates).map(job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| (0..cfg.replicates).into_par_iter().map(job).collect())
    };
    for r in results {
        r?;
    }
    let mut replicates = sink.into_inner().expect("report sink");
    replicates.sort_by_key(|r| r.replicate);
    Ok(Report { config: cfg.clone(), config_hash: cfg.hash_hex(), replicates, seconds: start.elapsed().as_secs_f64() })
}

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else {
        String::new()
    }
}

/// Writes `report.csv`, `table.md`, per-replicate figures and (optionally) traces into `dir`.
pub fn emit_outputs(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    let csv_path = dir.join("report.csv");
    write_report_csv(report, &csv_path)?;
    written.push(csv_path);
    let md_path = dir.join("table.md");
    std::fs::write(&md_path, table_markdown(report)).map_err(|e| Error::Input(format!("{}: {e}", md_path.display())))?;
    written.push(md_path);
    if report.config.figures {
        for rep in &report.replicates {
            if let Some(svg) = replicate_figure(rep) {
                let p = dir.join(format!("figure_{}.svg", rep.replicate));
                std::fs::write(&p, svg).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
                written.push(p);
            }
        }
    }
    if report.config.trace {
        for rep in &report.replicates {
            for (kind, r) in &rep.results {
                if let Ok(m) = r {
                    let p = dir.join(format!("trace_{}_{}.csv", rep.replicate, kind.key()));
                    write_trace(&p, &m.trace)?;
                    written.push(p);
                }
            }
        }
    }
    Ok(written)
}

pub const REPORT_HEADER: [&str; 13] = [
    "kind", "model", "replicate", "seed", "n", "failed", "rmse", "rmse_std", "delta_c", "delta_c_std", "restarts", "n_virtual",
    "status",
];

pub fn write_report_csv(report: &Report, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    w.write_record(REPORT_HEADER)?;
    for rep in &report.replicates {
        for (kind, r) in &rep.results {
            let rec = match r {
                Ok(m) => vec![
                    "replicate".into(),
                    kind.key().into(),
                    rep.replicate.to_string(),
                    rep.data_seed.to_string(),
                    "1".into(),
                    "0".into(),
                    fmt_opt(m.rmse),
                    String::new(),
                    fmt_opt(m.delta_c),
                    String::new(),
                    m.restarts.to_string(),
                    m.n_virtual.to_string(),
                    "ok".into(),
                ],
                Err(e) => vec![
                    "replicate".into(),
                    kind.key().into(),
                    rep.replicate.to_string(),
                    rep.data_seed.to_string(),
                    "0".into(),
                    "1".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    format!("failed: {e}"),
                ],
            };
            w.write_record(&rec)?;
        }
    }
    if !report.replicates.is_empty() {
        for kind in report.models() {
            let a = report.aggregate(kind);
            w.write_record([
                "aggregate".to_string(),
                a.model.clone(),
                String::new(),
                String::new(),
                a.n.to_string(),
                a.failed.to_string(),
                fmt_opt(a.rmse_mean),
                fmt_opt(a.rmse_std),
                fmt_opt(a.delta_c_mean),
                fmt_opt(a.delta_c_std),
                String::new(),
                String::new(),
                format!("config={} runtime_s={:.1}", report.config_hash, report.seconds),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Paper-style table fragment with `mean ± std` in units of `10^-k`.
pub fn table_markdown(report: &Report) -> String {
    let models = report.models();
    let aggs: Vec<Aggregate> = models.iter().map(|k| report.aggregate(*k)).collect();
    let scale_of = |vals: &[f64]| -> i32 {
        let m = vals.iter().cloned().filter(|v| v.is_finite() && *v > 0.0).fold(0.0, f64::max);
        if m == 0.0 {
            0
        } else {
            -(m.log10().floor() as i32)
        }
    };
    let mut s = format!(
        "Experiment `{}`, sigma_n = {}, f_d = {}, inference = {}\n\n|  | {} |  |\n|---|{}---|\n",
        report.config.experiment,
        report.config.noise(),
        report.config.drop_prob_fd,
        report.config.inference,
        models.iter().map(|m| m.label()).collect::<Vec<_>>().join(" | "),
        "---|".repeat(models.len())
    );
    for (name, pick) in [("RMSE", 0usize), ("\\|ΔC\\|", 1)] {
        let means: Vec<f64> = aggs.iter().map(|a| if pick == 0 { a.rmse_mean } else { a.delta_c_mean }).collect();
        let k = scale_of(&means);
        let f = 10f64.powi(k);
        let cells: Vec<String> = aggs
            .iter()
            .map(|a| {
                let (m, sd) = if pick == 0 { (a.rmse_mean, a.rmse_std) } else { (a.delta_c_mean, a.delta_c_std) };
                format!("{:.1} ± {:.1} (n={})", m * f, sd * f, a.n)
            })
            .collect();
        s.push_str(&format!("| {name} | {} | (e-{k}) |\n", cells.join(" | ")));
    }
    s
}

fn replicate_figure(rep: &ReplicateOutcome) -> Option<String> {
    let data = rep.data.as_ref()?;
    let ok: Vec<&ModelResult> = rep.results.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
    if ok.is_empty() {
        return None;
    }
    let panels: Vec<Panel> = (0..data.train.n_tasks())
        .map(|t| Panel {
            title: data.train.task_names[t].clone(),
            x: data.test_x.clone(),
            truth: data.truth_test.column(t).iter().copied().collect(),
            curves: ok
                .iter()
                .map(|m| Curve {
                    label: m.kind.label().into(),
                    color: m.kind.color().into(),
                    mean: m.prediction.mean.column(t).iter().copied().collect(),
                    lower: m.prediction.lower.column(t).iter().copied().collect(),
                    upper: m.prediction.upper.column(t).iter().copied().collect(),
                })
                .collect(),
            data: (0..data.train.n_points())
                .filter(|&i| data.train.observed[(i, t)])
                .map(|i| (data.train.inputs[(i, 0)], data.train.values[(i, t)]))
                .collect(),
            virtuals: rep.virtuals.iter().filter(|v| v.1 == t).map(|v| (v.0, v.2)).collect(),
        })
        .collect();
    Some(render_svg(&panels))
}

/// Parses a sweep grid such as `sigma=0.05,0.1;fd=0,0.2`.
pub fn parse_grid(spec: &str) -> Result<Vec<(f64, f64)>> {
    let mut sigmas = vec![];
    let mut fds = vec![0.0];
    for part in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::Config(format!("malformed grid entry '{part}'")))?;
        let vals = v
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Config(format!("'{x}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        match k.trim() {
            "sigma" | "noise" => sigmas = vals,
            "fd" | "drop" => fds = vals,
            other => return Err(Error::Config(format!("unknown grid key '{other}'"))),
        }
    }
    if sigmas.is_empty() {
        return Err(Error::Config("grid needs at least one sigma value".into()));
    }
    Ok(fds.iter().flat_map(|&fd| sigmas.iter().map(move |&s| (s, fd))).collect())
}
