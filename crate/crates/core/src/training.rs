//! Hyperparameter optimization with Adam, a step scheduler and restart guards.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Hyperparameters;
use crate::model::GpModel;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optional failure checks beyond numeric errors, which always trigger a restart.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RestartGuards {
    /// Restart when the learned lengthscale falls below this value.
    pub min_lengthscale: Option<f64>,
    /// Restart when the standard deviation of the last `window` losses exceeds `max_std`.
    pub loss_window: Option<(usize, f64)>,
}

impl RestartGuards {
    /// Both extra checks with the thresholds used for the non-square nonlinearity experiment.
    pub fn strict() -> Self {
        RestartGuards { min_lengthscale: Some(0.1), loss_window: Some((40, 0.1)) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub scheduler_steps: usize,
    pub scheduler_factor: f64,
    pub max_restarts: usize,
    pub seed: u64,
    #[serde(default)]
    pub guards: RestartGuards,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::schedule(0.1, 200, 100, 0.5)
    }
}

impl TrainConfig {
    pub fn schedule(learning_rate: f64, iterations: usize, scheduler_steps: usize, scheduler_factor: f64) -> Self {
        TrainConfig {
            learning_rate,
            iterations,
            scheduler_steps,
            scheduler_factor,
            max_restarts: 10,
            seed: 0,
            guards: RestartGuards::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.scheduler_steps == 0 || self.scheduler_steps > self.iterations {
            return Err(Error::Config("scheduler steps must lie in 1..=iterations".into()));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return Err(Error::Config("scheduler factor must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate used at iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.learning_rate * self.scheduler_factor.powi((t / self.scheduler_steps) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Objective (log marginal likelihood or ELBO) before the step.
    pub lml: f64,
    pub lr: f64,
    pub lengthscale: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub hyperparameters: Hyperparameters,
    /// Trace of the accepted run.
    pub trace: Vec<TraceRow>,
    pub final_objective: f64,
    pub restarts: usize,
}

/// What a finished (or aborted) run looked like.
#[derive(Clone, Debug, Default)]
pub struct TrainDiagnostics {
    pub numeric_error: Option<String>,
    pub lengthscale: f64,
    /// Per-iteration training loss, the negated objective per observation.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GuardVerdict {
    Accept,
    Restart(String),
}

pub fn restart_guard(diag: &TrainDiagnostics, guards: &RestartGuards) -> GuardVerdict {
    if let Some(e) = &diag.numeric_error {
        return GuardVerdict::Restart(format!("numerical failure: {e}"));
    }
    if let Some(min) = guards.min_lengthscale {
        if diag.lengthscale < min {
            return GuardVerdict::Restart(format!("lengthscale {:.4} below {min}", diag.lengthscale));
        }
    }
    if let Some((window, max_std)) = guards.loss_window {
        if diag.losses.len() >= window && window > 1 {
            let tail = &diag.losses[diag.losses.len() - window..];
            let mean = tail.iter().sum::<f64>() / window as f64;
            let var = tail.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (window - 1) as f64;
            if var.sqrt() > max_std {
                return GuardVerdict::Restart(format!("loss std {:.4} over last {window} iterations", var.sqrt()));
            }
        }
    }
    GuardVerdict::Accept
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One descent step on `params` for the loss gradient `g`.
    fn step(&mut self, params: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * g[k];
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + ADAM_EPS);
        }
    }
}

enum RunResult {
    Done(Vec<f64>, Vec<TraceRow>, f64, TrainDiagnostics),
    Failed(TrainDiagnostics),
}

fn single_run(model: &mut GpModel, cfg: &TrainConfig, init: Vec<f64>) -> Result<RunResult> {
    model.reset_warm_start();
    let n_obs = model.n_obs() as f64;
    let n_hyper = model.n_hyper();
    let mut p = init;
    let mut adam = Adam::new(p.len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut diag = TrainDiagnostics::default();
    let lengthscale = |p: &[f64]| p[1].exp();
    for t in 0..cfg.iterations {
        diag.lengthscale = lengthscale(&p);
        let (value, grad) = match model.objective(&p, true) {
            Ok((v, Some(g))) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
            Ok(_) => {
                diag.numeric_error = Some(format!("non-finite objective or gradient at iteration {t}"));
                return Ok(RunResult::Failed(diag));
            }
            Err(e) if e.is_numerical() => {
                diag.numeric_error = Some(format!("iteration {t}: {e}"));
                return Ok(RunResult::Failed(diag));
            }
            Err(e) => return Err(e),
        };
        let lr = cfg.lr_at(t);
        trace.push(TraceRow { iter: t, lml: value, lr, lengthscale: diag.lengthscale });
        diag.losses.push(-value / n_obs);
        let loss_grad: Vec<f64> = grad.iter().map(|g| -g / n_obs).collect();
        adam.step(&mut p, &loss_grad, lr);
        let n_scaled = n_hyper - model.spec.n_tasks;
        if p[..n_hyper].iter().any(|v| !v.is_finite()) || p[..n_scaled].iter().any(|v| v.abs() > 50.0) {
            diag.numeric_error = Some(format!("hyperparameters diverged at iteration {t}"));
            return Ok(RunResult::Failed(diag));
        }
    }
    diag.lengthscale = lengthscale(&p);
    match model.objective(&p, false) {
        Ok((v, _)) if v.is_finite() => Ok(RunResult::Done(p, trace, v, diag)),
        Ok(_) => {
            diag.numeric_error = Some("non-finite final objective".into());
            Ok(RunResult::Failed(diag))
        }
        Err(e) if e.is_numerical() => {
            diag.numeric_error = Some(format!("final evaluation: {e}"));
            Ok(RunResult::Failed(diag))
        }
        Err(e) => Err(e),
    }
}

/// Maximizes the model's objective from a random start, restarting on failure.
pub fn train(model: &mut GpModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(model, cfg, None)
}

/// Like [`train`], with an optional explicit starting point for the first attempt.
pub fn train_from(model: &mut GpModel, cfg: &TrainConfig, start: Option<Vec<f64>>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start = start;
    let mut last_reason = String::new();
    for attempt in 0..=cfg.max_restarts {
        let init = match start.take() {
            Some(p) if p.len() == model.n_params() => p,
            _ => model.init_params(&mut rng),
        };
        let diag = match single_run(model, cfg, init)? {
            RunResult::Done(params, trace, final_objective, diag) => {
                match restart_guard(&diag, &cfg.guards) {
                    GuardVerdict::Accept => {
                        let hyperparameters = model.hyperparameters(&params)?;
                        return Ok(TrainOutcome { params, hyperparameters, trace, final_objective, restarts: attempt });
                    }
                    GuardVerdict::Restart(r) => {
                        last_reason = r;
                        continue;
                    }
                }
            }
            RunResult::Failed(diag) => diag,
        };
        if let GuardVerdict::Restart(r) = restart_guard(&diag, &cfg.guards) {
            last_reason = r;
        }
    }
    Err(Error::Training { restarts: cfg.max_restarts, reason: last_reason })
}

/// Writes a loss trace as CSV with columns `iter, lml, lr, lengthscale`.
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends a trace to an open writer, tagging each row.
pub fn append_trace<W: Write>(w: &mut csv::Writer<W>, tag: &str, trace: &[TraceRow]) -> Result<()> {
    for r in trace {
        w.write_record([tag.to_string(), r.iter.to_string(), r.lml.to_string(), r.lr.to_string(), r.lengthscale.to_string()])?;
    }
    Ok(())
}
