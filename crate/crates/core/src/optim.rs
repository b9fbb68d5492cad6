//! Adam and the fitting drivers for the three model families.
//!
//! Every driver minimizes through the same loop: evaluate `(J, dJ/dtheta)`,
//! clip, take an Adam step. The loss history holds `J` at `theta_0 .. theta_n`,
//! so a zero-iteration run reports the initial loss alone.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{grad_face_velocities, grad_parameters, solve_adjoint, solve_adjoint_direct, DEFAULT_ADJOINT_TOL};
use crate::delay::{delay_embed, delay_loss_and_grad, DelayMapConfig, MapModel};
use crate::error::{invalid, Error, Result};
use crate::fvm::{assemble, check_on_grid, stationary_density, teleport, DirectSolver, StationaryMethod, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::measure::{Grid, Measure, ObjectiveKind, SampleCloud};
use crate::pfo::{flowmap_loss_and_grad, PartitionOfUnity, SourceSet, UlamMatrix};
use crate::systems::Trajectory;
use crate::velocity::{ParametricField, VelocityModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::DimensionMismatch { expected: state.m.len(), got: params.len().max(grads.len()) });
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for k in 0..params.len() {
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * grads[k];
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * grads[k] * grads[k];
        params[k] -= lr * (state.m[k] / c1) / ((state.v[k] / c2).sqrt() + eps);
    }
    Ok(())
}

/// Rescales `g` to norm at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Stop once the best loss has not improved by `rel_tol` (relative) for `patience` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopping {
    pub patience: usize,
    pub rel_tol: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self { patience: 500, rel_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub n_iters: usize,
    pub adam: AdamConfig,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub early_stopping: Option<EarlyStopping>,
    /// Emit a checkpoint every this many iterations.
    pub checkpoint_every: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { n_iters: 100, adam: AdamConfig::default(), clip_norm: Some(10.0), early_stopping: None, checkpoint_every: None }
    }
}

/// Complete optimizer state after `iteration` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCheckpoint {
    pub iteration: usize,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub loss_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub best_loss: f64,
    pub best_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    /// `J(theta_k)` for `k = 0 ..= iterations`.
    pub loss_history: Vec<f64>,
    /// Unclipped gradient norms, one per step taken.
    pub grad_norm_history: Vec<f64>,
    pub final_params: Vec<f64>,
    pub iterations: usize,
    pub stopped_early: bool,
    pub seed: u64,
    /// Echo of the configuration that produced the run.
    pub config: serde_json::Value,
    /// Run-dependent facts (timings); everything else is reproducible.
    pub meta: RunMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub wall_clock_secs: f64,
}

impl FitReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_history[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history holds the initial loss")
    }
}

/// Resume state and checkpoint sink for a run.
#[derive(Default)]
pub struct RunControl<'a> {
    pub resume: Option<FitCheckpoint>,
    pub on_checkpoint: Option<Box<dyn FnMut(&FitCheckpoint) -> Result<()> + 'a>>,
    pub config: serde_json::Value,
}

/// Adam on an arbitrary `(J, dJ)` oracle; the common loop of every driver.
pub fn minimize(
    params0: Vec<f64>,
    opts: &FitOptions,
    seed: u64,
    ctl: RunControl<'_>,
    mut loss_grad: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<FitReport> {
    let start = Instant::now();
    let RunControl { resume, mut on_checkpoint, config } = ctl;
    let mut ck = match resume {
        Some(ck) => {
            if ck.params.len() != params0.len() || ck.loss_history.len() != ck.iteration {
                return invalid("checkpoint does not match this model");
            }
            ck
        }
        None => FitCheckpoint {
            iteration: 0,
            adam: AdamState::new(params0.len(), opts.adam),
            params: params0,
            loss_history: Vec::new(),
            grad_norm_history: Vec::new(),
            best_loss: f64::MAX,
            best_iteration: 0,
        },
    };
    let mut stopped_early = false;
    while ck.iteration < opts.n_iters {
        let (loss, mut grad) = loss_grad(&ck.params)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonConvergence { iterations: ck.iteration, residual: loss });
        }
        ck.loss_history.push(loss);
        if let Some(es) = opts.early_stopping {
            if loss < ck.best_loss * (1.0 - es.rel_tol) {
                (ck.best_loss, ck.best_iteration) = (loss, ck.iteration);
            } else if ck.iteration - ck.best_iteration >= es.patience {
                stopped_early = true;
                break;
            }
        }
        let norm = match opts.clip_norm {
            Some(c) => clip_global_norm(&mut grad, c),
            None => grad.iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        ck.grad_norm_history.push(norm);
        adam_step(&mut ck.adam, &mut ck.params, &grad)?;
        ck.iteration += 1;
        log::debug!("iteration {}: loss {loss:.6e}, |grad| {norm:.3e}", ck.iteration);
        if let (Some(every), Some(sink)) = (opts.checkpoint_every, on_checkpoint.as_mut()) {
            if every > 0 && ck.iteration % every == 0 {
                sink(&ck)?;
            }
        }
    }
    if !stopped_early {
        let (loss, _) = loss_grad(&ck.params)?;
        ck.loss_history.push(loss);
    }
    Ok(FitReport {
        iterations: ck.iteration,
        loss_history: ck.loss_history,
        grad_norm_history: ck.grad_norm_history,
        final_params: ck.params,
        stopped_early,
        seed,
        config,
        meta: RunMeta { wall_clock_secs: start.elapsed().as_secs_f64() },
    })
}

/// Central-difference check of `loss_grad` at `coords`: `(index, analytic, fd, relative error)`.
pub fn gradient_spot_check(
    params: &[f64],
    coords: &[usize],
    h: f64,
    mut loss_grad: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<Vec<(usize, f64, f64, f64)>> {
    let (_, grad) = loss_grad(params)?;
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &k in coords {
        theta[k] = params[k] + h;
        let plus = loss_grad(&theta)?.0;
        theta[k] = params[k] - h;
        let minus = loss_grad(&theta)?.0;
        theta[k] = params[k];
        let fd = (plus - minus) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-12);
        out.push((k, grad[k], fd, rel));
    }
    Ok(out)
}

/// Discretization of the regularized Fokker-Planck problem being fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvmSettings {
    pub diffusion: f64,
    pub eps: f64,
    /// Fixed explicit step; keeping it fixed keeps `J(theta)` smooth.
    pub dt: f64,
    #[serde(default)]
    pub objective: ObjectiveKind,
    #[serde(default)]
    pub method: StationaryMethod,
}

/// Stationary density of the regularized operator for one velocity model.
pub fn fvm_forward(model: &VelocityModel, grid: &Grid, settings: &FvmSettings) -> Result<Measure> {
    let faces = model.faces(grid)?;
    let m = teleport(&assemble(&faces, settings.diffusion, settings.dt)?, settings.eps)?;
    match settings.method {
        StationaryMethod::Direct => DirectSolver::new(&m)?.stationary(),
        StationaryMethod::Power => stationary_density(&m, DEFAULT_TOL, DEFAULT_MAX_ITERS),
    }
}

/// `J(rho(theta))` and its adjoint-state gradient.
pub fn fvm_loss_and_grad(model: &VelocityModel, target: &Measure, settings: &FvmSettings) -> Result<(f64, Vec<f64>)> {
    let grid = target.grid().ok_or_else(|| Error::SupportMismatch("FVM target must live on a grid".into()))?;
    let faces = model.faces(grid)?;
    let m = teleport(&assemble(&faces, settings.diffusion, settings.dt)?, settings.eps)?;
    let objective = settings.objective.build(target);
    let (rho, lambda) = match settings.method {
        StationaryMethod::Direct => {
            let solver = DirectSolver::new(&m)?;
            let rho = solver.stationary()?;
            let (_, dj) = objective.value_and_grad(rho.weights());
            let lambda = solve_adjoint_direct(&solver, &rho, &dj, DEFAULT_ADJOINT_TOL)?;
            (rho, lambda)
        }
        StationaryMethod::Power => {
            let rho = stationary_density(&m, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
            let (_, dj) = objective.value_and_grad(rho.weights());
            let lambda = solve_adjoint(&m, &rho, &dj, DEFAULT_ADJOINT_TOL)?;
            (rho, lambda)
        }
    };
    let loss = objective.value(rho.weights());
    Ok((loss, grad_parameters(&grad_face_velocities(&m, &rho, &lambda), model)))
}

/// Fits a velocity model so the regularized stationary density matches `target`.
pub fn fit_fvm(target: &Measure, model: &mut VelocityModel, settings: &FvmSettings, opts: &FitOptions, seed: u64, ctl: RunControl<'_>) -> Result<FitReport> {
    let grid = target.grid().ok_or_else(|| Error::SupportMismatch("FVM target must live on a grid".into()))?.clone();
    check_on_grid(target, &grid)?;
    let mut work = model.clone();
    let report = minimize(model.params(), opts, seed, ctl, |theta| {
        work.set_params(theta)?;
        fvm_loss_and_grad(&work, target, settings)
    })?;
    model.set_params(&report.final_params)?;
    Ok(report)
}

/// Flow-map discretization for Ulam-matrix fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSettings {
    pub flow_dt: f64,
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

/// Fits a vector field so its flow-map Ulam matrix matches `target`.
pub fn fit_pfo(
    target: &UlamMatrix,
    model: &mut dyn ParametricField,
    sources: &SourceSet,
    pou: &PartitionOfUnity,
    flow: FlowSettings,
    opts: &FitOptions,
    seed: u64,
    ctl: RunControl<'_>,
) -> Result<FitReport> {
    let mut work = model.clone_box();
    let report = minimize(model.params().to_vec(), opts, seed, ctl, |theta| {
        work.set_params(theta);
        let out = flowmap_loss_and_grad(work.as_ref(), sources, pou, target, flow.flow_dt, flow.substeps)?;
        Ok((out.loss, out.grad))
    })?;
    model.set_params(&report.final_params);
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayLossKind {
    /// State-coordinate matching only.
    J1,
    /// State plus delay-coordinate matching.
    #[default]
    J2,
}

/// The three clouds a delay fit compares against, built from one observed orbit.
#[derive(Debug, Clone)]
pub struct DelayData {
    pub mu: SampleCloud,
    pub images: SampleCloud,
    pub observed_delay: SampleCloud,
}

impl DelayData {
    /// Pairs `(x_k, x_{k+1})` plus the delay embedding of the orbit.
    pub fn from_trajectory(observed: &Trajectory, cfg: &DelayMapConfig) -> Result<Self> {
        let n = observed.len();
        if n < 2 {
            return invalid("delay fit needs at least two observed states");
        }
        let d = observed.dim();
        let flat = observed.as_flat();
        Ok(Self {
            mu: SampleCloud::new(d, flat[..(n - 1) * d].to_vec())?,
            images: SampleCloud::new(d, flat[d..].to_vec())?,
            observed_delay: delay_embed(observed, cfg)?,
        })
    }
}

/// Fits a map `T_theta` to an observed orbit with the `J_1` or `J_2` loss.
pub fn fit_delay(observed: &Trajectory, model: &mut MapModel, cfg: &DelayMapConfig, kind: DelayLossKind, opts: &FitOptions, seed: u64, ctl: RunControl<'_>) -> Result<FitReport> {
    let data = DelayData::from_trajectory(observed, cfg)?;
    let mut work = model.clone();
    let report = minimize(model.params(), opts, seed, ctl, |theta| {
        work.set_params(theta)?;
        let delay = match kind {
            DelayLossKind::J1 => None,
            DelayLossKind::J2 => Some((&data.observed_delay, cfg)),
        };
        let out = delay_loss_and_grad(&work, &data.mu, &data.images, delay)?;
        Ok((out.value(), out.grad))
    })?;
    model.set_params(&report.final_params)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fvm::{cfl_dt, FaceVelocities, DEFAULT_SAFETY};
    use crate::velocity::LinearFeatures;

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 3.0];
        adam_step(&mut st, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert!(adam_step(&mut st, &mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn adam_single_step_by_hand() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut st = AdamState::new(1, cfg);
        let mut p = vec![0.0];
        adam_step(&mut st, &mut p, &[0.5]).unwrap();
        // m_hat = g and v_hat = g^2 after one step.
        let expected = -0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        adam_step(&mut st, &mut p, &[0.5]).unwrap();
        let (m, v) = (0.1 * 0.5 * 0.9 + 0.1 * 0.5, 0.001 * 0.25 * 0.999 + 0.001 * 0.25);
        let step2 = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p[0] - (expected - step2)).abs() < 1e-14);
    }

    #[test]
    fn adam_moves_against_a_constant_gradient() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        for _ in 0..100 {
            adam_step(&mut st, &mut p, &[2.0, -3.0]).unwrap();
        }
        assert!(p[0] < -0.09 && p[1] > 0.09);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![30.0, 40.0];
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
        let mut small = vec![0.3, 0.4];
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    fn quadratic(theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((theta.iter().map(|t| (t - 1.0) * (t - 1.0)).sum(), theta.iter().map(|t| 2.0 * (t - 1.0)).collect()))
    }

    #[test]
    fn minimize_history_and_zero_iterations() {
        let opts = FitOptions { n_iters: 0, ..FitOptions::default() };
        let r = minimize(vec![0.0; 2], &opts, 0, RunControl::default(), quadratic).unwrap();
        assert_eq!(r.loss_history, vec![2.0]);
        let opts = FitOptions { n_iters: 300, adam: AdamConfig { lr: 0.05, ..AdamConfig::default() }, ..FitOptions::default() };
        let r = minimize(vec![0.0; 2], &opts, 0, RunControl::default(), quadratic).unwrap();
        assert_eq!(r.loss_history.len(), 301);
        assert!(r.final_loss() < 1e-3 * r.initial_loss());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let opts = FitOptions { n_iters: 40, checkpoint_every: Some(15), ..FitOptions::default() };
        let mut saved = Vec::new();
        let ctl = RunControl { on_checkpoint: Some(Box::new(|c: &FitCheckpoint| {
            saved.push(c.clone());
            Ok(())
        })), ..RunControl::default() };
        let full = minimize(vec![0.0, 3.0], &opts, 0, ctl, quadratic).unwrap();
        assert_eq!(saved.iter().map(|c| c.iteration).collect::<Vec<_>>(), vec![15, 30]);
        let json = serde_json::to_string(&saved[0]).unwrap();
        let resume: FitCheckpoint = serde_json::from_str(&json).unwrap();
        let resumed = minimize(vec![0.0, 3.0], &opts, 0, RunControl { resume: Some(resume), ..RunControl::default() }, quadratic).unwrap();
        assert_eq!(full.loss_history, resumed.loss_history);
        assert_eq!(full.final_params, resumed.final_params);
    }

    #[test]
    fn early_stopping_on_a_plateau() {
        let opts = FitOptions { n_iters: 10_000, early_stopping: Some(EarlyStopping { patience: 20, rel_tol: 1e-6 }), ..FitOptions::default() };
        let r = minimize(vec![0.0], &opts, 0, RunControl::default(), |_| Ok((1.0, vec![0.0]))).unwrap();
        assert!(r.stopped_early);
        assert_eq!(r.iterations, 20);
    }

    fn linear_problem() -> (Grid, FvmSettings, VelocityModel) {
        let grid = Grid::cube(&[-1.0], &[1.0], 24).unwrap();
        let settings = FvmSettings { diffusion: 0.05, eps: 1e-3, dt: cfl_dt(&grid, 0.05, 3.0, DEFAULT_SAFETY).unwrap(), objective: ObjectiveKind::L2, method: StationaryMethod::Direct };
        // v(x) = -x in the basis [1, x].
        let mut f = LinearFeatures::new(1, 1, 1);
        let lin = f.exponents().iter().position(|e| e[0] == 1).unwrap();
        let mut theta = vec![0.0; 2];
        theta[lin] = -1.0;
        f.set_params(&theta);
        (grid, settings, VelocityModel::Field(Box::new(f)))
    }

    #[test]
    fn gradient_vanishes_at_the_truth() {
        let (grid, settings, truth) = linear_problem();
        let target = fvm_forward(&truth, &grid, &settings).unwrap();
        let (j, g) = fvm_loss_and_grad(&truth, &target, &settings).unwrap();
        assert!(j < 1e-20);
        let scale = fvm_loss_and_grad(&VelocityModel::Field(Box::new(LinearFeatures::new(1, 1, 1))), &target, &settings).unwrap().1;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(&g) < 1e-6 * norm(&scale));
    }

    #[test]
    fn fvm_fit_recovers_a_linear_drift() {
        let (grid, settings, truth) = linear_problem();
        let target = fvm_forward(&truth, &grid, &settings).unwrap();
        let mut model = VelocityModel::Field(Box::new(LinearFeatures::new(1, 1, 1)));
        let opts = FitOptions { n_iters: 400, adam: AdamConfig { lr: 0.02, ..AdamConfig::default() }, ..FitOptions::default() };
        let r = fit_fvm(&target, &mut model, &settings, &opts, 0, RunControl::default()).unwrap();
        assert!(r.final_loss() < 1e-3 * r.initial_loss(), "{} -> {}", r.initial_loss(), r.final_loss());
        let coords = [0, 1];
        let checks = gradient_spot_check(&model.params(), &coords, 1e-6, |t| {
            let mut m = model.clone();
            m.set_params(t)?;
            fvm_loss_and_grad(&m, &target, &settings)
        })
        .unwrap();
        assert!(checks.iter().all(|c| c.3 < 1e-3 || c.1.abs() < 1e-9), "{checks:?}");
    }

    #[test]
    fn double_well_loss_drops_tenfold() {
        let grid = Grid::cube(&[-2.0], &[2.0], 32).unwrap();
        let settings = FvmSettings { diffusion: 0.1, eps: 1e-3, dt: cfl_dt(&grid, 0.1, 6.0, DEFAULT_SAFETY).unwrap(), objective: ObjectiveKind::L2, method: StationaryMethod::Direct };
        let truth = VelocityModel::Faces(FaceVelocities::sample(&grid, &crate::systems::double_well(1.0)).unwrap());
        let target = fvm_forward(&truth, &grid, &settings).unwrap();
        let mut model = VelocityModel::Field(Box::new(LinearFeatures::new(1, 1, 3)));
        let opts = FitOptions { n_iters: 500, adam: AdamConfig { lr: 0.05, ..AdamConfig::default() }, ..FitOptions::default() };
        let r = fit_fvm(&target, &mut model, &settings, &opts, 7, RunControl::default()).unwrap();
        assert!(r.final_loss() * 10.0 < r.initial_loss(), "{} -> {}", r.initial_loss(), r.final_loss());
    }
}
