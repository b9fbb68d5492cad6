//! Delay-coordinate measures and the map-level losses built on them.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::measure::{energy_mmd, energy_mmd_with_grad, SampleCloud};
use crate::systems::{DiscreteMap, Trajectory, BLOWUP_LIMIT};
use crate::velocity::ParametricField;

/// Clouds larger than this are strided down before pairwise MMD sums.
pub const MMD_MAX_POINTS: usize = 4000;

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Scalar observable `y: R^d -> R`.
#[derive(Clone)]
pub enum Observable {
    Coordinate(usize),
    /// `y(x) = w . x`.
    Linear(Vec<f64>),
    /// Arbitrary function; its gradient is taken by central differences.
    Custom(ScalarFn),
}

impl std::fmt::Debug for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Coordinate(i) => write!(f, "Coordinate({i})"),
            Self::Linear(w) => write!(f, "Linear({w:?})"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Observable {
    pub fn custom(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::Custom(Arc::new(f))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Self::Coordinate(i) => x[*i],
            Self::Linear(w) => w.iter().zip(x).map(|(a, b)| a * b).sum(),
            Self::Custom(f) => f(x),
        }
    }

    /// Accumulates `scale * grad y(x)` into `out`.
    pub fn grad(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Self::Coordinate(i) => out[*i] += scale,
            Self::Linear(w) => out.iter_mut().zip(w).for_each(|(o, wi)| *o += scale * wi),
            Self::Custom(f) => {
                let mut xp = x.to_vec();
                for k in 0..x.len() {
                    let h = 1e-6 * (1.0 + x[k].abs());
                    xp[k] = x[k] + h;
                    let fp = f(&xp);
                    xp[k] = x[k] - h;
                    let fm = f(&xp);
                    xp[k] = x[k];
                    out[k] += scale * (fp - fm) / (2.0 * h);
                }
            }
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        match self {
            Self::Coordinate(i) if *i >= dim => invalid(format!("observable index {i} out of range for dimension {dim}")),
            Self::Linear(w) if w.len() != dim => Err(Error::DimensionMismatch { expected: dim, got: w.len() }),
            _ => Ok(()),
        }
    }
}

/// Observable, embedding dimension `m` and lag (in map steps) of a time-delay map.
#[derive(Debug, Clone)]
pub struct DelayMapConfig {
    pub observable: Observable,
    pub m: usize,
    pub lag: usize,
}

impl DelayMapConfig {
    /// First-coordinate observable with lag 1.
    pub fn new(m: usize) -> Result<Self> {
        Self::with(Observable::Coordinate(0), m, 1)
    }

    pub fn with(observable: Observable, m: usize, lag: usize) -> Result<Self> {
        if m == 0 || lag == 0 {
            return invalid(format!("delay map needs m >= 1 and lag >= 1, got m = {m}, lag = {lag}"));
        }
        Ok(Self { observable, m, lag })
    }

    /// Map steps between the first and last recorded value.
    pub fn span(&self) -> usize {
        (self.m - 1) * self.lag
    }
}

/// A learned map `T(x) = f(x)`, or `x + f(x)` when `residual`.
#[derive(Debug, Clone)]
pub struct LearnedMap {
    pub net: Box<dyn ParametricField>,
    pub residual: bool,
}

#[derive(Debug, Clone)]
pub enum MapModel {
    Known(DiscreteMap),
    Learned(LearnedMap),
}

impl MapModel {
    pub fn learned(net: Box<dyn ParametricField>, residual: bool) -> Result<Self> {
        if net.out_dim() != net.dim() {
            return Err(Error::DimensionMismatch { expected: net.dim(), got: net.out_dim() });
        }
        Ok(Self::Learned(LearnedMap { net, residual }))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Known(m) => m.dim,
            Self::Learned(l) => l.net.dim(),
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Known(m) => m.apply(x, out),
            Self::Learned(l) => {
                l.net.eval(x, out);
                if l.residual {
                    out.iter_mut().zip(x).for_each(|(o, xi)| *o += xi);
                }
            }
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Self::Known(_) => 0,
            Self::Learned(l) => l.net.n_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Known(_) => Vec::new(),
            Self::Learned(l) => l.net.params().to_vec(),
        }
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: theta.len() });
        }
        if let Self::Learned(l) = self {
            l.net.set_params(theta);
        }
        Ok(())
    }

    /// Accumulates `d(seed . T(x)) / d theta` and `d(seed . T(x)) / dx`.
    fn backward(&self, x: &[f64], seed: &[f64], grad_params: &mut [f64], grad_input: &mut [f64]) -> Result<()> {
        match self {
            Self::Known(_) => invalid("a known map has no trainable parameters"),
            Self::Learned(l) => {
                l.net.backward(x, seed, grad_params, Some(&mut *grad_input));
                if l.residual {
                    grad_input.iter_mut().zip(seed).for_each(|(g, s)| *g += s);
                }
                Ok(())
            }
        }
    }
}

fn guard(index: usize, x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
        Some(component) => Err(Error::IntegrationBlowup { step: index, component, value: x[component] }),
        None => Ok(()),
    }
}

/// Delay vectors `(y(x_k), y(x_{k+lag}), ..)` for every admissible start `k`.
pub fn delay_embed(traj: &Trajectory, cfg: &DelayMapConfig) -> Result<SampleCloud> {
    cfg.observable.check(traj.dim())?;
    if traj.len() < cfg.span() + 1 {
        return invalid(format!("trajectory of length {} too short for m = {}, lag = {}", traj.len(), cfg.m, cfg.lag));
    }
    let series: Vec<f64> = traj.states().map(|x| cfg.observable.eval(x)).collect();
    let count = traj.len() - cfg.span();
    let points = (0..count).flat_map(|k| (0..cfg.m).map(|j| series[k + j * cfg.lag]).collect::<Vec<_>>()).collect();
    SampleCloud::new(cfg.m, points)
}

/// Images of every sample under the model map.
pub fn map_images(model: &MapModel, samples: &SampleCloud) -> Result<SampleCloud> {
    let d = check_dim(model, samples)?;
    let mut out = vec![0.0; samples.as_flat().len()];
    out.par_chunks_mut(d).zip(samples.as_flat().par_chunks(d)).enumerate().try_for_each(|(k, (y, x))| {
        model.apply(x, y);
        guard(k, y)
    })?;
    SampleCloud::new(d, out)
}

fn check_dim(model: &MapModel, samples: &SampleCloud) -> Result<usize> {
    if samples.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: samples.dim() });
    }
    Ok(model.dim())
}

/// Orbit `x, T x, .., T^span x` of one sample, flattened.
fn orbit(model: &MapModel, x: &[f64], span: usize, index: usize) -> Result<Vec<f64>> {
    let d = x.len();
    let mut states = Vec::with_capacity((span + 1) * d);
    states.extend_from_slice(x);
    for s in 0..span {
        let mut next = vec![0.0; d];
        model.apply(&states[s * d..(s + 1) * d], &mut next);
        guard(index, &next)?;
        states.extend_from_slice(&next);
    }
    Ok(states)
}

/// Pushes samples of `mu` through the time-delay map of `model`.
pub fn pushforward_delay_measure(samples: &SampleCloud, model: &MapModel, cfg: &DelayMapConfig) -> Result<SampleCloud> {
    let d = check_dim(model, samples)?;
    cfg.observable.check(d)?;
    let rows: Vec<Vec<f64>> = samples
        .as_flat()
        .par_chunks(d)
        .enumerate()
        .map(|(k, x)| {
            let states = orbit(model, x, cfg.span(), k)?;
            Ok((0..cfg.m).map(|j| cfg.observable.eval(&states[j * cfg.lag * d..(j * cfg.lag + 1) * d])).collect())
        })
        .collect::<Result<_>>()?;
    SampleCloud::new(cfg.m, rows.concat())
}

/// `D(T_theta # mu, T* # mu)` with the energy MMD.
pub fn loss_j1(model: &MapModel, mu_samples: &SampleCloud, t_star_images: &SampleCloud) -> Result<f64> {
    let mu = mu_samples.strided(MMD_MAX_POINTS);
    energy_mmd(&map_images(model, &mu)?, &t_star_images.strided(MMD_MAX_POINTS))
}

/// `J_1 + D(Psi_theta # mu, Psi* # mu)`; `observed_delay` must come from the same `cfg`.
pub fn loss_j2(model: &MapModel, mu_samples: &SampleCloud, t_star_images: &SampleCloud, observed_delay: &SampleCloud, cfg: &DelayMapConfig) -> Result<f64> {
    if observed_delay.dim() != cfg.m {
        return Err(Error::DimensionMismatch { expected: cfg.m, got: observed_delay.dim() });
    }
    let j1 = loss_j1(model, mu_samples, t_star_images)?;
    let mu = mu_samples.strided(MMD_MAX_POINTS);
    Ok(j1 + energy_mmd(&pushforward_delay_measure(&mu, model, cfg)?, &observed_delay.strided(MMD_MAX_POINTS))?)
}

/// Value and parameter gradient of one of the delay losses.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLoss {
    /// State-coordinate term `J_1`.
    pub state_term: f64,
    /// Delay-coordinate term; zero when not requested.
    pub delay_term: f64,
    pub grad: Vec<f64>,
}

impl DelayLoss {
    pub fn value(&self) -> f64 {
        self.state_term + self.delay_term
    }
}

/// Gradient of `J_1` (when `delay` is `None`) or `J_2` with respect to the model parameters.
pub fn delay_loss_and_grad(model: &MapModel, mu_samples: &SampleCloud, t_star_images: &SampleCloud, delay: Option<(&SampleCloud, &DelayMapConfig)>) -> Result<DelayLoss> {
    let d = check_dim(model, mu_samples)?;
    let n_params = model.n_params();
    let mu = mu_samples.strided(MMD_MAX_POINTS);
    let images = map_images(model, &mu)?;
    let (state_term, seeds) = energy_mmd_with_grad(&images, &t_star_images.strided(MMD_MAX_POINTS), None)?;
    let mut grad = sum_blocks(mu.as_flat().par_chunks(d * 64).zip(seeds.par_chunks(d * 64)).map(|(xs, ss)| {
        let mut g = vec![0.0; n_params];
        let mut scratch = vec![0.0; d];
        for (x, s) in xs.chunks(d).zip(ss.chunks(d)) {
            model.backward(x, s, &mut g, &mut scratch)?;
        }
        Ok(g)
    }))?;
    let mut delay_term = 0.0;
    if let Some((observed, cfg)) = delay {
        if observed.dim() != cfg.m {
            return Err(Error::DimensionMismatch { expected: cfg.m, got: observed.dim() });
        }
        cfg.observable.check(d)?;
        let embedded = pushforward_delay_measure(&mu, model, cfg)?;
        let (value, seeds) = energy_mmd_with_grad(&embedded, &observed.strided(MMD_MAX_POINTS), None)?;
        delay_term = value;
        let m = cfg.m;
        let g2 = sum_blocks(mu.as_flat().par_chunks(d * 64).zip(seeds.par_chunks(m * 64)).enumerate().map(|(b, (xs, ss))| {
            let mut g = vec![0.0; n_params];
            for (k, (x, s)) in xs.chunks(d).zip(ss.chunks(m)).enumerate() {
                orbit_backward(model, cfg, x, s, b * 64 + k, &mut g)?;
            }
            Ok(g)
        }))?;
        grad.iter_mut().zip(&g2).for_each(|(a, b)| *a += b);
    }
    Ok(DelayLoss { state_term, delay_term, grad })
}

fn sum_blocks(blocks: impl IndexedParallelIterator<Item = Result<Vec<f64>>>) -> Result<Vec<f64>> {
    let parts: Vec<Vec<f64>> = blocks.collect::<Result<_>>()?;
    let mut total = parts.first().map(|p| vec![0.0; p.len()]).unwrap_or_default();
    for p in parts {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += v);
    }
    Ok(total)
}

/// Reverse sweep along one orbit with seeds on the recorded delay values.
fn orbit_backward(model: &MapModel, cfg: &DelayMapConfig, x: &[f64], seeds: &[f64], index: usize, g: &mut [f64]) -> Result<()> {
    let d = x.len();
    let span = cfg.span();
    let states = orbit(model, x, span, index)?;
    let mut xbar = vec![0.0; d];
    let mut prev = vec![0.0; d];
    for s in (0..=span).rev() {
        let xs = &states[s * d..(s + 1) * d];
        if s % cfg.lag == 0 {
            cfg.observable.grad(xs, seeds[s / cfg.lag], &mut xbar);
        }
        if s == 0 {
            break;
        }
        prev.iter_mut().for_each(|v| *v = 0.0);
        model.backward(&states[(s - 1) * d..s * d], &xbar, g, &mut prev)?;
        std::mem::swap(&mut xbar, &mut prev);
    }
    Ok(())
}

/// Diagnostics comparing two maps on a common sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjugacyReport {
    /// Energy MMD between the `(m + 1)`-delay measures of the two maps.
    pub delay_mmd: f64,
    /// `max |T(x) - S(x)|` over the samples.
    pub max_deviation: f64,
}

pub fn verify_conjugacy_diagnostics(model_t: &MapModel, model_s: &MapModel, mu_samples: &SampleCloud, cfg: &DelayMapConfig) -> Result<ConjugacyReport> {
    let mu = mu_samples.strided(MMD_MAX_POINTS);
    let wide = DelayMapConfig { m: cfg.m + 1, ..cfg.clone() };
    let a = pushforward_delay_measure(&mu, model_t, &wide)?;
    let b = pushforward_delay_measure(&mu, model_s, &wide)?;
    let ta = map_images(model_t, mu_samples)?;
    let sb = map_images(model_s, mu_samples)?;
    let max_deviation = ta
        .points()
        .zip(sb.points())
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Ok(ConjugacyReport { delay_mmd: energy_mmd(&a, &b)?, max_deviation })
}
