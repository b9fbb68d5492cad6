//! Experiment configuration: one JSON document per run, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::delay::{DelayMapConfig, Observable};
use crate::error::{Error, Result};
use crate::fvm::StationaryMethod;
use crate::measure::{Grid, ObjectiveKind};
use crate::optim::{DelayLossKind, FitOptions};
use crate::systems::{builtin, System};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; defaults to `out/<name>`.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub system: SystemSpec,
    pub simulate: SimulateSpec,
    #[serde(default)]
    pub histogram: Option<HistogramSpec>,
    #[serde(default)]
    pub fit: Option<FitSpec>,
    #[serde(default)]
    pub eval: Option<EvalSpec>,
    #[serde(default)]
    pub delay: Option<DelaySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl SystemSpec {
    pub fn build(&self) -> Result<System> {
        builtin(&self.name, &self.params)
    }
}

/// How observed data are generated from the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    /// Recorded states per orbit after burn-in, minus one.
    pub n_steps: usize,
    /// Sampling interval of flows; ignored for maps.
    #[serde(default)]
    pub dt: f64,
    #[serde(default = "one")]
    pub substeps: usize,
    /// Recorded steps discarded from the start of every orbit.
    #[serde(default)]
    pub burn_in: usize,
    /// Diffusion coefficient; positive values switch flows to Euler-Maruyama.
    #[serde(default)]
    pub diffusion: f64,
    /// Fixed start; otherwise starts are drawn uniformly from `x0_box`.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub x0_box: Option<[Vec<f64>; 2]>,
    #[serde(default = "one")]
    pub n_orbits: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub grid: Grid,
    /// Reject out-of-box samples instead of clamping them to boundary cells.
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        /// Scale of the linear output layer.
        #[serde(default = "unit")]
        output_scale: f64,
    },
    Linear {
        degree: u32,
    },
    /// Learns `learned` components; the rest follow the configured system.
    Masked {
        learned: Vec<usize>,
        inner: Box<ModelSpec>,
    },
    /// One free value per interior face (finite-volume fits only).
    Faces,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitSpec {
    Fvm {
        grid: Grid,
        diffusion: f64,
        eps: f64,
        /// Explicit step; derived from `v_bound` by the CFL rule when absent.
        #[serde(default)]
        dt: Option<f64>,
        #[serde(default = "default_v_bound")]
        v_bound: f64,
        #[serde(default)]
        objective: ObjectiveKind,
        #[serde(default)]
        stationary: StationaryMethod,
        model: ModelSpec,
        #[serde(default)]
        options: FitOptions,
    },
    Pfo {
        n_cells: usize,
        #[serde(default)]
        balanced: bool,
        /// Samples used to place centers (taken evenly from the data).
        mesh_samples: usize,
        /// Source points drawn from the data.
        n_sources: usize,
        pou_eps: f64,
        flow_dt: f64,
        #[serde(default = "one")]
        substeps: usize,
        model: ModelSpec,
        #[serde(default)]
        options: FitOptions,
    },
    Delay {
        #[serde(default)]
        observable: ObservableSpec,
        m: usize,
        #[serde(default = "one")]
        lag: usize,
        #[serde(default = "default_losses")]
        losses: Vec<DelayLossKind>,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        /// Learn `T(x) = x + f(x)` instead of `f(x)`.
        #[serde(default = "yes")]
        residual: bool,
        #[serde(default = "unit")]
        output_scale: f64,
        #[serde(default)]
        options: FitOptions,
    },
}

fn default_v_bound() -> f64 {
    10.0
}

fn default_losses() -> Vec<DelayLossKind> {
    vec![DelayLossKind::J2]
}

fn yes() -> bool {
    true
}

/// Observable by coordinate index, or `{"custom": weights}` for a linear functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObservableSpec {
    Index(usize),
    Custom { custom: Vec<f64> },
}

impl Default for ObservableSpec {
    fn default() -> Self {
        Self::Index(0)
    }
}

impl ObservableSpec {
    pub fn build(&self, dim: usize) -> Result<Observable> {
        match self {
            Self::Index(i) if *i < dim => Ok(Observable::Coordinate(*i)),
            Self::Index(i) => Err(Error::Config(format!("observable index {i} out of range for dimension {dim}"))),
            Self::Custom { custom } if custom.len() == dim => Ok(Observable::Linear(custom.clone())),
            Self::Custom { custom } => Err(Error::Config(format!("custom observable has {} weights for dimension {dim}", custom.len()))),
        }
    }

    pub fn delay_config(&self, dim: usize, m: usize, lag: usize) -> Result<DelayMapConfig> {
        DelayMapConfig::with(self.build(dim)?, m, lag).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalSpec {
    /// Simulates the fitted (or true) model and compares occupation measures.
    Occupation {
        #[serde(default)]
        use_truth: bool,
        #[serde(default = "default_projections")]
        n_projections: usize,
        /// Independent data seed for the truth baseline.
        #[serde(default)]
        baseline_seed: Option<u64>,
    },
    /// Stationary densities on refined grids against a long SDE run.
    Refinement {
        lo: Vec<f64>,
        hi: Vec<f64>,
        sizes: Vec<usize>,
        diffusion: f64,
        eps: f64,
        #[serde(default = "default_projections")]
        n_projections: usize,
        /// Points drawn from each grid density; 0 compares weighted cell centers.
        #[serde(default)]
        resample: usize,
    },
    /// Invariant-density error of uniform and data-adapted Ulam meshes.
    UlamDensity {
        n_cells: usize,
        uniform_per_dim: usize,
        mesh_samples: usize,
        quadrature: usize,
    },
    /// Frobenius distance between fitted and true flow-map matrices.
    FlowMap {},
    /// Delay-measure MMD of each fitted map against the observed orbit.
    DelayMeasure {},
}

fn default_projections() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    /// Second system compared against `system`.
    pub other: SystemSpec,
    #[serde(default)]
    pub observable: ObservableSpec,
    pub m: usize,
    #[serde(default = "one")]
    pub lag: usize,
    /// Histogram grid for the state-coordinate comparison.
    pub grid: Grid,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out").join(&self.name))
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let system = self.system.build().map_err(|e| Error::Config(e.to_string()))?;
        let d = system.dim();
        let sim = &self.simulate;
        if sim.n_steps == 0 || sim.substeps == 0 || sim.n_orbits == 0 {
            return bad("simulate: n_steps, substeps and n_orbits must be positive".into());
        }
        if matches!(system, System::Ode(_)) && !(sim.dt > 0.0) {
            return bad("simulate: flows need dt > 0".into());
        }
        if sim.diffusion < 0.0 {
            return bad("simulate: diffusion must be >= 0".into());
        }
        match (&sim.x0, &sim.x0_box) {
            (Some(x0), _) if x0.len() != d => return bad(format!("simulate: x0 has {} entries for dimension {d}", x0.len())),
            (None, None) => return bad("simulate: give x0 or x0_box".into()),
            (_, Some([lo, hi])) if lo.len() != d || hi.len() != d || lo.iter().zip(hi).any(|(a, b)| a > b) => {
                return bad("simulate: x0_box must be [lo, hi] with lo <= hi in dimension d".into())
            }
            _ => {}
        }
        if let Some(h) = &self.histogram {
            check_grid(&h.grid, d, "histogram")?;
        }
        if let Some(fit) = &self.fit {
            match fit {
                FitSpec::Fvm { grid, diffusion, eps, dt, model, .. } => {
                    check_grid(grid, d, "fit")?;
                    if *diffusion < 0.0 || !(*eps > 0.0 && *eps < 1.0) || dt.is_some_and(|t| !(t > 0.0)) {
                        return bad("fit: need diffusion >= 0, 0 < eps < 1 and dt > 0".into());
                    }
                    check_model(model, d)?;
                }
                FitSpec::Pfo { n_cells, mesh_samples, n_sources, pou_eps, flow_dt, substeps, model, .. } => {
                    if *n_cells == 0 || mesh_samples < n_cells || n_sources < n_cells {
                        return bad("fit: need 0 < n_cells <= mesh_samples and n_cells <= n_sources".into());
                    }
                    if !(*pou_eps >= 0.0) || !(*flow_dt > 0.0) || *substeps == 0 {
                        return bad("fit: need pou_eps >= 0, flow_dt > 0, substeps >= 1".into());
                    }
                    if matches!(model, ModelSpec::Faces) {
                        return bad("fit: face models are for the finite-volume method".into());
                    }
                    check_model(model, d)?;
                }
                FitSpec::Delay { observable, m, lag, losses, hidden, .. } => {
                    observable.delay_config(d, *m, *lag)?;
                    if losses.is_empty() || hidden.contains(&0) {
                        return bad("fit: need at least one loss and positive hidden widths".into());
                    }
                }
            }
        }
        if let Some(delay) = &self.delay {
            let other = delay.other.build().map_err(|e| Error::Config(e.to_string()))?;
            if other.dim() != d {
                return bad(format!("delay: `{}` has dimension {}, expected {d}", delay.other.name, other.dim()));
            }
            delay.observable.delay_config(d, delay.m, delay.lag)?;
            check_grid(&delay.grid, d, "delay")?;
        }
        if let Some(EvalSpec::Refinement { lo, hi, sizes, eps, .. }) = &self.eval {
            if lo.len() != d || hi.len() != d || sizes.is_empty() || !(*eps > 0.0) {
                return bad("eval: refinement needs a d-dimensional box, grid sizes and eps > 0".into());
            }
        }
        Ok(())
    }
}

fn check_grid(grid: &Grid, d: usize, section: &str) -> Result<()> {
    grid.validate().map_err(|e| Error::Config(format!("{section}: {e}")))?;
    if grid.dim() != d {
        return Err(Error::Config(format!("{section}: grid has dimension {}, system has {d}", grid.dim())));
    }
    Ok(())
}

fn check_model(model: &ModelSpec, d: usize) -> Result<()> {
    match model {
        ModelSpec::Mlp { hidden, .. } if hidden.contains(&0) => Err(Error::Config("model: hidden widths must be positive".into())),
        ModelSpec::Masked { learned, inner } => {
            if learned.is_empty() || learned.iter().any(|&i| i >= d) {
                return Err(Error::Config(format!("model: learned components {learned:?} out of range")));
            }
            if matches!(**inner, ModelSpec::Masked { .. } | ModelSpec::Faces) {
                return Err(Error::Config("model: masked inner model must be mlp or linear".into()));
            }
            check_model(inner, d)
        }
        _ => Ok(()),
    }
}
