//! Batch front end: `simulate | histogram | fit | eval | delay`.
//!
//! Every command reads one [`ExperimentConfig`], writes plain CSV/JSON
//! artifacts under the output directory and is deterministic in the seed.
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{DelaySpec, EvalSpec, ExperimentConfig, FitSpec, HistogramSpec, ModelSpec, ObservableSpec, SimulateSpec, SystemSpec};

use crate::delay::{delay_embed, pushforward_delay_measure, verify_conjugacy_diagnostics, MMD_MAX_POINTS, ConjugacyReport, DelayMapConfig, MapModel};
use crate::error::{Error, Result};
use crate::fvm::{assemble_auto, cfl_dt, teleport, DirectSolver, FaceVelocities, DEFAULT_SAFETY};
use crate::io;
use crate::measure::{energy_mmd, measure_to_cloud, occupation_measure_points, wasserstein2, CloudMode, Grid, Measure, SampleCloud};
use crate::optim::{fit_delay, fit_fvm, fit_pfo, fvm_forward, DelayData, DelayLossKind, FitCheckpoint, FitReport, FlowSettings, FvmSettings, RunControl};
use crate::pfo::{build_mesh, flowmap_markov, invariant_density, l1_density_error, markov_distance, ulam_from_orbits, PartitionOfUnity, SourceSet, UnstructuredMesh};
use crate::systems::{integrate_ode, integrate_sde, iterate_map, System, Trajectory, VectorField};
use crate::velocity::{InitScheme, LinearFeatures, MaskedField, Mlp, ModelCheckpoint, ParametricField, VelocityModel};

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "ERGODIC_SYSID_LOG";

#[derive(Debug, Parser)]
#[command(name = "ergodic-sysid", version, about = "Identify dynamical systems from invariant measures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate trajectories.
    Simulate,
    /// Occupation measure of the simulated data.
    Histogram,
    /// Fit a model; writes a report, checkpoints and the final model.
    Fit {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Metrics and plot data for a fitted (or true) model.
    Eval,
    /// Delay-coordinate comparison of two systems.
    Delay,
}

/// Parses arguments, runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).try_init();
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let cfg = match load(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Simulate => cmd_simulate(&cfg).map(drop),
        Command::Histogram => cmd_histogram(&cfg).map(drop),
        Command::Fit { resume } => cmd_fit(&cfg, resume.as_deref()).map(drop),
        Command::Eval => cmd_eval(&cfg).map(drop),
        Command::Delay => cmd_delay(&cfg).map(drop),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownSystem(_) => 2,
        _ => 3,
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn need<T>(section: Option<T>, name: &str) -> Result<T> {
    section.ok_or_else(|| Error::Config(format!("this command needs a `{name}` section")))
}

/// Independent stream for a named purpose, derived from the run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ stream
}

const STREAM_DATA: u64 = 1;
const STREAM_MODEL: u64 = 2;
const STREAM_MESH: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_BASELINE: u64 = 5;

/// Observed orbits of `system` under `spec`, generated from `seed`.
pub fn simulate_system(system: &System, spec: &SimulateSpec, seed: u64) -> Result<Vec<Trajectory>> {
    let field: Option<&dyn VectorField> = system.as_ode().map(|s| s as &dyn VectorField);
    simulate_with(system, field, spec, seed)
}

/// Like [`simulate_system`] but with the flow replaced by `field` when given.
fn simulate_with(system: &System, field: Option<&dyn VectorField>, spec: &SimulateSpec, seed: u64) -> Result<Vec<Trajectory>> {
    let d = system.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<(Vec<f64>, u64)> = (0..spec.n_orbits)
        .map(|_| {
            let x0 = match (&spec.x0, &spec.x0_box) {
                (Some(x0), _) => x0.clone(),
                (None, Some([lo, hi])) => (0..d).map(|i| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>()).collect(),
                (None, None) => unreachable!("validated config"),
            };
            (x0, rng.random::<u64>())
        })
        .collect();
    let total = spec.n_steps + spec.burn_in;
    starts
        .par_iter()
        .map(|(x0, noise_seed)| {
            let traj = match (system, field) {
                (System::Map(map), _) => iterate_map(map, x0, total)?,
                (System::Ode(_), Some(f)) if spec.diffusion > 0.0 => integrate_sde(f, spec.diffusion, x0, spec.dt, total, spec.substeps, *noise_seed)?,
                (System::Ode(_), Some(f)) => integrate_ode(f, x0, spec.dt, total, spec.substeps)?,
                (System::Ode(_), None) => unreachable!("flows always carry a field"),
            };
            let mut traj = traj.skip(spec.burn_in)?;
            traj.seed = seed;
            Ok(traj)
        })
        .collect()
}

/// All states of all orbits as one cloud.
pub fn pool(orbits: &[Trajectory]) -> Result<SampleCloud> {
    let d = orbits.first().ok_or(Error::EmptyCloud)?.dim();
    SampleCloud::new(d, orbits.iter().flat_map(|t| t.as_flat().iter().copied()).collect())
}

pub fn observed_data(cfg: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    simulate_system(&cfg.system.build()?, &cfg.simulate, sub_seed(cfg.seed, STREAM_DATA))
}

/// Writes `trajectory.csv` (first orbit) and, for several orbits, `cloud.csv`.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    let orbits = observed_data(cfg)?;
    let out = cfg.out_dir();
    let mut w = io::create(&out.join("trajectory.csv"))?;
    io::write_trajectory_csv(&orbits[0], &mut w)?;
    std::io::Write::flush(&mut w)?;
    if orbits.len() > 1 {
        let mut w = io::create(&out.join("cloud.csv"))?;
        io::write_cloud_csv(&pool(&orbits)?, &mut w)?;
        std::io::Write::flush(&mut w)?;
    }
    log::info!("simulate: {} orbit(s) of {} states to {}", orbits.len(), orbits[0].len(), out.display());
    Ok(orbits)
}

/// Writes `measure.json` and `density.csv`.
pub fn cmd_histogram(cfg: &ExperimentConfig) -> Result<Measure> {
    let spec = need(cfg.histogram.as_ref(), "histogram")?;
    let cloud = pool(&observed_data(cfg)?)?;
    let m = occupation_measure_points(cloud.dim(), cloud.as_flat(), &spec.grid, !spec.strict)?;
    let out = cfg.out_dir();
    io::write_measure_json(&m, &out.join("measure.json"))?;
    write_with(&out.join("density.csv"), |w| io::write_density_csv(&m, w))?;
    Ok(m)
}

fn write_with(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    let mut w = io::create(path)?;
    f(&mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

/// Axis-aligned bounding box of a cloud.
fn bounding_box(cloud: &SampleCloud) -> (Vec<f64>, Vec<f64>) {
    let d = cloud.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in cloud.points() {
        for i in 0..d {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    for i in 0..d {
        if hi[i] <= lo[i] {
            hi[i] = lo[i] + 1.0;
        }
    }
    (lo, hi)
}

/// Builds a field `R^d -> R^out` from its spec; MLP inputs are normalized to `bbox`.
pub fn build_model(spec: &ModelSpec, system: &SystemSpec, d: usize, out: usize, bbox: &(Vec<f64>, Vec<f64>), seed: u64) -> Result<Box<dyn ParametricField>> {
    Ok(match spec {
        ModelSpec::Mlp { hidden, output_scale } => {
            let widths: Vec<usize> = std::iter::once(d).chain(hidden.iter().copied()).chain(std::iter::once(out)).collect();
            Box::new(Mlp::new(&widths, InitScheme::Xavier, seed)?.with_box(&bbox.0, &bbox.1)?.with_output_scale(vec![*output_scale; out])?)
        }
        ModelSpec::Linear { degree } => Box::new(LinearFeatures::new(d, out, *degree)),
        ModelSpec::Masked { learned, inner } => {
            let inner = build_model(inner, system, d, learned.len(), bbox, seed)?;
            Box::new(MaskedField::new(&system.name, system.params.clone(), learned.clone(), inner)?)
        }
        ModelSpec::Faces => return Err(Error::Config("face models cannot be built as smooth fields".into())),
    })
}

fn checkpoint_sink<'a>(dir: PathBuf, tag: &'a str) -> Box<dyn FnMut(&FitCheckpoint) -> Result<()> + 'a> {
    Box::new(move |ck: &FitCheckpoint| io::write_json(&dir.join(format!("checkpoint{tag}_{:06}.json", ck.iteration)), ck))
}

fn run_control<'a>(cfg: &ExperimentConfig, resume: Option<&Path>, tag: &'a str) -> Result<RunControl<'a>> {
    Ok(RunControl {
        resume: resume.map(io::read_json::<FitCheckpoint>).transpose()?,
        on_checkpoint: Some(checkpoint_sink(cfg.out_dir().join("checkpoints"), tag)),
        config: serde_json::to_value(cfg)?,
    })
}

fn finish_report(out: &Path, tag: &str, report: &FitReport) -> Result<()> {
    io::write_json(&out.join(format!("report{tag}.json")), report)?;
    write_with(&out.join(format!("loss{tag}.csv")), |w| io::write_series_csv("loss", &report.loss_history, w))
}

/// Everything a finite-volume fit needs, rebuilt deterministically from the config.
pub struct FvmProblem {
    pub target: Measure,
    pub settings: FvmSettings,
    pub model: VelocityModel,
}

/// Grid and forward-model settings of a `fvm` fit section.
pub fn fvm_settings(cfg: &ExperimentConfig) -> Result<(&Grid, FvmSettings)> {
    let Some(FitSpec::Fvm { grid, diffusion, eps, dt, v_bound, objective, stationary, .. }) = &cfg.fit else {
        return Err(Error::Config("expected a `fvm` fit section".into()));
    };
    let dt = match dt {
        Some(dt) => *dt,
        None => cfl_dt(grid, *diffusion, *v_bound, DEFAULT_SAFETY)?,
    };
    Ok((grid, FvmSettings { diffusion: *diffusion, eps: *eps, dt, objective: *objective, method: *stationary }))
}

pub fn fvm_problem(cfg: &ExperimentConfig) -> Result<FvmProblem> {
    let Some(FitSpec::Fvm { model, .. }) = &cfg.fit else {
        return Err(Error::Config("expected a `fvm` fit section".into()));
    };
    let (grid, settings) = fvm_settings(cfg)?;
    let cloud = pool(&observed_data(cfg)?)?;
    let target = occupation_measure_points(cloud.dim(), cloud.as_flat(), grid, true)?;
    let model = match model {
        ModelSpec::Faces => VelocityModel::Faces(FaceVelocities::zeros(grid)),
        spec => {
            let bbox = (grid.lo.clone(), grid.hi.clone());
            VelocityModel::Field(build_model(spec, &cfg.system, grid.dim(), grid.dim(), &bbox, sub_seed(cfg.seed, STREAM_MODEL))?)
        }
    };
    Ok(FvmProblem { target, settings, model })
}

/// Everything a flow-map fit needs.
pub struct PfoProblem {
    pub mesh: UnstructuredMesh,
    pub sources: SourceSet,
    pub pou: PartitionOfUnity,
    pub target: crate::pfo::UlamMatrix,
    pub flow: FlowSettings,
    pub model: Box<dyn ParametricField>,
}

pub fn pfo_problem(cfg: &ExperimentConfig) -> Result<PfoProblem> {
    let Some(FitSpec::Pfo { n_cells, balanced, mesh_samples, n_sources, pou_eps, flow_dt, substeps, model, .. }) = &cfg.fit else {
        return Err(Error::Config("expected a `pfo` fit section".into()));
    };
    let system = cfg.system.build()?;
    let truth = system.as_ode().ok_or_else(|| Error::Config("flow-map fits need an ODE system".into()))?;
    let cloud = pool(&observed_data(cfg)?)?;
    let mesh = build_mesh(&cloud.strided(*mesh_samples), *n_cells, *balanced, sub_seed(cfg.seed, STREAM_MESH))?;
    let sources = SourceSet::new(&mesh, cloud.strided(*n_sources))?;
    let pou = PartitionOfUnity::new(&mesh, *pou_eps)?;
    let target = flowmap_markov(truth, &sources, &pou, *flow_dt, *substeps)?;
    let bbox = bounding_box(sources.cloud());
    let d = system.dim();
    let model = build_model(model, &cfg.system, d, d, &bbox, sub_seed(cfg.seed, STREAM_MODEL))?;
    Ok(PfoProblem { mesh, sources, pou, target, flow: FlowSettings { flow_dt: *flow_dt, substeps: *substeps }, model })
}

/// Observed orbit, delay configuration and the initial map of a delay fit.
pub struct DelayProblem {
    pub observed: Trajectory,
    pub cfg: DelayMapConfig,
    pub model: MapModel,
    pub losses: Vec<DelayLossKind>,
}

pub fn delay_problem(cfg: &ExperimentConfig) -> Result<DelayProblem> {
    let Some(FitSpec::Delay { observable, m, lag, losses, hidden, residual, output_scale, .. }) = &cfg.fit else {
        return Err(Error::Config("expected a `delay` fit section".into()));
    };
    let observed = observed_data(cfg)?.swap_remove(0);
    let d = observed.dim();
    let dcfg = observable.delay_config(d, *m, *lag)?;
    let spec = ModelSpec::Mlp { hidden: hidden.clone(), output_scale: *output_scale };
    let bbox = bounding_box(&SampleCloud::from_trajectory(&observed));
    let net = build_model(&spec, &cfg.system, d, d, &bbox, sub_seed(cfg.seed, STREAM_MODEL))?;
    Ok(DelayProblem { observed, cfg: dcfg, model: MapModel::learned(net, *residual)?, losses: losses.clone() })
}

fn loss_tag(kind: DelayLossKind) -> &'static str {
    match kind {
        DelayLossKind::J1 => "_j1",
        DelayLossKind::J2 => "_j2",
    }
}

fn map_checkpoint(model: &MapModel) -> Result<ModelCheckpoint> {
    match model {
        MapModel::Learned(l) => Ok(ModelCheckpoint::of_field(l.net.as_ref())),
        MapModel::Known(_) => Err(Error::InvalidArgument("known maps have no checkpoint".into())),
    }
}

/// Runs the configured fit; delay fits produce one report per loss.
pub fn cmd_fit(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<Vec<FitReport>> {
    let fit = need(cfg.fit.as_ref(), "fit")?;
    let out = cfg.out_dir();
    let reports = match fit {
        FitSpec::Fvm { options, .. } => {
            let mut p = fvm_problem(cfg)?;
            let report = fit_fvm(&p.target, &mut p.model, &p.settings, options, cfg.seed, run_control(cfg, resume, "")?)?;
            io::write_measure_json(&p.target, &out.join("target.json"))?;
            io::write_json(&out.join("model.json"), &p.model.checkpoint())?;
            let fitted = fvm_forward(&p.model, p.target.grid().expect("grid target"), &p.settings)?;
            write_with(&out.join("density.csv"), |w| io::write_density_csv(&fitted, w))?;
            finish_report(&out, "", &report)?;
            vec![report]
        }
        FitSpec::Pfo { options, .. } => {
            let mut p = pfo_problem(cfg)?;
            let report = fit_pfo(&p.target, p.model.as_mut(), &p.sources, &p.pou, p.flow, options, cfg.seed, run_control(cfg, resume, "")?)?;
            io::write_mesh_json(&p.mesh, &out.join("mesh.json"))?;
            io::write_ulam(&p.target, &out.join("target.coo"))?;
            io::write_json(&out.join("model.json"), &ModelCheckpoint::of_field(p.model.as_ref()))?;
            finish_report(&out, "", &report)?;
            vec![report]
        }
        FitSpec::Delay { options, .. } => {
            let p = delay_problem(cfg)?;
            let mut reports = Vec::new();
            for &kind in &p.losses {
                let tag = loss_tag(kind);
                let mut model = p.model.clone();
                let report = fit_delay(&p.observed, &mut model, &p.cfg, kind, options, cfg.seed, run_control(cfg, resume, tag)?)?;
                io::write_json(&out.join(format!("model{tag}.json")), &map_checkpoint(&model)?)?;
                finish_report(&out, tag, &report)?;
                reports.push(report);
            }
            reports
        }
    };
    log::info!("fit: final loss {:e}", reports.last().map_or(f64::NAN, |r| r.final_loss()));
    Ok(reports)
}

fn load_field(path: &Path) -> Result<Box<dyn ParametricField>> {
    io::read_json::<ModelCheckpoint>(path)?.to_field()
}

/// Energy MMD between a map's delay measure on the observed states and the observed delay cloud.
pub fn delay_measure_mmd(model: &MapModel, observed: &Trajectory, cfg: &DelayMapConfig) -> Result<f64> {
    let data = DelayData::from_trajectory(observed, cfg)?;
    let pushed = pushforward_delay_measure(&data.mu.strided(MMD_MAX_POINTS), model, cfg)?;
    energy_mmd(&pushed, &data.observed_delay.strided(MMD_MAX_POINTS))
}

/// Analytic invariant density of the builtin maps that have one.
pub fn analytic_density(name: &str) -> Option<fn(&[f64]) -> f64> {
    match name {
        "cat_modified" => Some(|x| 10.0 * x[0].powi(9)),
        n if n == "cat" || n.starts_with("torus") => Some(|_| 1.0),
        _ => None,
    }
}

/// Metrics written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics(pub serde_json::Value);

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Metrics> {
    let spec = need(cfg.eval.as_ref(), "eval")?;
    let out = cfg.out_dir();
    let system = cfg.system.build()?;
    let metrics = match spec {
        EvalSpec::Occupation { use_truth, n_projections, baseline_seed } => {
            let observed = pool(&observed_data(cfg)?)?;
            let fitted: Option<Box<dyn ParametricField>> = if *use_truth { None } else { Some(load_field(&out.join("model.json"))?) };
            let field: &dyn VectorField = match &fitted {
                Some(f) => f.as_ref() as &dyn VectorField,
                None => system.as_ode().ok_or_else(|| Error::Config("occupation eval needs an ODE system".into()))?,
            };
            let seed = baseline_seed.unwrap_or(sub_seed(cfg.seed, STREAM_BASELINE));
            let simulated = pool(&simulate_with(&system, Some(field), &cfg.simulate, seed)?)?;
            let w2 = wasserstein2(&simulated, &observed, *n_projections, sub_seed(cfg.seed, STREAM_EVAL))?;
            write_with(&out.join("simulated.csv"), |w| io::write_cloud_csv(&simulated, w))?;
            if let Some(h) = cfg.histogram.as_ref().map(|h| &h.grid).or(match &cfg.fit {
                Some(FitSpec::Fvm { grid, .. }) => Some(grid),
                _ => None,
            }) {
                let sim_m = occupation_measure_points(simulated.dim(), simulated.as_flat(), h, true)?;
                let obs_m = occupation_measure_points(observed.dim(), observed.as_flat(), h, true)?;
                write_with(&out.join("simulated_density.csv"), |w| io::write_density_csv(&sim_m, w))?;
                write_with(&out.join("observed_density.csv"), |w| io::write_density_csv(&obs_m, w))?;
            }
            let mut metrics = json!({ "kind": "occupation", "w2": w2, "model": if *use_truth { "truth" } else { "fitted" }, "n_simulated": simulated.len(), "n_observed": observed.len(), "n_projections": n_projections });
            if let (Some(f), Some(FitSpec::Fvm { .. })) = (fitted, &cfg.fit) {
                let (grid, settings) = fvm_settings(cfg)?;
                let rho = fvm_forward(&VelocityModel::Field(f), grid, &settings)?;
                let cloud = measure_to_cloud(&rho, CloudMode::CellCenters)?;
                metrics["w2_stationary"] = json!(wasserstein2(&cloud, &observed, *n_projections, sub_seed(cfg.seed, STREAM_EVAL))?);
            }
            metrics
        }
        EvalSpec::Refinement { lo, hi, sizes, diffusion, eps, n_projections, resample } => {
            let truth = system.as_ode().ok_or_else(|| Error::Config("refinement eval needs an ODE system".into()))?;
            let reference = pool(&observed_data(cfg)?)?;
            let mut w2 = Vec::new();
            for &n in sizes {
                let grid = Grid::cube(lo, hi, n)?;
                let m = teleport(&assemble_auto(&FaceVelocities::sample(&grid, truth)?, *diffusion, DEFAULT_SAFETY)?, *eps)?;
                let rho = DirectSolver::new(&m)?.stationary()?;
                let cloud = if *resample == 0 {
                    measure_to_cloud(&rho, CloudMode::CellCenters)?
                } else {
                    measure_to_cloud(&rho, CloudMode::Multinomial { total: *resample, seed: sub_seed(cfg.seed, STREAM_EVAL) })?
                };
                w2.push(wasserstein2(&cloud, &reference, *n_projections, sub_seed(cfg.seed, STREAM_EVAL))?);
                write_with(&out.join(format!("density_{n}.csv")), |w| io::write_density_csv(&rho, w))?;
                log::info!("refinement: {n} per axis, W2 = {:.4e}", w2.last().unwrap());
            }
            let monotone = w2.windows(2).all(|p| p[1] < p[0]);
            json!({ "kind": "refinement", "sizes": sizes, "w2": w2, "monotone": monotone, "n_reference": reference.len() })
        }
        EvalSpec::UlamDensity { n_cells, uniform_per_dim, mesh_samples, quadrature } => {
            let map = system.as_map().ok_or_else(|| Error::Config("Ulam density eval needs a map".into()))?;
            let density = analytic_density(&map.name).ok_or_else(|| Error::Config(format!("no analytic density for `{}`", map.name)))?;
            let (lo, hi) = map.domain.clone().ok_or_else(|| Error::Config("map has no domain box".into()))?;
            let orbits = observed_data(cfg)?;
            let cloud = pool(&orbits)?;
            let uniform = UnstructuredMesh::lattice(&lo, &hi, *uniform_per_dim)?;
            let adapted = build_mesh(&cloud.strided(*mesh_samples), *n_cells, false, sub_seed(cfg.seed, STREAM_MESH))?;
            let mut errors = Vec::new();
            for (tag, mesh) in [("uniform", &uniform), ("unstructured", &adapted)] {
                let (m, counts) = ulam_from_orbits(mesh, &orbits)?;
                let pi = invariant_density(&m, 0.0, 1e-12, 1_000_000)?;
                let err = l1_density_error(mesh, pi.weights(), density, &lo, &hi, *quadrature)?;
                write_with(&out.join(format!("cells_{tag}.csv")), |w| write_cells_csv(mesh, pi.weights(), &counts, w))?;
                log::info!("ulam density: {tag} mesh with {} cells, L1 = {err:.4e}", mesh.n_cells());
                errors.push(err);
            }
            json!({ "kind": "ulam_density", "uniform_l1": errors[0], "unstructured_l1": errors[1], "uniform_cells": uniform.n_cells(), "unstructured_cells": adapted.n_cells(), "n_samples": cloud.len() })
        }
        EvalSpec::FlowMap {} => {
            let p = pfo_problem(cfg)?;
            let fitted = load_field(&out.join("model.json"))?;
            let m = flowmap_markov(fitted.as_ref(), &p.sources, &p.pou, p.flow.flow_dt, p.flow.substeps)?;
            let m0 = flowmap_markov(p.model.as_ref(), &p.sources, &p.pou, p.flow.flow_dt, p.flow.substeps)?;
            io::write_ulam(&m, &out.join("fitted.coo"))?;
            json!({ "kind": "flow_map", "initial_distance": markov_distance(&m0, &p.target)?, "fitted_distance": markov_distance(&m, &p.target)?, "n_cells": p.mesh.n_cells() })
        }
        EvalSpec::DelayMeasure {} => {
            let p = delay_problem(cfg)?;
            let mut entries = serde_json::Map::new();
            entries.insert("initial".into(), json!(delay_measure_mmd(&p.model, &p.observed, &p.cfg)?));
            for &kind in &p.losses {
                let tag = loss_tag(kind);
                let field = load_field(&out.join(format!("model{tag}.json")))?;
                let residual = matches!(&p.model, MapModel::Learned(l) if l.residual);
                let model = MapModel::learned(field, residual)?;
                let mmd = delay_measure_mmd(&model, &p.observed, &p.cfg)?;
                entries.insert(tag.trim_start_matches('_').into(), json!(mmd));
            }
            json!({ "kind": "delay_measure", "delay_mmd": entries, "m": p.cfg.m, "lag": p.cfg.lag })
        }
    };
    io::write_json(&out.join("metrics.json"), &metrics)?;
    Ok(Metrics(metrics))
}

fn write_cells_csv(mesh: &UnstructuredMesh, masses: &[f64], counts: &[usize], w: &mut impl std::io::Write) -> Result<()> {
    let names: Vec<String> = (1..=mesh.dim()).map(|i| format!("c{i}")).collect();
    writeln!(w, "{},mass,sources", names.join(","))?;
    for i in 0..mesh.n_cells() {
        let c: Vec<String> = mesh.center(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", c.join(","), masses[i], counts[i])?;
    }
    Ok(())
}

/// Output of the `delay` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayDiagnostics {
    /// L1 distance between the state-coordinate histograms of the two systems.
    pub state_l1: f64,
    /// Energy MMD between the state clouds.
    pub state_mmd: f64,
    /// Energy MMD between the two delay clouds.
    pub delay_mmd: f64,
    /// Same system, independent data: the sampling noise floor of `delay_mmd`.
    pub baseline_mmd: f64,
    pub m: usize,
    pub lag: usize,
    /// Conjugacy diagnostics; present for maps only.
    pub conjugacy: Option<ConjugacyDiagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyDiagnostics {
    pub delay_mmd: f64,
    pub max_deviation: f64,
}

impl From<ConjugacyReport> for ConjugacyDiagnostics {
    fn from(r: ConjugacyReport) -> Self {
        Self { delay_mmd: r.delay_mmd, max_deviation: r.max_deviation }
    }
}

pub fn cmd_delay(cfg: &ExperimentConfig) -> Result<DelayDiagnostics> {
    let spec = need(cfg.delay.as_ref(), "delay")?;
    let a_sys = cfg.system.build()?;
    let b_sys = spec.other.build()?;
    let dcfg = spec.observable.delay_config(a_sys.dim(), spec.m, spec.lag)?;
    let seed = sub_seed(cfg.seed, STREAM_DATA);
    let a = simulate_system(&a_sys, &cfg.simulate, seed)?;
    let b = simulate_system(&b_sys, &cfg.simulate, seed)?;
    let a2 = simulate_system(&a_sys, &cfg.simulate, sub_seed(cfg.seed, STREAM_BASELINE))?;
    let embed = |orbits: &[Trajectory]| -> Result<SampleCloud> {
        let clouds = orbits.iter().map(|t| delay_embed(t, &dcfg)).collect::<Result<Vec<_>>>()?;
        SampleCloud::new(dcfg.m, clouds.iter().flat_map(|c| c.as_flat().iter().copied()).collect())
    };
    let (da, db, da2) = (embed(&a)?, embed(&b)?, embed(&a2)?);
    let (pa, pb) = (pool(&a)?, pool(&b)?);
    let ha = occupation_measure_points(pa.dim(), pa.as_flat(), &spec.grid, true)?;
    let hb = occupation_measure_points(pb.dim(), pb.as_flat(), &spec.grid, true)?;
    let cap = MMD_MAX_POINTS;
    let conjugacy = match (&a_sys, &b_sys) {
        (System::Map(ma), System::Map(mb)) => {
            Some(verify_conjugacy_diagnostics(&MapModel::Known(ma.clone()), &MapModel::Known(mb.clone()), &pa, &dcfg)?.into())
        }
        _ => None,
    };
    let diag = DelayDiagnostics {
        state_l1: ha.weights().iter().zip(hb.weights()).map(|(x, y)| (x - y).abs()).sum(),
        state_mmd: energy_mmd(&pa.strided(cap), &pb.strided(cap))?,
        delay_mmd: energy_mmd(&da.strided(cap), &db.strided(cap))?,
        baseline_mmd: energy_mmd(&da.strided(cap), &da2.strided(cap))?,
        m: dcfg.m,
        lag: dcfg.lag,
        conjugacy,
    };
    let out = cfg.out_dir();
    write_with(&out.join("delay_a.csv"), |w| io::write_cloud_csv(&da, w))?;
    write_with(&out.join("delay_b.csv"), |w| io::write_cloud_csv(&db, w))?;
    io::write_json(&out.join("diagnostics.json"), &diag)?;
    log::info!("delay: state L1 {:.3e}, delay MMD {:.3e}, baseline {:.3e}", diag.state_l1, diag.delay_mmd, diag.baseline_mmd);
    Ok(diag)
}
