//! Recover a cubic drift from its stationary density.

use ergodic_sysid::fvm::{cfl_dt, FaceVelocities, StationaryMethod, DEFAULT_SAFETY};
use ergodic_sysid::measure::{Grid, ObjectiveKind};
use ergodic_sysid::optim::{fit_fvm, fvm_forward, AdamConfig, FitOptions, FvmSettings, RunControl};
use ergodic_sysid::systems::double_well;
use ergodic_sysid::velocity::{LinearFeatures, VelocityModel};

fn main() -> ergodic_sysid::Result<()> {
    let grid = Grid::cube(&[-2.0], &[2.0], 32)?;
    let settings = FvmSettings {
        diffusion: 0.1,
        eps: 1e-3,
        dt: cfl_dt(&grid, 0.1, 6.0, DEFAULT_SAFETY)?,
        objective: ObjectiveKind::L2,
        method: StationaryMethod::Direct,
    };
    let truth = VelocityModel::Faces(FaceVelocities::sample(&grid, &double_well(1.0))?);
    let target = fvm_forward(&truth, &grid, &settings)?;

    let features = LinearFeatures::new(1, 1, 3);
    let names: Vec<String> = features.exponents().iter().map(|e| format!("x^{}", e[0])).collect();
    let mut model = VelocityModel::Field(Box::new(features));
    let opts = FitOptions { n_iters: 2000, adam: AdamConfig { lr: 0.05, ..AdamConfig::default() }, ..FitOptions::default() };
    let report = fit_fvm(&target, &mut model, &settings, &opts, 0, RunControl::default())?;

    println!("loss {:.3e} -> {:.3e}", report.initial_loss(), report.final_loss());
    for (name, c) in names.iter().zip(model.params()) {
        println!("  {name}: {c:+.3}");
    }
    Ok(())
}
