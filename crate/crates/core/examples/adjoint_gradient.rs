//! Adjoint-state gradient of a stationary-density mismatch, checked against
//! central differences.

use ergodic_sysid::fvm::{cfl_dt, StationaryMethod, DEFAULT_SAFETY};
use ergodic_sysid::measure::{Grid, ObjectiveKind};
use ergodic_sysid::optim::{fvm_forward, fvm_loss_and_grad, gradient_spot_check, FvmSettings};
use ergodic_sysid::velocity::{InitScheme, Mlp, VelocityModel};

fn main() -> ergodic_sysid::Result<()> {
    let grid = Grid::cube(&[-1.0], &[1.0], 16)?;
    let settings = FvmSettings {
        diffusion: 0.05,
        eps: 1e-3,
        dt: cfl_dt(&grid, 0.05, 5.0, DEFAULT_SAFETY)?,
        objective: ObjectiveKind::L2,
        method: StationaryMethod::Direct,
    };
    let truth = VelocityModel::Field(Box::new(Mlp::new(&[1, 8, 1], InitScheme::Xavier, 1)?));
    let target = fvm_forward(&truth, &grid, &settings)?;

    let model = VelocityModel::Field(Box::new(Mlp::new(&[1, 12, 12, 1], InitScheme::Xavier, 2)?));
    let theta = model.params();
    println!("{} parameters", theta.len());
    let checks = gradient_spot_check(&theta, &[0, 17, 60, 101, theta.len() - 1], 1e-6, |t| {
        let mut m = model.clone();
        m.set_params(t)?;
        fvm_loss_and_grad(&m, &target, &settings)
    })?;
    for (i, analytic, fd, rel) in checks {
        println!("theta[{i:>3}]  adjoint {analytic:+.6e}  fd {fd:+.6e}  rel {rel:.1e}");
    }
    Ok(())
}
