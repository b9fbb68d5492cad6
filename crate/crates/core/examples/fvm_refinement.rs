//! Stationary Fokker-Planck densities of Van der Pol on refined grids,
//! compared with a long stochastic simulation.

use std::time::Instant;

use ergodic_sysid::fvm::{assemble_auto, teleport, DirectSolver, FaceVelocities, DEFAULT_SAFETY};
use ergodic_sysid::measure::{measure_to_cloud, wasserstein2, CloudMode, Grid, SampleCloud};
use ergodic_sysid::systems::{integrate_sde, van_der_pol};

fn main() -> ergodic_sysid::Result<()> {
    let vdp = van_der_pol(1.0);
    let diffusion = 0.001;
    let reference = integrate_sde(&vdp, diffusion, &[2.0, 0.0], 0.01, 300_000, 1, 0)?.skip(2000)?;
    let reference = SampleCloud::from_trajectory(&reference);

    for n in [25, 50, 100] {
        let t = Instant::now();
        let grid = Grid::cube(&[-3.5, -3.5], &[3.5, 3.5], n)?;
        let op = assemble_auto(&FaceVelocities::sample(&grid, &vdp)?, diffusion, DEFAULT_SAFETY)?;
        let rho = DirectSolver::new(&teleport(&op, 1e-8)?)?.stationary()?;
        let w2 = wasserstein2(&measure_to_cloud(&rho, CloudMode::CellCenters)?, &reference, 64, 0)?;
        println!("{n:>4}^2 cells: W2 = {w2:.4} ({:.2?})", t.elapsed());
    }
    Ok(())
}
