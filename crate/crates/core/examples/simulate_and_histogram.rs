//! Simulate the stochastic Van der Pol oscillator and bin its occupation measure.
//!
//! Run with `cargo run --release --example simulate_and_histogram`.

use std::collections::BTreeMap;

use ergodic_sysid::measure::{occupation_measure, Grid};
use ergodic_sysid::systems::{builtin, integrate_sde};

fn main() -> ergodic_sysid::Result<()> {
    let vdp = builtin("vdp", &BTreeMap::from([("c".to_string(), 1.0)]))?;
    let field = vdp.as_ode().expect("vdp is a flow");
    let traj = integrate_sde(field, 0.01, &[2.0, 0.0], 0.01, 200_000, 1, 7)?.skip(1000)?;

    let grid = Grid::cube(&[-3.0, -3.0], &[3.0, 3.0], 30)?;
    let rho = occupation_measure(&traj, &grid, true)?;
    let density = rho.density();
    let (peak, &max) = density.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let occupied = rho.weights().iter().filter(|&&w| w > 0.0).count();
    println!("{} states, {occupied}/{} cells occupied", traj.len(), grid.n_cells());
    println!("peak density {max:.3} at {:?}", grid.center(peak));
    Ok(())
}
