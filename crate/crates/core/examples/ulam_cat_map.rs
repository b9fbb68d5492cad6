//! Invariant density of the modified cat map from orbit data: a uniform
//! 20x20 partition against a k-means mesh with the same number of cells.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ergodic_sysid::measure::SampleCloud;
use ergodic_sysid::pfo::{build_mesh, invariant_density, l1_density_error, ulam_from_orbits, UnstructuredMesh};
use ergodic_sysid::systems::{builtin, iterate_map, Trajectory};

fn main() -> ergodic_sysid::Result<()> {
    let t0 = Instant::now();
    let sys = builtin("cat_modified", &Default::default())?;
    let map = sys.as_map().expect("cat map is discrete");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let orbits: Vec<Trajectory> = (0..2000)
        .map(|_| iterate_map(map, &[rng.random(), rng.random()], 500))
        .collect::<ergodic_sysid::Result<_>>()?;
    let pooled: Vec<f64> = orbits.iter().flat_map(|t| t.as_flat().iter().copied()).collect();
    let cloud = SampleCloud::new(2, pooled)?;

    let density = |x: &[f64]| 10.0 * x[0].powi(9);
    let uniform = UnstructuredMesh::lattice(&[0.0, 0.0], &[1.0, 1.0], 20)?;
    let adapted = build_mesh(&cloud.strided(20_000), 400, false, 0)?;
    for (name, mesh) in [("uniform", &uniform), ("k-means", &adapted)] {
        let (m, _) = ulam_from_orbits(mesh, &orbits)?;
        let pi = invariant_density(&m, 0.0, 1e-12, 100_000)?;
        let err = l1_density_error(mesh, pi.weights(), density, &[0.0, 0.0], &[1.0, 1.0], 300)?;
        println!("{name:>8} mesh, {} cells: L1 density error {err:.4}", mesh.n_cells());
    }
    println!("done in {:.1?}", t0.elapsed());
    Ok(())
}
