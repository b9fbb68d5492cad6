//! The distances used to compare measures: L2 and KL on grids, sliced W2 and
//! energy MMD on sample clouds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ergodic_sysid::measure::{energy_mmd, kl_divergence, l2_distance, occupation_measure_points, wasserstein2, Grid, SampleCloud};

fn uniform(n: usize, scale: f64, seed: u64) -> SampleCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SampleCloud::new(1, (0..n).map(|_| scale * rng.random::<f64>()).collect()).unwrap()
}

fn main() -> ergodic_sysid::Result<()> {
    let a = uniform(10_000, 1.0, 1);
    let b = uniform(10_000, 2.0, 2);
    // Quantile functions u and 2u differ by u, so W2^2 = 1/3.
    println!("W2(U[0,1], U[0,2]) = {:.4} (exact {:.4})", wasserstein2(&a, &b, 1, 0)?, (1.0f64 / 3.0).sqrt());
    println!("energy MMD         = {:.4}", energy_mmd(&a, &b)?);
    println!("energy MMD (self)  = {:.2e}", energy_mmd(&a, &uniform(10_000, 1.0, 3))?);

    let grid = Grid::cube(&[0.0], &[2.0], 20)?;
    let ra = occupation_measure_points(1, a.as_flat(), &grid, true)?;
    let rb = occupation_measure_points(1, b.as_flat(), &grid, true)?;
    println!("L2 = {:.4}, KL(b | a) = {:.4}", l2_distance(&ra, &rb)?, kl_divergence(&rb, &ra)?);
    Ok(())
}
