//! Monte-Carlo Ulam matrix of the doubling map on two cells. The exact matrix
//! has every entry 1/2, so the entrywise error shrinks like N^(-1/2).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ergodic_sysid::measure::SampleCloud;
use ergodic_sysid::pfo::{estimate_markov, PartitionOfUnity, SourceSet, UnstructuredMesh};

fn main() -> ergodic_sysid::Result<()> {
    let mesh = UnstructuredMesh::lattice(&[0.0], &[1.0], 2)?;
    let pou = PartitionOfUnity::new(&mesh, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [100, 1_000, 10_000, 100_000] {
        let xs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let images: Vec<f64> = xs.iter().map(|x| (2.0 * x) % 1.0).collect();
        let sources = SourceSet::new(&mesh, SampleCloud::new(1, xs)?)?;
        let m = estimate_markov(&sources, &SampleCloud::new(1, images)?, &pou)?;
        let err = m.as_slice().iter().map(|p| (p - 0.5).abs()).fold(0.0, f64::max);
        println!("N = {n:>6}: max |M - 1/2| = {err:.2e}, sqrt(N) * err = {:.3}", err * (n as f64).sqrt());
    }
    Ok(())
}
