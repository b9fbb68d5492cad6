//! Distances between measures and sample clouds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{Measure, SampleCloud};
use crate::error::{Error, Result};

/// Rows per parallel block in pairwise sums; fixed so reductions are bit-stable.
const PAIR_BLOCK: usize = 128;

/// `1/2 * integral |rho_a - rho_b|^2` of the piecewise-constant densities.
pub fn l2_distance(a: &Measure, b: &Measure) -> Result<f64> {
    a.same_support(b)?;
    let vol = a.support().cell_volume();
    let sq: f64 = a.weights().iter().zip(b.weights()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(0.5 * sq / vol)
}

/// `sum b log(b / a)` restricted to cells where both weights are positive.
pub fn kl_divergence(a: &Measure, b: &Measure) -> Result<f64> {
    a.same_support(b)?;
    Ok(a.weights()
        .iter()
        .zip(b.weights())
        .filter(|(p, q)| **p > 0.0 && **q > 0.0)
        .map(|(p, q)| q * (q / p).ln())
        .sum())
}

fn check_pair(a: &SampleCloud, b: &SampleCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Exact squared W2 between two weighted point masses on the line, via the
/// monotone (quantile) coupling.
fn w2_squared_1d(mut a: Vec<(f64, f64)>, mut b: Vec<(f64, f64)>) -> f64 {
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    loop {
        let m = ra.min(rb);
        let gap = a[i].0 - b[j].0;
        cost += m * gap * gap;
        ra -= m;
        rb -= m;
        if ra <= 0.0 {
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1;
        }
        if rb <= 0.0 {
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    cost
}

fn projected(cloud: &SampleCloud, dir: &[f64]) -> Vec<(f64, f64)> {
    cloud
        .points()
        .enumerate()
        .map(|(k, p)| (p.iter().zip(dir).map(|(x, u)| x * u).sum(), cloud.weight(k)))
        .collect()
}

/// Squared 2-Wasserstein distance. Exact in one dimension; in higher
/// dimensions the sliced estimate averaged over `n_projections` random unit
/// directions drawn from `seed`.
pub fn wasserstein2_squared(a: &SampleCloud, b: &SampleCloud, n_projections: usize, seed: u64) -> Result<f64> {
    check_pair(a, b)?;
    let d = a.dim();
    if d == 1 {
        return Ok(w2_squared_1d(projected(a, &[1.0]), projected(b, &[1.0])));
    }
    let n_projections = n_projections.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        total += w2_squared_1d(projected(a, &dir), projected(b, &dir));
    }
    Ok(total / n_projections as f64)
}

/// Unsquared 2-Wasserstein distance; see [`wasserstein2_squared`].
pub fn wasserstein2(a: &SampleCloud, b: &SampleCloud, n_projections: usize, seed: u64) -> Result<f64> {
    Ok(wasserstein2_squared(a, b, n_projections, seed)?.max(0.0).sqrt())
}

#[inline]
fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// `sum_ij w_i u_j |x_i - y_j|` with a deterministic blocked reduction.
fn cross_sum(a: &SampleCloud, b: &SampleCloud) -> f64 {
    let d = a.dim();
    let partials: Vec<f64> = a
        .as_flat()
        .par_chunks(PAIR_BLOCK * d)
        .enumerate()
        .map(|(blk, rows)| {
            let mut acc = 0.0;
            for (r, x) in rows.chunks_exact(d).enumerate() {
                let wi = a.weight(blk * PAIR_BLOCK + r);
                let mut row = 0.0;
                for (j, y) in b.points().enumerate() {
                    row += b.weight(j) * dist(x, y);
                }
                acc += wi * row;
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Within-cloud term `sum_ik w_i w_k |x_i - x_k|` (self pairs contribute 0).
pub fn energy_self_term(a: &SampleCloud) -> f64 {
    cross_sum(a, a)
}

/// Energy-distance MMD (V-statistic):
/// `E|X-Y| - 1/2 E|X-X'| - 1/2 E|Y-Y'|`, self pairs included.
pub fn energy_mmd(a: &SampleCloud, b: &SampleCloud) -> Result<f64> {
    check_pair(a, b)?;
    let value = cross_sum(a, b) - 0.5 * cross_sum(a, a) - 0.5 * cross_sum(b, b);
    Ok(value.max(0.0))
}

/// [`energy_mmd`] together with its gradient with respect to the points of
/// `a` (flat, same layout as `a`). `b_self` may carry a cached
/// [`energy_self_term`] of `b`.
pub fn energy_mmd_with_grad(a: &SampleCloud, b: &SampleCloud, b_self: Option<f64>) -> Result<(f64, Vec<f64>)> {
    check_pair(a, b)?;
    let d = a.dim();
    let per_row: Vec<(f64, f64, Vec<f64>)> = a
        .as_flat()
        .par_chunks(d)
        .enumerate()
        .map(|(i, x)| {
            let wi = a.weight(i);
            let mut g = vec![0.0; d];
            let mut cross = 0.0;
            for (j, y) in b.points().enumerate() {
                let r = dist(x, y);
                let wj = b.weight(j);
                cross += wj * r;
                if r > 0.0 {
                    for k in 0..d {
                        g[k] += wj * (x[k] - y[k]) / r;
                    }
                }
            }
            let mut within = 0.0;
            for (k2, y) in a.points().enumerate() {
                let r = dist(x, y);
                let wk = a.weight(k2);
                within += wk * r;
                if r > 0.0 {
                    for k in 0..d {
                        g[k] -= wk * (x[k] - y[k]) / r;
                    }
                }
            }
            g.iter_mut().for_each(|v| *v *= wi);
            (wi * cross, wi * within, g)
        })
        .collect();
    let cross: f64 = per_row.iter().map(|r| r.0).sum();
    let within: f64 = per_row.iter().map(|r| r.1).sum();
    let bb = b_self.unwrap_or_else(|| cross_sum(b, b));
    let grad = per_row.into_iter().flat_map(|r| r.2).collect();
    Ok((cross - 0.5 * within - 0.5 * bb, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{Grid, Support};
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud1(v: &[f64]) -> SampleCloud {
        SampleCloud::new(1, v.to_vec()).unwrap()
    }

    fn random_cloud(n: usize, d: usize, seed: u64, shift: f64) -> SampleCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampleCloud::new(d, (0..n * d).map(|_| rng.random::<f64>() + shift).collect()).unwrap()
    }

    #[test]
    fn l2_cases() {
        let g = Grid::cube(&[0.0, 0.0], &[0.5, 0.5], 3).unwrap();
        let vol = g.cell_volume();
        let a = Measure::one_hot(Support::Grid(g.clone()), 0).unwrap();
        let b = Measure::one_hot(Support::Grid(g.clone()), 4).unwrap();
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
        assert!((l2_distance(&a, &b).unwrap() - 1.0 / vol).abs() < 1e-12);

        // Dense quadrature of the piecewise-constant densities.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Measure::normalized((0..9).map(|_| rng.random()).collect(), Support::Grid(g.clone())).unwrap();
        let q = Measure::normalized((0..9).map(|_| rng.random()).collect(), Support::Grid(g.clone())).unwrap();
        let h = g.spacing(0);
        let m = 60;
        let mut integral = 0.0;
        for ix in 0..3 * m {
            for iy in 0..3 * m {
                let x = -h / 2.0 + (ix as f64 + 0.5) * h / m as f64;
                let y = -h / 2.0 + (iy as f64 + 0.5) * h / m as f64;
                let j = g.locate_clamped(&[x, y]);
                let diff = (p.weights()[j] - q.weights()[j]) / vol;
                integral += diff * diff * (h / m as f64).powi(2);
            }
        }
        assert!((l2_distance(&p, &q).unwrap() - 0.5 * integral).abs() < 1e-9);
        let other = Measure::uniform(Support::Cells(vec![0, 1]));
        assert!(matches!(l2_distance(&a, &other), Err(Error::SupportMismatch(_))));
    }

    #[test]
    fn kl_cases() {
        let s = Support::Cells(vec![0, 1]);
        let half = Measure::uniform(s.clone());
        let hot = Measure::new(vec![1.0, 0.0], s.clone()).unwrap();
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);
        assert!((kl_divergence(&half, &hot).unwrap() - 2f64.ln()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s6 = Support::Cells((0..6).collect());
        for _ in 0..100 {
            let a = Measure::normalized((0..6).map(|_| rng.random::<f64>() + 1e-3).collect(), s6.clone()).unwrap();
            let b = Measure::normalized((0..6).map(|_| rng.random::<f64>() + 1e-3).collect(), s6.clone()).unwrap();
            assert!(kl_divergence(&a, &b).unwrap() >= -1e-15);
        }
        let a = Measure::new(vec![0.9, 0.1], s.clone()).unwrap();
        let b = Measure::new(vec![0.5, 0.5], s).unwrap();
        assert!((kl_divergence(&a, &b).unwrap() - kl_divergence(&b, &a).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn w2_point_masses() {
        assert!((wasserstein2(&cloud1(&[0.0]), &cloud1(&[1.0]), 8, 0).unwrap() - 1.0).abs() < 1e-15);
        let a = random_cloud(50, 2, 3, 0.0);
        assert_eq!(wasserstein2(&a, &a, 16, 0).unwrap(), 0.0);
        assert!(matches!(
            wasserstein2(&a, &cloud1(&[0.0]), 4, 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn w2_uniform_intervals() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let a = cloud1(&(0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        let b = cloud1(&(0..n).map(|_| 2.0 * rng.random::<f64>()).collect::<Vec<_>>());
        let w = wasserstein2_squared(&a, &b, 1, 0).unwrap();
        assert!((w - 1.0 / 3.0).abs() < 0.05 / 3.0, "{w}");
    }

    #[test]
    fn weighted_w2_matches_expanded() {
        let a = SampleCloud::weighted(1, vec![0.0, 1.0], vec![0.25, 0.75]).unwrap();
        let expanded = cloud1(&[0.0, 1.0, 1.0, 1.0]);
        let b = cloud1(&[0.3, 0.5, 0.9]);
        let w1 = wasserstein2_squared(&a, &b, 1, 0).unwrap();
        let w2 = wasserstein2_squared(&expanded, &b, 1, 0).unwrap();
        assert!((w1 - w2).abs() < 1e-15);
    }

    #[test]
    fn mmd_cases() {
        assert!((energy_mmd(&cloud1(&[0.0]), &cloud1(&[1.0])).unwrap() - 1.0).abs() < 1e-15);
        let a = random_cloud(40, 3, 2, 0.0);
        assert!(energy_mmd(&a, &a).unwrap().abs() < 1e-12);
        let b = random_cloud(30, 3, 9, 0.5);
        let rev: Vec<f64> = b.points().collect::<Vec<_>>().into_iter().rev().flatten().copied().collect();
        let b_rev = SampleCloud::new(3, rev).unwrap();
        let (x, y) = (energy_mmd(&a, &b).unwrap(), energy_mmd(&a, &b_rev).unwrap());
        assert!((x - y).abs() < 1e-12);
        assert!(x > 0.0);
        assert!(matches!(SampleCloud::new(3, vec![]), Err(Error::EmptyCloud)));
    }

    #[test]
    fn mmd_gradient_matches_differences() {
        let a = random_cloud(12, 2, 4, 0.0);
        let b = random_cloud(9, 2, 6, 0.3);
        let (v, g) = energy_mmd_with_grad(&a, &b, None).unwrap();
        assert!((v - energy_mmd(&a, &b).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for idx in [0, 5, 13, 23] {
            let mut plus = a.as_flat().to_vec();
            let mut minus = a.as_flat().to_vec();
            plus[idx] += h;
            minus[idx] -= h;
            let fp = energy_mmd(&SampleCloud::new(2, plus).unwrap(), &b).unwrap();
            let fm = energy_mmd(&SampleCloud::new(2, minus).unwrap(), &b).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[idx]);
        }
    }

    proptest! {
        #[test]
        fn sliced_w2_in_1d_is_exact(seed in 0u64..200, proj in 1usize..20) {
            let a = random_cloud(30, 1, seed, 0.0);
            let b = random_cloud(20, 1, seed + 1000, 0.2);
            let exact = w2_squared_1d(projected(&a, &[1.0]), projected(&b, &[1.0]));
            prop_assert!((wasserstein2_squared(&a, &b, proj, seed).unwrap() - exact).abs() < 1e-12);
            // A -1 direction gives the same cost.
            let flipped = w2_squared_1d(projected(&a, &[-1.0]), projected(&b, &[-1.0]));
            prop_assert!((flipped - exact).abs() < 1e-12);
        }

        #[test]
        fn mmd_rotation_invariant(seed in 0u64..100, angle in 0.0f64..6.28) {
            let a = random_cloud(25, 2, seed, 0.0);
            let b = random_cloud(25, 2, seed + 500, 0.4);
            let (c, s) = (angle.cos(), angle.sin());
            let rot = |cl: &SampleCloud| {
                SampleCloud::new(2, cl.points().flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect()).unwrap()
            };
            let before = energy_mmd(&a, &b).unwrap();
            let after = energy_mmd(&rot(&a), &rot(&b)).unwrap();
            prop_assert!((before - after).abs() < 1e-10);
        }

        #[test]
        fn distances_symmetric(seed in 0u64..100) {
            let a = random_cloud(15, 2, seed, 0.0);
            let b = random_cloud(10, 2, seed + 77, 0.1);
            prop_assert!((energy_mmd(&a, &b).unwrap() - energy_mmd(&b, &a).unwrap()).abs() < 1e-12);
            let ab = wasserstein2(&a, &b, 8, seed).unwrap();
            let ba = wasserstein2(&b, &a, 8, seed).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
