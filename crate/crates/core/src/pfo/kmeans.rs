use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::measure::SampleCloud;

use super::UnstructuredMesh;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Stop once no center moves farther than this.
    pub tol: f64,
    /// Reseeding rounds allowed for cells that end up empty.
    pub max_restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-8, max_restarts: 5 }
    }
}

pub fn build_mesh(samples: &SampleCloud, n_cells: usize, balanced: bool, seed: u64) -> Result<UnstructuredMesh> {
    build_mesh_with(samples, n_cells, balanced, seed, KMeansOptions::default())
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// With `balanced`, samples are then moved greedily out of over-full cells
/// (cheapest extra squared distance first) until every cell holds `N / n`.
pub fn build_mesh_with(samples: &SampleCloud, n_cells: usize, balanced: bool, seed: u64, opts: KMeansOptions) -> Result<UnstructuredMesh> {
    let (n_samples, d) = (samples.len(), samples.dim());
    if n_cells == 0 || n_cells > n_samples {
        return invalid(format!("cannot build {n_cells} cells from {n_samples} samples"));
    }
    if balanced && n_samples % n_cells != 0 {
        return invalid(format!("balanced mesh needs N = {n_samples} divisible by n = {n_cells}"));
    }
    let x = samples.as_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_plus_plus(x, d, n_cells, &mut rng);
    let mut labels = vec![0usize; n_samples];
    let mut restarts = 0;
    loop {
        lloyd(x, d, &mut centers, &mut labels, opts);
        let counts = count(&labels, n_cells);
        let empty: Vec<usize> = (0..n_cells).filter(|&c| counts[c] == 0).collect();
        if empty.is_empty() {
            break;
        }
        if restarts == opts.max_restarts {
            return Err(Error::EmptyCell(empty[0]));
        }
        restarts += 1;
        // Move each empty center onto the sample currently worst served.
        let mut cost: Vec<f64> = (0..n_samples).map(|k| sq_dist(&x[k * d..(k + 1) * d], &centers[labels[k] * d..(labels[k] + 1) * d])).collect();
        for &c in &empty {
            let far = argmax(&cost);
            centers[c * d..(c + 1) * d].copy_from_slice(&x[far * d..(far + 1) * d]);
            cost[far] = -1.0;
        }
    }
    if balanced {
        balance(x, d, &centers, &mut labels, n_samples / n_cells);
    }
    Ok(UnstructuredMesh::from_centers(d, centers)?.with_labels(labels))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn count(labels: &[usize], n: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    labels.iter().for_each(|&l| c[l] += 1);
    c
}

fn seed_plus_plus(x: &[f64], d: usize, n_cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.len() / d;
    let mut centers = Vec::with_capacity(n_cells * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut best: Vec<f64> = (0..n).map(|k| sq_dist(&x[k * d..(k + 1) * d], &centers[..d])).collect();
    for _ in 1..n_cells {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (k, &w) in best.iter().enumerate() {
                if target < w {
                    pick = k;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = x[pick * d..(pick + 1) * d].to_vec();
        for (k, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(&x[k * d..(k + 1) * d], &c));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

fn nearest(x: &[f64], centers: &[f64], d: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centers.chunks_exact(d).enumerate() {
        let d2 = sq_dist(x, c);
        if d2 < best.0 {
            best = (d2, i);
        }
    }
    best.1
}

fn lloyd(x: &[f64], d: usize, centers: &mut [f64], labels: &mut [usize], opts: KMeansOptions) {
    let n_cells = centers.len() / d;
    for _ in 0..opts.max_iters {
        for (k, l) in labels.iter_mut().enumerate() {
            *l = nearest(&x[k * d..(k + 1) * d], centers, d);
        }
        let mut sums = vec![0.0; n_cells * d];
        let mut counts = vec![0usize; n_cells];
        for (k, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            sums[l * d..(l + 1) * d].iter_mut().zip(&x[k * d..(k + 1) * d]).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for c in 0..n_cells {
            if counts[c] == 0 {
                continue;
            }
            for k in 0..d {
                let new = sums[c * d + k] / counts[c] as f64;
                shift = shift.max((new - centers[c * d + k]).abs());
                centers[c * d + k] = new;
            }
        }
        if shift <= opts.tol {
            break;
        }
    }
    for (k, l) in labels.iter_mut().enumerate() {
        *l = nearest(&x[k * d..(k + 1) * d], centers, d);
    }
}

fn balance(x: &[f64], d: usize, centers: &[f64], labels: &mut [usize], quota: usize) {
    let n_cells = centers.len() / d;
    let mut counts = count(labels, n_cells);
    while counts.iter().any(|&c| c > quota) {
        // Cheapest move for every sample of an over-full cell into a cell with room.
        let mut moves: Vec<(f64, usize, usize)> = Vec::new();
        for (k, &l) in labels.iter().enumerate() {
            if counts[l] <= quota {
                continue;
            }
            let xk = &x[k * d..(k + 1) * d];
            let here = sq_dist(xk, &centers[l * d..(l + 1) * d]);
            let mut best = (f64::INFINITY, usize::MAX);
            for c in 0..n_cells {
                if counts[c] < quota {
                    let cost = sq_dist(xk, &centers[c * d..(c + 1) * d]) - here;
                    if cost < best.0 {
                        best = (cost, c);
                    }
                }
            }
            moves.push((best.0, k, best.1));
        }
        moves.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, k, target) in moves {
            let src = labels[k];
            if counts[src] > quota && counts[target] < quota {
                labels[k] = target;
                counts[src] -= 1;
                counts[target] += 1;
            }
        }
    }
}
