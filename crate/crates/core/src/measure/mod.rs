//! Discrete and empirical probability measures.
//!
//! A [`Measure`] is a probability vector bound to a [`Grid`] or to a list of
//! unstructured cells; a [`SampleCloud`] is a finite (optionally weighted)
//! point set. Distances live in [`distance`], differentiable objectives on
//! grid measures in [`objective`].

pub mod distance;
mod grid;
pub mod objective;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

pub use distance::{energy_mmd, energy_mmd_with_grad, kl_divergence, l2_distance, wasserstein2, wasserstein2_squared};
pub use grid::Grid;
pub use objective::{KlObjective, L2Objective, Objective, ObjectiveKind, QuadraticObjective};

use crate::error::{invalid, Error, Result};
use crate::systems::Trajectory;

/// Tolerance on the total mass of a probability vector.
pub const MASS_TOL: f64 = 1e-12;

/// Where the weights of a [`Measure`] live.
#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    Grid(Grid),
    /// Unstructured cells identified by integer labels; unit volume each.
    Cells(Vec<usize>),
}

impl Support {
    pub fn len(&self) -> usize {
        match self {
            Support::Grid(g) => g.n_cells(),
            Support::Cells(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        match self {
            Support::Grid(g) => g.cell_volume(),
            Support::Cells(_) => 1.0,
        }
    }
}

/// A probability vector over cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    weights: Vec<f64>,
    support: Support,
}

impl Measure {
    /// Validates nonnegativity and unit mass.
    pub fn new(weights: Vec<f64>, support: Support) -> Result<Self> {
        if weights.len() != support.len() {
            return Err(Error::SupportMismatch(format!(
                "{} weights for {} cells",
                weights.len(),
                support.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return invalid(format!("measure weight {w} is not a finite nonnegative number"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return invalid(format!("measure mass is {total}, expected 1"));
        }
        Ok(Self { weights, support })
    }

    /// Clamps tiny negatives to zero and rescales to unit mass.
    pub fn normalized(mut weights: Vec<f64>, support: Support) -> Result<Self> {
        for w in weights.iter_mut() {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return invalid("cannot normalize a measure with zero or non-finite mass");
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(weights, support)
    }

    pub fn uniform(support: Support) -> Self {
        let n = support.len();
        Self {
            weights: vec![1.0 / n as f64; n],
            support,
        }
    }

    pub fn one_hot(support: Support, cell: usize) -> Result<Self> {
        let mut weights = vec![0.0; support.len()];
        match weights.get_mut(cell) {
            Some(w) => *w = 1.0,
            None => return invalid(format!("cell {cell} out of range")),
        }
        Self::new(weights, support)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn grid(&self) -> Option<&Grid> {
        match &self.support {
            Support::Grid(g) => Some(g),
            Support::Cells(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Piecewise-constant density values (weight / cell volume).
    pub fn density(&self) -> Vec<f64> {
        let v = self.support.cell_volume();
        self.weights.iter().map(|w| w / v).collect()
    }

    pub(crate) fn same_support(&self, other: &Measure) -> Result<()> {
        if self.support != other.support {
            return Err(Error::SupportMismatch("measures live on different supports".into()));
        }
        Ok(())
    }
}

/// On-disk form of a measure: `{ "grid": {...} | "cells": [...], "weights": [...] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl From<&Measure> for MeasureFile {
    fn from(m: &Measure) -> Self {
        let (grid, cells) = match &m.support {
            Support::Grid(g) => (Some(g.clone()), None),
            Support::Cells(c) => (None, Some(c.clone())),
        };
        Self {
            grid,
            cells,
            weights: m.weights.clone(),
        }
    }
}

impl TryFrom<MeasureFile> for Measure {
    type Error = Error;

    fn try_from(f: MeasureFile) -> Result<Self> {
        let support = match (f.grid, f.cells) {
            (Some(g), None) => {
                g.validate()?;
                Support::Grid(g)
            }
            (None, Some(c)) => Support::Cells(c),
            _ => return Err(Error::Parse("measure needs exactly one of `grid` or `cells`".into())),
        };
        Measure::new(f.weights, support)
    }
}

/// A finite point set in `R^d`, uniformly weighted unless weights are given.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    dim: usize,
    points: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl SampleCloud {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::EmptyCloud);
        }
        if points.iter().any(|v| !v.is_finite()) {
            return invalid("sample cloud contains non-finite values");
        }
        Ok(Self { dim, points, weights: None })
    }

    /// Weighted cloud; weights are normalized to unit mass.
    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut cloud = Self::new(dim, points)?;
        if weights.len() != cloud.len() {
            return invalid("one weight per point required");
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
            return invalid("cloud weights must be nonnegative with positive total");
        }
        cloud.weights = Some(weights.into_iter().map(|w| w / total).collect());
        Ok(cloud)
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, |p| p.len());
        if points.iter().any(|p| p.len() != dim) {
            return invalid("ragged sample cloud");
        }
        Self::new(dim, points.concat())
    }

    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            dim: traj.dim(),
            points: traj.as_flat().to_vec(),
            weights: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    /// Explicit weights, or `None` for uniform.
    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn weight(&self, k: usize) -> f64 {
        match &self.weights {
            Some(w) => w[k],
            None => 1.0 / self.len() as f64,
        }
    }

    /// Deterministic strided subsample keeping at most `max_points` points.
    pub fn strided(&self, max_points: usize) -> SampleCloud {
        let n = self.len();
        if n <= max_points || max_points == 0 {
            return self.clone();
        }
        let stride = n.div_ceil(max_points);
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        let points = idx.iter().flat_map(|&k| self.point(k).iter().copied()).collect();
        let weights = self
            .weights
            .as_ref()
            .map(|w| idx.iter().map(|&k| w[k]).collect::<Vec<_>>());
        match weights {
            Some(w) => SampleCloud::weighted(self.dim, points, w).expect("subsample of a valid cloud"),
            None => SampleCloud { dim: self.dim, points, weights: None },
        }
    }

    /// Coordinate projection onto the listed axes.
    pub fn project(&self, axes: &[usize]) -> Result<SampleCloud> {
        if axes.is_empty() || axes.iter().any(|&a| a >= self.dim) {
            return invalid("projection axes out of range");
        }
        let points = self.points().flat_map(|p| axes.iter().map(move |&a| p[a])).collect();
        Ok(SampleCloud {
            dim: axes.len(),
            points,
            weights: self.weights.clone(),
        })
    }
}

/// Histogram of trajectory samples over grid cells.
pub fn occupation_measure(traj: &Trajectory, grid: &Grid, clip: bool) -> Result<Measure> {
    occupation_measure_points(traj.dim(), traj.as_flat(), grid, clip)
}

/// [`occupation_measure`] for a flat point buffer.
pub fn occupation_measure_points(dim: usize, points: &[f64], grid: &Grid, clip: bool) -> Result<Measure> {
    if dim != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: dim,
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut counts = vec![0usize; grid.n_cells()];
    for (index, x) in points.chunks_exact(dim).enumerate() {
        let cell = if clip {
            grid.locate_clamped(x)
        } else {
            grid.locate(x).ok_or_else(|| Error::OutOfDomain {
                index,
                point: x.to_vec(),
            })?
        };
        counts[cell] += 1;
    }
    let n = (points.len() / dim) as f64;
    Measure::normalized(
        counts.into_iter().map(|c| c as f64 / n).collect(),
        Support::Grid(grid.clone()),
    )
}

/// How [`measure_to_cloud`] turns cell weights into points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloudMode {
    /// One point per cell with positive weight, carrying that weight.
    CellCenters,
    /// `total` equally weighted points, allocated by largest remainder.
    Proportional { total: usize },
    /// `total` points drawn i.i.d. from the cell weights.
    Multinomial { total: usize, seed: u64 },
}

/// Converts a grid measure into a point cloud located at cell centers.
pub fn measure_to_cloud(m: &Measure, mode: CloudMode) -> Result<SampleCloud> {
    let grid = m
        .grid()
        .ok_or_else(|| Error::SupportMismatch("measure_to_cloud needs a grid-supported measure".into()))?;
    let d = grid.dim();
    let w = m.weights();
    match mode {
        CloudMode::CellCenters => {
            let mut points = Vec::new();
            let mut weights = Vec::new();
            for (j, &wj) in w.iter().enumerate() {
                if wj > 0.0 {
                    points.extend(grid.center(j));
                    weights.push(wj);
                }
            }
            SampleCloud::weighted(d, points, weights)
        }
        CloudMode::Proportional { total } => {
            if total == 0 {
                return Err(Error::EmptyCloud);
            }
            let exact: Vec<f64> = w.iter().map(|wj| wj * total as f64).collect();
            let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
            let assigned: usize = counts.iter().sum();
            let mut order: Vec<usize> = (0..w.len()).collect();
            order.sort_by(|&a, &b| {
                let ra = exact[a] - exact[a].floor();
                let rb = exact[b] - exact[b].floor();
                rb.total_cmp(&ra).then(a.cmp(&b))
            });
            for &j in order.iter().take(total.saturating_sub(assigned)) {
                counts[j] += 1;
            }
            let mut points = Vec::with_capacity(total * d);
            for (j, &c) in counts.iter().enumerate() {
                let center = grid.center(j);
                for _ in 0..c {
                    points.extend_from_slice(&center);
                }
            }
            SampleCloud::new(d, points)
        }
        CloudMode::Multinomial { total, seed } => {
            if total == 0 {
                return Err(Error::EmptyCloud);
            }
            let dist = WeightedIndex::new(w).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut points = Vec::with_capacity(total * d);
            for _ in 0..total {
                points.extend(grid.center(dist.sample(&mut rng)));
            }
            SampleCloud::new(d, points)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{builtin, iterate_map};
    use std::collections::BTreeMap;

    fn line(n: usize) -> Grid {
        Grid::cube(&[0.0], &[1.0], n).unwrap()
    }

    #[test]
    fn symmetric_split() {
        let traj = Trajectory::from_flat(1, vec![0.1, 0.3, 0.6, 0.9], 1.0, 0).unwrap();
        let m = occupation_measure(&traj, &line(2), false).unwrap();
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn single_point_is_one_hot() {
        let traj = Trajectory::from_flat(2, vec![0.26, 0.74], 1.0, 0).unwrap();
        let g = Grid::cube(&[0.0, 0.0], &[1.0, 1.0], 5).unwrap();
        let m = occupation_measure(&traj, &g, false).unwrap();
        let hot = g.to_flat(&[1, 3]);
        for (j, w) in m.weights().iter().enumerate() {
            assert_eq!(*w, if j == hot { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn out_of_box_sample_is_reported() {
        let traj = Trajectory::from_flat(1, vec![0.5, 1.5, 0.2], 1.0, 0).unwrap();
        match occupation_measure(&traj, &line(3), false) {
            Err(Error::OutOfDomain { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        let clipped = occupation_measure(&traj, &line(3), true).unwrap();
        assert!((clipped.weights()[2] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn modified_cat_map_marginal_matches_density() {
        // Per-column mass of the invariant density 10 x^9 on a 20x20 grid.
        let sys = builtin("cat_modified", &BTreeMap::new()).unwrap();
        let n_iter = 100_000;
        let traj = iterate_map(sys.as_map().unwrap(), &[0.7548776662, 0.5698402910], n_iter).unwrap();
        let g = Grid::cube(&[0.0, 0.0], &[1.0, 1.0], 20).unwrap();
        let m = occupation_measure(&traj, &g, false).unwrap();
        let h = g.spacing(0);
        let total = (n_iter + 1) as f64;
        for col in 0..20 {
            let c = col as f64 * h;
            let (a, b) = ((c - h / 2.0).max(0.0), (c + h / 2.0).min(1.0));
            let p = b.powi(10) - a.powi(10);
            let observed: f64 = (0..20).map(|row| m.weights()[g.to_flat(&[col, row])]).sum();
            let sigma = (p * (1.0 - p) / total).sqrt();
            assert!((observed - p).abs() <= 3.0 * sigma, "col {col}: {observed} vs {p}");
        }
    }

    #[test]
    fn cloud_from_one_hot() {
        let g = Grid::cube(&[0.0, 0.0], &[1.0, 2.0], 3).unwrap();
        let m = Measure::one_hot(Support::Grid(g.clone()), 5).unwrap();
        let cloud = measure_to_cloud(&m, CloudMode::CellCenters).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.point(0), g.center(5).as_slice());
    }

    #[test]
    fn proportional_allocation() {
        let m = Measure::uniform(Support::Grid(line(2)));
        let cloud = measure_to_cloud(&m, CloudMode::Proportional { total: 10 }).unwrap();
        let left = cloud.points().filter(|p| p[0] == 0.0).count();
        assert_eq!((left, cloud.len() - left), (5, 5));
    }

    #[test]
    fn multinomial_resampling_recovers_weights() {
        let g = line(4);
        let m = Measure::new(vec![0.1, 0.2, 0.3, 0.4], Support::Grid(g.clone())).unwrap();
        let total = 20_000;
        let cloud = measure_to_cloud(&m, CloudMode::Multinomial { total, seed: 9 }).unwrap();
        let back = occupation_measure_points(1, cloud.as_flat(), &g, false).unwrap();
        for (p, q) in m.weights().iter().zip(back.weights()) {
            let sigma = (p * (1.0 - p) / total as f64).sqrt();
            assert!((p - q).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn measure_validation() {
        let s = Support::Cells(vec![0, 1]);
        assert!(Measure::new(vec![0.5, 0.6], s.clone()).is_err());
        assert!(Measure::new(vec![1.5, -0.5], s.clone()).is_err());
        assert!(Measure::new(vec![0.5], s.clone()).is_err());
        let m = Measure::normalized(vec![2.0, 6.0], s).unwrap();
        assert_eq!(m.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn measure_json_round_trip() {
        let m = Measure::new(vec![0.25, 0.75], Support::Grid(line(2))).unwrap();
        let text = serde_json::to_string(&MeasureFile::from(&m)).unwrap();
        let back = Measure::try_from(serde_json::from_str::<MeasureFile>(&text).unwrap()).unwrap();
        assert_eq!(back, m);
        let bad = r#"{"weights":[1.0]}"#;
        assert!(Measure::try_from(serde_json::from_str::<MeasureFile>(bad).unwrap()).is_err());
    }
}
