use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform rectangular mesh over the box `[lo_1, hi_1] x ... x [lo_d, hi_d]`.
///
/// Dimension `i` carries `n_i` equally spaced cell centers `lo_i + k dx_i`,
/// `dx_i = (hi_i - lo_i) / (n_i - 1)`. Cells are flattened in column-major
/// order, so the flat stride of dimension `i` is `S_i = n_1 ... n_{i-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n_per_dim: Vec<usize>,
}

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n_per_dim: Vec<usize>) -> Result<Self> {
        let grid = Self { lo, hi, n_per_dim };
        grid.validate()?;
        Ok(grid)
    }

    /// Same number of points along every axis.
    pub fn cube(lo: &[f64], hi: &[f64], n: usize) -> Result<Self> {
        Self::new(lo.to_vec(), hi.to_vec(), vec![n; lo.len()])
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lo.len();
        if d == 0 || self.hi.len() != d || self.n_per_dim.len() != d {
            return invalid("grid lo, hi and n_per_dim must share a positive length");
        }
        for i in 0..d {
            if !(self.lo[i] < self.hi[i]) || !self.lo[i].is_finite() || !self.hi[i].is_finite() {
                return invalid(format!("grid axis {i}: need finite lo < hi"));
            }
            if self.n_per_dim[i] < 2 {
                return invalid(format!("grid axis {i}: need at least 2 points"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_per_dim.iter().product()
    }

    pub fn spacing(&self, i: usize) -> f64 {
        (self.hi[i] - self.lo[i]) / (self.n_per_dim[i] - 1) as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim()).map(|i| self.spacing(i)).fold(f64::INFINITY, f64::min)
    }

    /// Flat-index distance between neighbours along axis `i`.
    pub fn stride(&self, i: usize) -> usize {
        self.n_per_dim[..i].iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.spacing(i)).product()
    }

    pub fn to_flat(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for (i, &k) in multi.iter().enumerate() {
            flat += k * stride;
            stride *= self.n_per_dim[i];
        }
        flat
    }

    pub fn to_multi(&self, mut flat: usize) -> Vec<usize> {
        self.n_per_dim
            .iter()
            .map(|&n| {
                let k = flat % n;
                flat /= n;
                k
            })
            .collect()
    }

    /// Index of cell `flat` along axis `i`.
    pub fn axis_index(&self, flat: usize, i: usize) -> usize {
        (flat / self.stride(i)) % self.n_per_dim[i]
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.center_into(flat, &mut out);
        out
    }

    pub fn center_into(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for i in 0..self.dim() {
            let n = self.n_per_dim[i];
            out[i] = self.lo[i] + (rem % n) as f64 * self.spacing(i);
            rem /= n;
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, &v)| {
            let slack = 1e-12 * (self.hi[i] - self.lo[i]);
            v >= self.lo[i] - slack && v <= self.hi[i] + slack
        })
    }

    /// Cell whose center is nearest to `x`; `None` outside the box.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        Some(self.locate_clamped(x))
    }

    /// Like [`Grid::locate`] but clamps `x` into the box first.
    pub fn locate_clamped(&self, x: &[f64]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for i in 0..self.dim() {
            let n = self.n_per_dim[i];
            let k = ((x[i] - self.lo[i]) / self.spacing(i)).round();
            let k = if k.is_nan() { 0 } else { k.clamp(0.0, (n - 1) as f64) as usize };
            flat += k * stride;
            stride *= n;
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spacing_and_strides() {
        let g = Grid::new(vec![0.0, -1.0, 2.0], vec![1.0, 1.0, 3.0], vec![5, 3, 2]).unwrap();
        assert_eq!(g.n_cells(), 30);
        assert_eq!(g.stride(0), 1);
        assert_eq!(g.stride(1), 5);
        assert_eq!(g.stride(2), 15);
        assert!((g.spacing(0) - 0.25).abs() < 1e-15);
        assert!((g.spacing(1) - 1.0).abs() < 1e-15);
        assert_eq!(g.center(g.to_flat(&[4, 2, 1])), vec![1.0, 1.0, 3.0]);
        assert_eq!(g.axis_index(g.to_flat(&[3, 1, 1]), 1), 1);
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(Grid::new(vec![1.0], vec![0.0], vec![3]).is_err());
        assert!(Grid::new(vec![0.0], vec![1.0], vec![1]).is_err());
        assert!(Grid::new(vec![0.0, 0.0], vec![1.0], vec![3, 3]).is_err());
    }

    #[test]
    fn locate_nearest_center() {
        let g = Grid::cube(&[0.0], &[1.0], 2).unwrap();
        assert_eq!(g.locate(&[0.3]), Some(0));
        assert_eq!(g.locate(&[0.6]), Some(1));
        assert_eq!(g.locate(&[1.2]), None);
        assert_eq!(g.locate_clamped(&[1.2]), 1);
    }

    proptest! {
        #[test]
        fn flat_multi_round_trip(n0 in 2usize..7, n1 in 2usize..7, n2 in 2usize..5, seed in 0usize..1000) {
            let g = Grid::new(vec![0.0; 3], vec![1.0; 3], vec![n0, n1, n2]).unwrap();
            let flat = seed % g.n_cells();
            prop_assert_eq!(g.to_flat(&g.to_multi(flat)), flat);
            let c = g.center(flat);
            prop_assert_eq!(g.locate(&c), Some(flat));
        }
    }
}
