//! Sparse and banded linear algebra used by the finite-volume solver.

use crate::error::{Error, Result};

/// Compressed sparse column matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    n_rows: usize,
    n_cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Duplicate `(row, col)` entries are summed; rows within a column end up sorted.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n_cols + 1];
        for &(_, c, _) in triplets {
            counts[c + 1] += 1;
        }
        for c in 0..n_cols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) out of bounds");
            rows[next[c]] = r;
            vals[next[c]] = v;
            next[c] += 1;
        }
        let mut col_ptr = vec![0usize; n_cols + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for c in 0..n_cols {
            scratch.clear();
            scratch.extend((counts[c]..counts[c + 1]).map(|k| (rows[k], vals[k])));
            scratch.sort_by_key(|e| e.0);
            for &(r, v) in &scratch {
                if row_idx.len() > col_ptr[c] && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr[c + 1] = row_idx.len();
        }
        Self { n_rows, n_cols, col_ptr, row_idx, values }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self::from_triplets(n_rows, n_cols, &[])
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        match self.row_idx[range.clone()].binary_search(&row) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// Entries of column `col` as `(row, value)`.
    pub fn column(&self, col: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        self.row_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    /// All entries as `(row, col, value)`, column by column.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_cols).flat_map(move |c| self.column(c).map(move |(r, v)| (r, c, v)))
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.values[k] * xc;
            }
        }
    }

    /// `y = A^T x`.
    pub fn matvec_transpose(&self, x: &[f64], y: &mut [f64]) {
        for (c, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                acc += self.values[k] * x[self.row_idx[k]];
            }
            *out = acc;
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.n_cols).map(|c| self.column(c).map(|(_, v)| v).sum()).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, c, v) in self.triplets() {
            out[r][c] += v;
        }
        out
    }

    /// Largest `|row - col|` over stored entries, split into (below, above) the diagonal.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut lower = 0;
        let mut upper = 0;
        for (r, c, _) in self.triplets() {
            if r > c {
                lower = lower.max(r - c);
            } else {
                upper = upper.max(c - r);
            }
        }
        (lower, upper)
    }
}

/// LU factorization of a square banded matrix without pivoting.
///
/// Valid for matrices whose Gaussian elimination never meets a zero pivot,
/// e.g. strictly diagonally dominant by rows or columns. Fill stays inside the band.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    // Row i holds columns i - lower ..= i + upper.
    band: Vec<f64>,
}

impl BandedLu {
    pub fn factor(a: &CscMatrix) -> Result<Self> {
        assert_eq!(a.n_rows(), a.n_cols(), "banded LU needs a square matrix");
        let n = a.n_rows();
        let (lower, upper) = a.bandwidths();
        let width = lower + upper + 1;
        let mut band = vec![0.0; n * width];
        for (r, c, v) in a.triplets() {
            band[r * width + c + lower - r] += v;
        }
        for k in 0..n {
            let pivot = band[k * width + lower];
            if !(pivot.abs() > 0.0) || !pivot.is_finite() {
                return Err(Error::InvalidArgument(format!("banded LU: zero pivot at row {k}")));
            }
            let last_row = (k + lower).min(n - 1);
            let last_col = (k + upper).min(n - 1);
            for i in k + 1..=last_row {
                let ik = i * width + k + lower - i;
                let l = band[ik] / pivot;
                band[ik] = l;
                if l == 0.0 {
                    continue;
                }
                let (head, tail) = band.split_at_mut(i * width);
                let row_k = &head[k * width..k * width + width];
                let row_i = &mut tail[..width];
                for j in k + 1..=last_col {
                    row_i[j + lower - i] -= l * row_k[j + lower - k];
                }
            }
        }
        Ok(Self { n, lower, upper, band })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.band[i * (self.lower + self.upper + 1) + j + self.lower - i]
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let start = i.saturating_sub(self.lower);
            let mut acc = b[i];
            for j in start..i {
                acc -= self.at(i, j) * b[j];
            }
            b[i] = acc;
        }
        for i in (0..n).rev() {
            let end = (i + self.upper).min(n - 1);
            let mut acc = b[i];
            for j in i + 1..=end {
                acc -= self.at(i, j) * b[j];
            }
            b[i] = acc / self.at(i, i);
        }
    }

    /// Solves `A^T x = b` in place.
    pub fn solve_transpose(&self, b: &mut [f64]) {
        let n = self.n;
        // U^T y = b
        for i in 0..n {
            b[i] /= self.at(i, i);
            let yi = b[i];
            let end = (i + self.upper).min(n - 1);
            for j in i + 1..=end {
                b[j] -= self.at(i, j) * yi;
            }
        }
        // L^T x = y
        for i in (0..n).rev() {
            let xi = b[i];
            let start = i.saturating_sub(self.lower);
            for j in start..i {
                b[j] -= self.at(i, j) * xi;
            }
        }
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final `|b - A x| / |b|`.
    pub relative_residual: f64,
}

/// Restarted GMRES for `A x = b`, starting from the supplied `x`.
///
/// Stops when the relative residual drops below `tol` or after `max_iters`
/// inner iterations in total; the returned stats say which.
pub fn gmres<F>(apply: F, b: &[f64], x: &mut [f64], restart: usize, tol: f64, max_iters: usize) -> SolveStats
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return SolveStats { iterations: 0, relative_residual: 0.0 };
    }
    let m = restart.max(1).min(n.max(1));
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut basis: Vec<Vec<f64>> = vec![vec![0.0; n]; m + 1];
    let mut h = vec![vec![0.0; m]; m + 1];
    let (mut cs, mut sn, mut g) = (vec![0.0; m], vec![0.0; m], vec![0.0; m + 1]);
    let mut total = 0;
    loop {
        apply(x, &mut r);
        r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        let beta = norm(&r);
        let rel = beta / b_norm;
        if rel < tol || total >= max_iters {
            return SolveStats { iterations: total, relative_residual: rel };
        }
        basis[0].iter_mut().zip(&r).for_each(|(v, ri)| *v = ri / beta);
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            apply(&basis[k], &mut w);
            for i in 0..=k {
                let hik = dot(&w, &basis[i]);
                h[i][k] = hik;
                w.iter_mut().zip(&basis[i]).for_each(|(wj, vj)| *wj -= hik * vj);
            }
            let hnext = norm(&w);
            h[k + 1][k] = hnext;
            if hnext > 0.0 {
                basis[k + 1].iter_mut().zip(&w).for_each(|(v, wj)| *v = wj / hnext);
            }
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = h[k][k].hypot(h[k + 1][k]);
            cs[k] = if denom == 0.0 { 1.0 } else { h[k][k] / denom };
            sn[k] = if denom == 0.0 { 0.0 } else { h[k + 1][k] / denom };
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            total += 1;
            if g[k + 1].abs() / b_norm < tol || hnext == 0.0 || total >= max_iters {
                break;
            }
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in i + 1..k_used {
                acc -= h[i][j] * y[j];
            }
            y[i] = if h[i][i] == 0.0 { 0.0 } else { acc / h[i][i] };
        }
        for (j, yj) in y.iter().enumerate() {
            x.iter_mut().zip(&basis[j]).for_each(|(xi, vj)| *xi += yj * vj);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded(n: usize, lower: usize, upper: usize, seed: u64) -> CscMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for c in 0..n {
            let mut off = 0.0;
            for r in c.saturating_sub(upper)..(c + lower + 1).min(n) {
                if r != c && rng.random::<f64>() < 0.7 {
                    let v = rng.random::<f64>() - 0.5;
                    off += v.abs();
                    t.push((r, c, v));
                }
            }
            t.push((c, c, off + 0.5 + rng.random::<f64>()));
        }
        CscMatrix::from_triplets(n, n, &t)
    }

    fn dense_mul(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|row| dot(row, x)).collect()
    }

    #[test]
    fn triplets_are_summed_and_sorted() {
        let a = CscMatrix::from_triplets(3, 2, &[(2, 0, 1.0), (0, 0, 2.0), (2, 0, 3.0), (1, 1, -1.0)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(2, 0), 4.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.column(0).collect::<Vec<_>>(), vec![(0, 2.0), (2, 4.0)]);
        assert_eq!(a.column_sums(), vec![6.0, -1.0]);
    }

    #[test]
    fn matvec_matches_dense() {
        let a = random_banded(30, 3, 5, 1);
        let dense = a.to_dense();
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let mut y = vec![0.0; 30];
        a.matvec(&x, &mut y);
        let expect = dense_mul(&dense, &x);
        assert!(y.iter().zip(&expect).all(|(p, q)| (p - q).abs() < 1e-13));
        let t: Vec<Vec<f64>> = (0..30).map(|c| dense.iter().map(|row| row[c]).collect()).collect();
        a.matvec_transpose(&x, &mut y);
        let expect = dense_mul(&t, &x);
        assert!(y.iter().zip(&expect).all(|(p, q)| (p - q).abs() < 1e-13));
    }

    #[test]
    fn banded_lu_solves_both_orientations() {
        let a = random_banded(60, 4, 7, 2);
        assert_eq!(a.bandwidths(), (4, 7));
        let lu = BandedLu::factor(&a).unwrap();
        let x_true: Vec<f64> = (0..60).map(|i| 1.0 + (i as f64 * 0.37).cos()).collect();
        let mut b = vec![0.0; 60];
        a.matvec(&x_true, &mut b);
        lu.solve(&mut b);
        assert!(b.iter().zip(&x_true).all(|(p, q)| (p - q).abs() < 1e-10));
        a.matvec_transpose(&x_true, &mut b);
        lu.solve_transpose(&mut b);
        assert!(b.iter().zip(&x_true).all(|(p, q)| (p - q).abs() < 1e-10));
    }

    #[test]
    fn zero_pivot_is_an_error() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        assert!(BandedLu::factor(&a).is_err());
    }

    #[test]
    fn gmres_converges_on_nonsymmetric_system() {
        let a = random_banded(80, 6, 2, 3);
        let x_true: Vec<f64> = (0..80).map(|i| (i as f64 * 0.1).exp().recip()).collect();
        let mut b = vec![0.0; 80];
        a.matvec(&x_true, &mut b);
        let mut x = vec![0.0; 80];
        let stats = gmres(|v, out| a.matvec(v, out), &b, &mut x, 20, 1e-12, 2000);
        assert!(stats.relative_residual < 1e-12, "{stats:?}");
        assert!(x.iter().zip(&x_true).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn gmres_zero_rhs() {
        let a = random_banded(5, 1, 1, 4);
        let mut x = vec![1.0; 5];
        let stats = gmres(|v, out| a.matvec(v, out), &[0.0; 5], &mut x, 5, 1e-12, 10);
        assert_eq!(stats.iterations, 0);
        assert_eq!(x, vec![0.0; 5]);
    }
}
