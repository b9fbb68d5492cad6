//! Galerkin approximation of the transfer operator on data-adaptive meshes.
//!
//! A mesh is a set of centers with nearest-center cells. Transition matrices
//! are estimated by Monte Carlo from `(x, T x)` pairs and weighted with a
//! (possibly smooth) partition of unity over the image cells.

mod flowmap;
mod kmeans;
mod pou;

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::measure::{Measure, SampleCloud, Support};
use crate::systems::Trajectory;

pub use flowmap::{flow_images, flowmap_loss_and_grad, flowmap_markov, FlowMapLoss};
pub use kmeans::{build_mesh, build_mesh_with, KMeansOptions};
pub use pou::PartitionOfUnity;

/// Row/column sums of a stochastic matrix must be within this of 1.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Cells are the Voronoi regions of `centers`; ties go to the lowest index.
#[derive(Debug, Clone, PartialEq)]
pub struct UnstructuredMesh {
    dim: usize,
    centers: Vec<f64>,
    /// Build-sample cell of each sample used to construct the mesh, if any.
    labels: Vec<usize>,
}

impl UnstructuredMesh {
    pub fn from_centers(dim: usize, centers: Vec<f64>) -> Result<Self> {
        if dim == 0 || centers.is_empty() || centers.len() % dim != 0 {
            return invalid("mesh needs at least one center of the declared dimension");
        }
        let mesh = Self { dim, centers, labels: Vec::new() };
        for i in 0..mesh.n_cells() {
            for j in 0..i {
                if mesh.center(i) == mesh.center(j) {
                    return invalid(format!("mesh centers {j} and {i} coincide"));
                }
            }
        }
        Ok(mesh)
    }

    pub(crate) fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = labels;
        self
    }

    /// Uniform lattice of `n` centers per axis at `lo + (k + 1/2) h`.
    pub fn lattice(lo: &[f64], hi: &[f64], n: usize) -> Result<Self> {
        let d = lo.len();
        let total = n.pow(d as u32);
        let mut centers = Vec::with_capacity(total * d);
        for flat in 0..total {
            let mut rem = flat;
            for i in 0..d {
                let h = (hi[i] - lo[i]) / n as f64;
                centers.push(lo[i] + ((rem % n) as f64 + 0.5) * h);
                rem /= n;
            }
        }
        Self::from_centers(d, centers)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Cells of the mesh-building samples (empty for meshes built from centers).
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-cell counts of the mesh-building samples.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_cells()];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centers.chunks_exact(self.dim).enumerate() {
            let d2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        best.1
    }

    pub fn assign_all(&self, points: &[f64]) -> Vec<usize> {
        points.par_chunks(self.dim * 1024).flat_map_iter(|block| block.chunks_exact(self.dim).map(|x| self.assign(x))).collect()
    }

    pub fn to_file(&self) -> MeshFile {
        MeshFile {
            dim: self.dim,
            n_cells: self.n_cells(),
            centers: self.centers.chunks(self.dim).map(|c| c.to_vec()).collect(),
            counts: if self.labels.is_empty() { None } else { Some(self.counts()) },
        }
    }
}

/// JSON form of a mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshFile {
    pub dim: usize,
    pub n_cells: usize,
    pub centers: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
}

impl TryFrom<MeshFile> for UnstructuredMesh {
    type Error = Error;

    fn try_from(f: MeshFile) -> Result<Self> {
        if f.centers.len() != f.n_cells || f.centers.iter().any(|c| c.len() != f.dim) {
            return invalid("mesh file: centers do not match dim / n_cells");
        }
        UnstructuredMesh::from_centers(f.dim, f.centers.concat())
    }
}

/// Which sums of a stochastic matrix equal 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Row `i` is the distribution of images of cell `i`.
    Row,
    Column,
}

/// Dense stochastic matrix with an explicit orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct UlamMatrix {
    n: usize,
    data: Vec<f64>,
    orientation: Orientation,
}

impl UlamMatrix {
    /// Validates nonnegativity and unit sums along the declared orientation.
    pub fn new(n: usize, data: Vec<f64>, orientation: Orientation) -> Result<Self> {
        if data.len() != n * n || n == 0 {
            return invalid("Ulam matrix data must be n x n");
        }
        let m = Self { n, data, orientation };
        if m.data.iter().any(|&v| !(v >= 0.0)) {
            return invalid("Ulam matrix has a negative or non-finite entry");
        }
        let err = m.stochasticity_error();
        if err > STOCHASTIC_TOL {
            return invalid(format!("Ulam matrix sums deviate from 1 by {err:e}"));
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest deviation of a row (or column) sum from 1.
    pub fn stochasticity_error(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|i| {
                let s: f64 = match self.orientation {
                    Orientation::Row => self.row(i).iter().sum(),
                    Orientation::Column => (0..n).map(|r| self.get(r, i)).sum(),
                };
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Transpose, flipping the orientation tag.
    pub fn transposed(&self) -> Self {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        let orientation = match self.orientation {
            Orientation::Row => Orientation::Column,
            Orientation::Column => Orientation::Row,
        };
        Self { n, data, orientation }
    }

    pub fn to_orientation(&self, orientation: Orientation) -> Self {
        if self.orientation == orientation {
            self.clone()
        } else {
            self.transposed()
        }
    }

    /// Coordinate list, one `row col value` line per nonzero, after an orientation header.
    pub fn write_coo(&self, mut w: impl Write) -> Result<()> {
        let tag = match self.orientation {
            Orientation::Row => "row",
            Orientation::Column => "column",
        };
        writeln!(w, "# orientation {tag} n {}", self.n)?;
        for i in 0..self.n {
            for j in 0..self.n {
                let v = self.get(i, j);
                if v != 0.0 {
                    writeln!(w, "{i} {j} {v:e}")?;
                }
            }
        }
        Ok(())
    }

    pub fn read_coo(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty COO file".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (orientation, n) = match parts.as_slice() {
            ["#", "orientation", o, "n", n] => {
                let o = match *o {
                    "row" => Orientation::Row,
                    "column" => Orientation::Column,
                    other => return Err(Error::Parse(format!("unknown orientation `{other}`"))),
                };
                (o, n.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?)
            }
            _ => return Err(Error::Parse(format!("bad COO header `{header}`"))),
        };
        let mut data = vec![0.0; n * n];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::Parse(format!("bad COO line `{line}`")));
            }
            let parse_idx = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(e.to_string()));
            let (i, j) = (parse_idx(f[0])?, parse_idx(f[1])?);
            let v: f64 = f[2].parse().map_err(|e: std::num::ParseFloatError| Error::Parse(e.to_string()))?;
            if i >= n || j >= n {
                return Err(Error::Parse(format!("COO index ({i}, {j}) out of range")));
            }
            data[i * n + j] = v;
        }
        Self::new(n, data, orientation)
    }
}

/// Source samples grouped by the mesh cell that contains them.
#[derive(Debug, Clone)]
pub struct SourceSet {
    cloud: SampleCloud,
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl SourceSet {
    /// Assigns every sample to its nearest center; every cell must receive one.
    pub fn new(mesh: &UnstructuredMesh, cloud: SampleCloud) -> Result<Self> {
        let labels = mesh.assign_all(cloud.as_flat());
        Self::with_labels(mesh, cloud, labels)
    }

    /// Uses given cell labels, e.g. the balanced labels of the mesh-building samples.
    pub fn with_labels(mesh: &UnstructuredMesh, cloud: SampleCloud, labels: Vec<usize>) -> Result<Self> {
        if cloud.dim() != mesh.dim() {
            return Err(Error::DimensionMismatch { expected: mesh.dim(), got: cloud.dim() });
        }
        if labels.len() != cloud.len() || labels.iter().any(|&l| l >= mesh.n_cells()) {
            return invalid("one in-range label per source sample required");
        }
        let mut counts = vec![0; mesh.n_cells()];
        labels.iter().for_each(|&l| counts[l] += 1);
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyCell(empty));
        }
        Ok(Self { cloud, labels, counts })
    }

    pub fn cloud(&self) -> &SampleCloud {
        &self.cloud
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

const ESTIMATE_BLOCK: usize = 1 << 14;

/// `M_ij = (1 / N_i) sum_{x in C_i} psi_j(T x)`, row-stochastic.
pub fn estimate_markov(sources: &SourceSet, images: &SampleCloud, pou: &PartitionOfUnity) -> Result<UlamMatrix> {
    let n = pou.n_cells();
    if images.len() != sources.len() {
        return invalid("one image per source sample required");
    }
    if images.dim() != pou.dim() {
        return Err(Error::DimensionMismatch { expected: pou.dim(), got: images.dim() });
    }
    let d = images.dim();
    let partial: Vec<Vec<f64>> = images
        .as_flat()
        .par_chunks(ESTIMATE_BLOCK * d)
        .zip(sources.labels.par_chunks(ESTIMATE_BLOCK))
        .map(|(ys, ls)| {
            let mut acc = vec![0.0; n * n];
            let mut psi = vec![0.0; n];
            for (y, &l) in ys.chunks_exact(d).zip(ls) {
                if pou.eps() == 0.0 {
                    acc[l * n + pou.nearest(y)] += 1.0;
                } else {
                    pou.eval_into(y, &mut psi);
                    acc[l * n..(l + 1) * n].iter_mut().zip(&psi).for_each(|(a, p)| *a += p);
                }
            }
            acc
        })
        .collect();
    let mut data = vec![0.0; n * n];
    for block in partial {
        data.iter_mut().zip(&block).for_each(|(a, b)| *a += b);
    }
    for i in 0..n {
        let inv = 1.0 / sources.counts[i] as f64;
        data[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= inv);
    }
    UlamMatrix::new(n, data, Orientation::Row)
}

/// Left fixed point of `(1 - eps) M + eps U` by power iteration.
///
/// Stops when `|pi M_eps - pi|_1 < tol`.
pub fn invariant_density(m: &UlamMatrix, eps_tele: f64, tol: f64, max_iters: usize) -> Result<Measure> {
    if !(0.0..=1.0).contains(&eps_tele) {
        return invalid(format!("teleportation eps = {eps_tele} outside [0, 1]"));
    }
    let row = m.to_orientation(Orientation::Row);
    let n = row.n;
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iters {
        next.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let p = pi[i];
            if p != 0.0 {
                next.iter_mut().zip(row.row(i)).for_each(|(a, mij)| *a += p * mij);
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v = (1.0 - eps_tele) * *v / s + eps_tele / n as f64);
        residual = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        if residual < tol {
            return Measure::normalized(pi, Support::Cells((0..n).collect()));
        }
        std::mem::swap(&mut pi, &mut next);
    }
    Err(Error::NonConvergence { iterations: max_iters, residual })
}

/// Hard-indicator Ulam matrix from consecutive states of orbits.
///
/// Each state is assigned once and serves as the image of its predecessor.
/// Rows of cells no orbit leaves from are set to uniform, so the matrix stays
/// row-stochastic; those cells receive no transitions and carry vanishing
/// stationary mass. Returns the matrix and the per-cell source counts.
pub fn ulam_from_orbits<'a>(mesh: &UnstructuredMesh, orbits: impl IntoIterator<Item = &'a Trajectory>) -> Result<(UlamMatrix, Vec<usize>)> {
    let n = mesh.n_cells();
    let mut data = vec![0.0; n * n];
    let mut counts = vec![0usize; n];
    for orbit in orbits {
        if orbit.dim() != mesh.dim() {
            return Err(Error::DimensionMismatch { expected: mesh.dim(), got: orbit.dim() });
        }
        let labels = mesh.assign_all(orbit.as_flat());
        for w in labels.windows(2) {
            data[w[0] * n + w[1]] += 1.0;
            counts[w[0]] += 1;
        }
    }
    for i in 0..n {
        let row = &mut data[i * n..(i + 1) * n];
        if counts[i] == 0 {
            row.iter_mut().for_each(|v| *v = 1.0 / n as f64);
        } else {
            let inv = 1.0 / counts[i] as f64;
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok((UlamMatrix::new(n, data, Orientation::Row)?, counts))
}

/// Frobenius norm of `A - B`.
pub fn markov_distance(a: &UlamMatrix, b: &UlamMatrix) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::DimensionMismatch { expected: a.n, got: b.n });
    }
    if a.orientation != b.orientation {
        return Err(Error::SupportMismatch("Ulam matrices have different orientations".into()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `int |rho_hat - rho|` over a box by midpoint quadrature with `resolution` points per axis.
///
/// `rho_hat` is piecewise constant: cell mass divided by the cell volume, which
/// is itself measured by the quadrature.
pub fn l1_density_error(mesh: &UnstructuredMesh, masses: &[f64], density: impl Fn(&[f64]) -> f64 + Sync, lo: &[f64], hi: &[f64], resolution: usize) -> Result<f64> {
    let d = mesh.dim();
    if masses.len() != mesh.n_cells() || lo.len() != d || hi.len() != d {
        return invalid("l1_density_error: inconsistent mesh, masses or box");
    }
    let total = resolution.pow(d as u32);
    let h: Vec<f64> = (0..d).map(|i| (hi[i] - lo[i]) / resolution as f64).collect();
    let dv: f64 = h.iter().product();
    let points: Vec<f64> = (0..total)
        .flat_map(|flat| {
            let mut rem = flat;
            (0..d)
                .map(|i| {
                    let k = rem % resolution;
                    rem /= resolution;
                    lo[i] + (k as f64 + 0.5) * h[i]
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let cells = mesh.assign_all(&points);
    let mut volume = vec![0.0; mesh.n_cells()];
    cells.iter().for_each(|&c| volume[c] += dv);
    let err: f64 = points
        .chunks_exact(d)
        .zip(&cells)
        .map(|(x, &c)| (masses[c] / volume[c] - density(x)).abs() * dv)
        .sum();
    Ok(err)
}
