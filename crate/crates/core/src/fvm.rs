//! Upwind finite-volume discretization of the Fokker–Planck equation on a [`Grid`].
//!
//! One explicit step maps a probability vector `rho` to `(I + K) rho`, where `K`
//! has zero column sums and `I + K` is entrywise nonnegative whenever `dt`
//! respects [`cfl_dt`]. Teleportation blends `I + K` with the uniform restart
//! matrix so the stationary vector is unique and strictly positive.

use crate::error::{invalid, Error, Result};
use crate::linalg::{BandedLu, CscMatrix};
use crate::measure::{Grid, Measure, Support};
use crate::systems::VectorField;

pub const DEFAULT_SAFETY: f64 = 0.9;
pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

/// Normal velocity on every cell face, stored per axis at the lower face of each cell.
///
/// `get(i, j)` is the velocity component `i` at `x_j - e_i dx_i / 2`. The face
/// is shared with the upper face of cell `j - S_i`. Lower faces of cells on the
/// lower boundary of axis `i` lie on the domain boundary and always hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocities {
    grid: Grid,
    values: Vec<Vec<f64>>,
}

impl FaceVelocities {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![vec![0.0; grid.n_cells()]; grid.dim()],
        }
    }

    /// `f(axis, face_center)` for every interior face.
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(usize, &[f64]) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        let mut x = vec![0.0; grid.dim()];
        for i in 0..grid.dim() {
            for j in 0..grid.n_cells() {
                if out.is_interior(i, j) {
                    out.face_center_into(i, j, &mut x);
                    out.values[i][j] = f(i, &x);
                }
            }
        }
        out
    }

    pub fn sample(grid: &Grid, field: &dyn VectorField) -> Result<Self> {
        if field.dim() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), got: field.dim() });
        }
        let mut v = vec![0.0; grid.dim()];
        Ok(Self::from_fn(grid, |i, x| {
            field.eval(x, &mut v);
            v[i]
        }))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn axis(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Writes to boundary faces are ignored.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        if self.is_interior(i, j) {
            self.values[i][j] = v;
        }
    }

    pub fn is_interior(&self, i: usize, j: usize) -> bool {
        self.grid.axis_index(j, i) > 0
    }

    pub fn face_center(&self, i: usize, j: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.grid.dim()];
        self.face_center_into(i, j, &mut x);
        x
    }

    pub fn face_center_into(&self, i: usize, j: usize, x: &mut [f64]) {
        self.grid.center_into(j, x);
        x[i] -= 0.5 * self.grid.spacing(i);
    }

    /// `(axis, cell)` for every interior face.
    pub fn interior_faces(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.grid.dim()).flat_map(move |i| (0..self.grid.n_cells()).filter(move |&j| self.is_interior(i, j)).map(move |j| (i, j)))
    }

    pub fn n_interior(&self) -> usize {
        self.interior_faces().count()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&v| v == 0.0)
    }
}

/// Largest stable step, scaled by `safety`: `safety / (2d) * dx^2 / (D + dx |v|_inf)` with `dx` the finest spacing.
pub fn cfl_dt(grid: &Grid, diffusion: f64, v_inf: f64, safety: f64) -> Result<f64> {
    if !(diffusion >= 0.0) || !(v_inf >= 0.0) || !diffusion.is_finite() || !v_inf.is_finite() {
        return invalid(format!("cfl_dt needs finite D >= 0 and |v| >= 0, got D = {diffusion}, |v| = {v_inf}"));
    }
    if !(safety > 0.0 && safety <= 1.0) {
        return invalid(format!("CFL safety factor {safety} outside (0, 1]"));
    }
    let dx = grid.min_spacing();
    let rate = diffusion + dx * v_inf;
    if rate == 0.0 {
        return Err(Error::DegenerateDynamics("D = 0 and v = 0 leave the time step unbounded".into()));
    }
    Ok(safety * dx * dx / (2.0 * grid.dim() as f64 * rate))
}

/// One explicit upwind step `I + K` on a grid.
#[derive(Debug, Clone)]
pub struct FvmOperator {
    grid: Grid,
    k: CscMatrix,
    dt: f64,
    diffusion: f64,
    faces: FaceVelocities,
}

/// Assembles `K` from face velocities; fails if `I + K` has a negative entry.
pub fn assemble(faces: &FaceVelocities, diffusion: f64, dt: f64) -> Result<FvmOperator> {
    if !(dt > 0.0) || !(diffusion >= 0.0) {
        return invalid(format!("assembly needs dt > 0 and D >= 0, got dt = {dt}, D = {diffusion}"));
    }
    let grid = faces.grid();
    let n = grid.n_cells();
    let mut triplets = Vec::with_capacity(n * (1 + 4 * grid.dim()));
    for j in 0..n {
        triplets.push((j, j, 0.0));
    }
    for (i, b) in faces.interior_faces() {
        let a = b - grid.stride(i);
        let dx = grid.spacing(i);
        let c = dt / dx;
        let diff = diffusion * dt / (dx * dx);
        let u = faces.get(i, b);
        // a -> b through the shared face when u > 0, b -> a when u < 0.
        let up = c * u.max(0.0) + diff;
        let down = -c * u.min(0.0) + diff;
        triplets.push((b, a, up));
        triplets.push((a, a, -up));
        triplets.push((a, b, down));
        triplets.push((b, b, -down));
    }
    let k = CscMatrix::from_triplets(n, n, &triplets);
    for j in 0..n {
        let value = 1.0 + k.get(j, j);
        if value < -1e-14 {
            return Err(Error::CflViolation { cell: j, value });
        }
    }
    Ok(FvmOperator {
        grid: grid.clone(),
        k,
        dt,
        diffusion,
        faces: faces.clone(),
    })
}

/// Assembles with `dt = cfl_dt(grid, D, max |v|, safety)`.
pub fn assemble_auto(faces: &FaceVelocities, diffusion: f64, safety: f64) -> Result<FvmOperator> {
    let dt = cfl_dt(faces.grid(), diffusion, faces.max_abs(), safety)?;
    assemble(faces, diffusion, dt)
}

impl FvmOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn k(&self) -> &CscMatrix {
        &self.k
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn diffusion(&self) -> f64 {
        self.diffusion
    }

    pub fn faces(&self) -> &FaceVelocities {
        &self.faces
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    /// `out = (I + K) x`.
    pub fn step(&self, x: &[f64], out: &mut [f64]) {
        self.k.matvec(x, out);
        out.iter_mut().zip(x).for_each(|(o, xi)| *o += xi);
    }
}

pub fn evolve_density(op: &FvmOperator, rho0: &Measure, n_steps: usize) -> Result<Measure> {
    check_on_grid(rho0, op.grid())?;
    let mut rho = rho0.weights().to_vec();
    let mut next = vec![0.0; rho.len()];
    for _ in 0..n_steps {
        op.step(&rho, &mut next);
        // Roundoff only; exact entries are nonnegative under CFL.
        next.iter_mut().for_each(|v| *v = v.max(0.0));
        std::mem::swap(&mut rho, &mut next);
    }
    Measure::normalized(rho, rho0.support().clone())
}

/// `M_eps = (1 - eps)(I + K) + eps U` with `U = 11^T / N`, held implicitly.
#[derive(Debug, Clone)]
pub struct RegularizedMarkov {
    op: FvmOperator,
    eps: f64,
}

pub fn teleport(op: &FvmOperator, eps: f64) -> Result<RegularizedMarkov> {
    if !(0.0..=1.0).contains(&eps) {
        return invalid(format!("teleportation eps = {eps} outside [0, 1]"));
    }
    Ok(RegularizedMarkov { op: op.clone(), eps })
}

impl RegularizedMarkov {
    pub fn op(&self) -> &FvmOperator {
        &self.op
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn n_cells(&self) -> usize {
        self.op.n_cells()
    }

    /// `out = M_eps x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.op.step(x, out);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        out.iter_mut().for_each(|o| *o = (1.0 - self.eps) * *o + self.eps * mean);
    }

    /// `out = M_eps^T x`.
    pub fn apply_transpose(&self, x: &[f64], out: &mut [f64]) {
        self.op.k.matvec_transpose(x, out);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        out.iter_mut()
            .zip(x)
            .for_each(|(o, xi)| *o = (1.0 - self.eps) * (*o + xi) + self.eps * mean);
    }

    /// Dense copy, for inspection of small problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_cells();
        let mut dense = self.op.k.to_dense();
        for (r, row) in dense.iter_mut().enumerate() {
            row[r] += 1.0;
            for v in row.iter_mut() {
                *v = (1.0 - self.eps) * *v + self.eps / n as f64;
            }
        }
        dense
    }

    /// `|M_eps rho - rho|_1`.
    pub fn residual(&self, rho: &[f64]) -> f64 {
        let mut out = vec![0.0; rho.len()];
        self.apply(rho, &mut out);
        out.iter().zip(rho).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Power iteration from the uniform vector until `|M_eps rho - rho|_1 < tol`.
pub fn stationary_density(m: &RegularizedMarkov, tol: f64, max_iters: usize) -> Result<Measure> {
    let n = m.n_cells();
    stationary_density_from(m, &vec![1.0 / n as f64; n], tol, max_iters)
}

/// Power iteration from a caller-supplied probability vector.
pub fn stationary_density_from(m: &RegularizedMarkov, start: &[f64], tol: f64, max_iters: usize) -> Result<Measure> {
    if m.eps == 0.0 && m.op.diffusion == 0.0 {
        return Err(Error::DegenerateDynamics("stationary density needs eps > 0 or D > 0".into()));
    }
    let n = m.n_cells();
    if start.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: start.len() });
    }
    let total: f64 = start.iter().sum();
    let mut rho: Vec<f64> = start.iter().map(|v| v / total).collect();
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iters {
        m.apply(&rho, &mut next);
        next.iter_mut().for_each(|v| *v = v.max(0.0));
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        residual = next.iter().zip(&rho).map(|(a, b)| (a - b).abs()).sum();
        if residual < tol {
            return Measure::normalized(rho, Support::Grid(m.op.grid.clone()));
        }
        std::mem::swap(&mut rho, &mut next);
    }
    Err(Error::NonConvergence { iterations: max_iters, residual })
}

/// Direct solver for the teleported stationary problem and its adjoint.
///
/// With `eps > 0` the fixed point solves `C rho = (eps / N) 1`, where
/// `C = eps I - (1 - eps) K` is a column diagonally dominant M-matrix, so
/// banded elimination needs no pivoting. The adjoint system reuses the factors.
#[derive(Debug, Clone)]
pub struct DirectSolver {
    lu: BandedLu,
    m: RegularizedMarkov,
}

impl DirectSolver {
    pub fn new(m: &RegularizedMarkov) -> Result<Self> {
        if !(m.eps > 0.0) {
            return Err(Error::DegenerateDynamics("direct stationary solve needs eps > 0".into()));
        }
        let n = m.n_cells();
        let mut triplets: Vec<(usize, usize, f64)> = m.op.k.triplets().map(|(r, c, v)| (r, c, -(1.0 - m.eps) * v)).collect();
        triplets.extend((0..n).map(|j| (j, j, m.eps)));
        let c = CscMatrix::from_triplets(n, n, &triplets);
        Ok(Self { lu: BandedLu::factor(&c)?, m: m.clone() })
    }

    pub fn markov(&self) -> &RegularizedMarkov {
        &self.m
    }

    /// Stationary density; entries are bounded below by `eps / N`.
    pub fn stationary(&self) -> Result<Measure> {
        let n = self.m.n_cells();
        let floor = self.m.eps / n as f64;
        let mut rho = vec![floor; n];
        self.lu.solve(&mut rho);
        rho.iter_mut().for_each(|v| *v = v.max(floor));
        Measure::normalized(rho, Support::Grid(self.m.op.grid.clone()))
    }

    /// Solves `C^T x = b` in place.
    pub(crate) fn solve_c_transpose(&self, b: &mut [f64]) {
        self.lu.solve_transpose(b);
    }
}

/// How a stationary density is computed inside fitting loops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationaryMethod {
    /// Power iteration, warm-started when a previous iterate is available.
    Power,
    /// Banded LU of the shifted system; requires `eps > 0`.
    #[default]
    Direct,
}

pub(crate) fn check_on_grid(m: &Measure, grid: &Grid) -> Result<()> {
    match m.grid() {
        Some(g) if g == grid => Ok(()),
        _ => Err(Error::SupportMismatch("measure is not supported on the operator grid".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{integrate_ode, van_der_pol, OdeSystem};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_faces(grid: &Grid, scale: f64, seed: u64) -> FaceVelocities {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FaceVelocities::from_fn(grid, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
    }

    #[test]
    fn cfl_formula() {
        let g = Grid::cube(&[0.0, 0.0], &[1.0, 1.0], 11).unwrap();
        let dt = cfl_dt(&g, 0.001, 1.0, 1.0).unwrap();
        assert!((dt - 0.25 * 0.01 / 0.101).abs() < 1e-15);
        let a = cfl_dt(&g, 0.3, 0.0, 0.9).unwrap();
        let b = cfl_dt(&g, 0.6, 0.0, 0.9).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-15);
        let g3 = Grid::cube(&[0.0; 3], &[1.0; 3], 11).unwrap();
        assert!(cfl_dt(&g3, 0.001, 1.0, 1.0).unwrap() < dt);
        assert!(matches!(cfl_dt(&g, 0.0, 0.0, 0.9), Err(Error::DegenerateDynamics(_))));
        assert!(cfl_dt(&g, 0.1, 1.0, 1.5).is_err());
    }

    #[test]
    fn no_transport_gives_zero_k() {
        let g = Grid::cube(&[0.0, 0.0], &[1.0, 1.0], 4).unwrap();
        let op = assemble(&FaceVelocities::zeros(&g), 0.0, 0.1).unwrap();
        assert!(op.k().triplets().all(|(_, _, v)| v == 0.0));
    }

    #[test]
    fn constant_drift_1d_stencil() {
        let g = Grid::cube(&[0.0], &[1.0], 5).unwrap();
        let (v, dt) = (2.0, 0.05);
        let faces = FaceVelocities::from_fn(&g, |_, _| v);
        let op = assemble(&faces, 0.0, dt).unwrap();
        let c = v * dt / g.spacing(0);
        let k = op.k().to_dense();
        for j in 0..5 {
            let out = if j < 4 { c } else { 0.0 };
            assert!((k[j][j] + out).abs() < 1e-15);
            if j < 4 {
                assert!((k[j + 1][j] - c).abs() < 1e-15);
            }
        }
        assert!(op.k().column_sums().iter().all(|s| s.abs() < 1e-15));
    }

    #[test]
    fn pure_diffusion_stencil() {
        let g = Grid::cube(&[0.0], &[1.0], 6).unwrap();
        let (d, dt) = (0.01, 0.2);
        let op = assemble(&FaceVelocities::zeros(&g), d, dt).unwrap();
        let r = d * dt / (g.spacing(0) * g.spacing(0));
        let k = op.k().to_dense();
        for j in 1..5 {
            assert!((k[j][j] + 2.0 * r).abs() < 1e-15);
            assert!((k[j - 1][j] - r).abs() < 1e-15);
            assert!((k[j + 1][j] - r).abs() < 1e-15);
        }
        assert!((k[0][0] + r).abs() < 1e-15);
    }

    #[test]
    fn cfl_violation_names_a_cell() {
        let g = Grid::cube(&[0.0], &[1.0], 5).unwrap();
        let faces = FaceVelocities::from_fn(&g, |_, _| 1.0);
        let dt = cfl_dt(&g, 0.0, 1.0, 1.0).unwrap();
        assert!(assemble(&faces, 0.0, 0.99 * dt).is_ok());
        match assemble(&faces, 0.0, 10.0 * dt) {
            Err(Error::CflViolation { cell, value }) => {
                assert!(cell < 4);
                assert!(value < 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn faces_from_field_use_lower_face_centers() {
        let g = Grid::cube(&[0.0, 0.0], &[1.0, 2.0], 3).unwrap();
        let field = OdeSystem::new("affine", 2, vec![], |x, out| {
            out[0] = x[0] + 10.0 * x[1];
            out[1] = -x[1];
        });
        let faces = FaceVelocities::sample(&g, &field).unwrap();
        let j = g.to_flat(&[2, 1]);
        assert!((faces.get(0, j) - (0.75 + 10.0)).abs() < 1e-14);
        assert!((faces.get(1, j) + 0.5).abs() < 1e-14);
        assert_eq!(faces.get(1, g.to_flat(&[2, 0])), 0.0);
        assert_eq!(faces.n_interior(), 2 * 3 * 2);
    }

    #[test]
    fn two_cell_teleport_example() {
        let g = Grid::cube(&[0.0], &[1.0], 2).unwrap();
        let op = assemble(&FaceVelocities::zeros(&g), 0.0, 1.0).unwrap();
        let m = teleport(&op, 0.5).unwrap();
        assert_eq!(m.to_dense(), vec![vec![0.75, 0.25], vec![0.25, 0.75]]);
        let rho = stationary_density(&m, 1e-12, 100).unwrap();
        assert!(rho.weights().iter().all(|w| (w - 0.5).abs() < 1e-15));
        assert!(teleport(&op, 1.5).is_err());
        assert!(teleport(&op, -0.1).is_err());
        let plain = teleport(&op, 0.0).unwrap();
        assert_eq!(plain.to_dense(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn implicit_apply_matches_dense() {
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![4, 3]).unwrap();
        let faces = random_faces(&g, 1.0, 5);
        let op = assemble_auto(&faces, 0.01, DEFAULT_SAFETY).unwrap();
        let m = teleport(&op, 0.2).unwrap();
        let dense = m.to_dense();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let (mut y, mut yt) = (vec![0.0; 12], vec![0.0; 12]);
        m.apply(&x, &mut y);
        m.apply_transpose(&x, &mut yt);
        for r in 0..12 {
            let expect: f64 = (0..12).map(|c| dense[r][c] * x[c]).sum();
            let expect_t: f64 = (0..12).map(|c| dense[c][r] * x[c]).sum();
            assert!((y[r] - expect).abs() < 1e-14);
            assert!((yt[r] - expect_t).abs() < 1e-14);
        }
        for c in 0..12 {
            let s: f64 = (0..12).map(|r| dense[r][c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((0..12).all(|r| dense[r][c] > 0.0));
        }
    }

    #[test]
    fn direct_and_power_agree() {
        let g = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![9, 7]).unwrap();
        let faces = random_faces(&g, 2.0, 11);
        let op = assemble_auto(&faces, 0.05, DEFAULT_SAFETY).unwrap();
        let m = teleport(&op, 0.01).unwrap();
        let power = stationary_density(&m, 1e-13, DEFAULT_MAX_ITERS).unwrap();
        let direct = DirectSolver::new(&m).unwrap().stationary().unwrap();
        assert!(m.residual(power.weights()) < 1e-12);
        assert!(m.residual(direct.weights()) < 1e-13);
        for (p, q) in power.weights().iter().zip(direct.weights()) {
            assert!((p - q).abs() < 1e-10);
            assert!(*p > 0.0);
        }
    }

    #[test]
    fn power_iteration_reports_non_convergence() {
        let g = Grid::cube(&[0.0], &[1.0], 40).unwrap();
        let op = assemble_auto(&FaceVelocities::zeros(&g), 0.01, DEFAULT_SAFETY).unwrap();
        let m = teleport(&op, 1e-6).unwrap();
        let mut start = vec![0.0; 40];
        start[0] = 1.0;
        assert!(matches!(stationary_density_from(&m, &start, 1e-14, 3), Err(Error::NonConvergence { iterations: 3, .. })));
    }

    #[test]
    fn van_der_pol_density_concentrates_on_cycle() {
        let g = Grid::cube(&[-3.5, -3.5], &[3.5, 3.5], 100).unwrap();
        let vdp = van_der_pol(1.0);
        let faces = FaceVelocities::sample(&g, &vdp).unwrap();
        let op = assemble_auto(&faces, 0.001, DEFAULT_SAFETY).unwrap();
        let m = teleport(&op, 1e-8).unwrap();
        let direct = DirectSolver::new(&m).unwrap().stationary().unwrap();
        let rho = stationary_density_from(&m, direct.weights(), DEFAULT_TOL, 1000).unwrap();
        assert!(m.residual(rho.weights()) < DEFAULT_TOL);
        // Annulus: cells within 0.5 of the deterministic cycle.
        let orbit = integrate_ode(&vdp, &[2.0, 0.0], 0.01, 3000, 1).unwrap().skip(2000).unwrap();
        let cycle: Vec<&[f64]> = orbit.states().collect();
        let mass: f64 = (0..g.n_cells())
            .filter(|&j| {
                let c = g.center(j);
                cycle.iter().any(|p| (p[0] - c[0]).hypot(p[1] - c[1]) < 0.5)
            })
            .map(|j| rho.weights()[j])
            .sum();
        assert!(mass >= 0.95, "annulus mass {mass}");
    }

    #[test]
    fn evolution_conserves_mass() {
        let g = Grid::cube(&[0.0, 0.0], &[1.0, 1.0], 8).unwrap();
        let op = assemble_auto(&random_faces(&g, 1.0, 2), 0.01, DEFAULT_SAFETY).unwrap();
        let rho0 = Measure::one_hot(Support::Grid(g.clone()), 27).unwrap();
        assert_eq!(evolve_density(&op, &rho0, 0).unwrap(), rho0);
        let mut rho = rho0.weights().to_vec();
        let mut next = vec![0.0; rho.len()];
        for _ in 0..1000 {
            op.step(&rho, &mut next);
            std::mem::swap(&mut rho, &mut next);
            assert!(rho.iter().all(|&v| v >= 0.0));
        }
        assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn heat_flow_approaches_uniform_monotonically() {
        let g = Grid::cube(&[0.0], &[1.0], 10).unwrap();
        let op = assemble_auto(&FaceVelocities::zeros(&g), 0.1, DEFAULT_SAFETY).unwrap();
        let mut rho = Measure::one_hot(Support::Grid(g.clone()), 2).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            rho = evolve_density(&op, &rho, 5).unwrap();
            let l1: f64 = rho.weights().iter().map(|w| (w - 0.1).abs()).sum();
            assert!(l1 <= last + 1e-15);
            last = l1;
        }
        assert!(last < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn assembled_operators_are_markov(
            n0 in 2usize..7, n1 in 2usize..7, seed in 0u64..1000, d in 0.0f64..0.5, scale in 0.0f64..5.0, eps in 0.0f64..1.0,
        ) {
            let g = Grid::new(vec![0.0, -1.0], vec![1.0, 2.0], vec![n0, n1]).unwrap();
            let faces = random_faces(&g, scale, seed);
            prop_assume!(d > 0.0 || faces.max_abs() > 0.0);
            let op = assemble_auto(&faces, d, DEFAULT_SAFETY).unwrap();
            for s in op.k().column_sums() {
                prop_assert!(s.abs() < 1e-12);
            }
            for (r, c, v) in op.k().triplets() {
                let shifted = if r == c { v + 1.0 } else { v };
                prop_assert!(shifted >= -1e-14);
            }
            let m = teleport(&op, eps).unwrap();
            let dense = m.to_dense();
            for c in 0..g.n_cells() {
                let s: f64 = dense.iter().map(|row| row[c]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
