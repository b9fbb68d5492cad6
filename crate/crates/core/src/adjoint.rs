//! Adjoint-state gradients of objectives on the teleported stationary density.
//!
//! For `J(rho(theta))` with `M_eps rho = rho`, `1 . rho = 1`, the multiplier solves
//! `(M_eps^T - I) lambda = -dJ + (dJ . rho) 1` and `dJ/dtheta = lambda^T (dM_eps/dtheta) rho`.
//! `ker(M_eps^T - I) = span(1)`, so `lambda` is fixed by the gauge `lambda . 1 = 0`.

use crate::error::{Error, Result};
use crate::fvm::{DirectSolver, FaceVelocities, RegularizedMarkov};
use crate::linalg::{dot, gmres, norm};
use crate::measure::Measure;
use crate::velocity::{backward_batch, VelocityModel};

pub const DEFAULT_ADJOINT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub lambda: Vec<f64>,
    /// `|(M_eps^T - I) lambda - r|_2 / |r|_2`, 0 when `r = 0`.
    pub residual: f64,
}

fn rhs(rho: &[f64], dj: &[f64]) -> Vec<f64> {
    let proj: f64 = dj.iter().zip(rho).map(|(g, p)| g * p).sum();
    dj.iter().map(|g| proj - g).collect()
}

fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Residual of `(M^T - I) lambda = r` with its `rho` component removed: that
/// component lies outside the range whenever `rho` is only approximately
/// stationary, so no `lambda` can reduce it.
fn relative_residual(m: &RegularizedMarkov, rho: &[f64], lambda: &[f64], r: &[f64]) -> f64 {
    let r_norm = norm(r);
    if r_norm == 0.0 {
        return 0.0;
    }
    let mut out = vec![0.0; lambda.len()];
    m.apply_transpose(lambda, &mut out);
    let mut diff: Vec<f64> = out.iter().zip(lambda).zip(r).map(|((a, l), b)| a - l - b).collect();
    let along = dot(&diff, rho) / dot(rho, rho);
    diff.iter_mut().zip(rho).for_each(|(d, p)| *d -= along * p);
    norm(&diff) / r_norm
}

fn check_lengths(m: &RegularizedMarkov, rho: &Measure, dj: &[f64]) -> Result<()> {
    let n = m.n_cells();
    for len in [rho.len(), dj.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    Ok(())
}

/// Restarted GMRES on the deflated operator `M_eps^T - I + 11^T / N`.
///
/// Because `rho . r = 0`, the deflated solution has `1 . lambda = 0` and solves
/// the singular system itself.
pub fn solve_adjoint(m: &RegularizedMarkov, rho: &Measure, dj_drho: &[f64], tol: f64) -> Result<AdjointSolution> {
    check_lengths(m, rho, dj_drho)?;
    let n = m.n_cells();
    let r = rhs(rho.weights(), dj_drho);
    let mut lambda = vec![0.0; n];
    if norm(&r) == 0.0 {
        return Ok(AdjointSolution { lambda, residual: 0.0 });
    }
    let max_iters = (20 * n).max(2000);
    gmres(
        |x, out| {
            m.apply_transpose(x, out);
            let s = x.iter().sum::<f64>() / n as f64;
            out.iter_mut().zip(x).for_each(|(o, xi)| *o += s - xi);
        },
        &r,
        &mut lambda,
        60,
        0.1 * tol,
        max_iters,
    );
    center(&mut lambda);
    let residual = relative_residual(m, rho.weights(), &lambda, &r);
    if !(residual < tol) {
        return Err(Error::AdjointSolve { residual, tol });
    }
    Ok(AdjointSolution { lambda, residual })
}

/// Same system, solved with the banded factors held by `solver`; requires `eps > 0`.
pub fn solve_adjoint_direct(solver: &DirectSolver, rho: &Measure, dj_drho: &[f64], tol: f64) -> Result<AdjointSolution> {
    let m = solver.markov();
    check_lengths(m, rho, dj_drho)?;
    let r = rhs(rho.weights(), dj_drho);
    // On mean-zero vectors, M_eps^T - I = -C^T with C = eps I - (1 - eps) K.
    let mut lambda: Vec<f64> = r.iter().map(|v| -v).collect();
    solver.solve_c_transpose(&mut lambda);
    center(&mut lambda);
    let residual = relative_residual(m, rho.weights(), &lambda, &r);
    if !(residual < tol) {
        return Err(Error::AdjointSolve { residual, tol });
    }
    Ok(AdjointSolution { lambda, residual })
}

/// `dJ/dv` for every face; boundary faces get 0.
///
/// Face `(i, b)` couples cells `a = b - S_i` and `b`; its derivative is
/// `(1 - eps) dt/dx_i (lambda_b - lambda_a) rho_donor`, with donor `a` when `v > 0`, else `b`.
pub fn grad_face_velocities(m: &RegularizedMarkov, rho: &Measure, lambda: &AdjointSolution) -> FaceVelocities {
    let op = m.op();
    let grid = op.grid();
    let faces = op.faces();
    let (rho, lam) = (rho.weights(), &lambda.lambda);
    let mut out = FaceVelocities::zeros(grid);
    for (i, b) in faces.interior_faces() {
        let a = b - grid.stride(i);
        let donor = if faces.get(i, b) > 0.0 { rho[a] } else { rho[b] };
        let g = (1.0 - m.eps()) * op.dt() / grid.spacing(i) * (lam[b] - lam[a]) * donor;
        out.set(i, b, g);
    }
    out
}

/// Chain rule from face gradients to model parameters.
pub fn grad_parameters(face_grads: &FaceVelocities, model: &VelocityModel) -> Vec<f64> {
    match model {
        VelocityModel::Faces(_) => face_grads.interior_faces().map(|(i, j)| face_grads.get(i, j)).collect(),
        VelocityModel::Field(field) => {
            let d = face_grads.grid().dim();
            let (mut points, mut seeds) = (Vec::new(), Vec::new());
            let mut x = vec![0.0; d];
            for (i, j) in face_grads.interior_faces() {
                let g = face_grads.get(i, j);
                if g == 0.0 {
                    continue;
                }
                face_grads.face_center_into(i, j, &mut x);
                points.extend_from_slice(&x);
                let mut s = vec![0.0; d];
                s[i] = g;
                seeds.extend_from_slice(&s);
            }
            backward_batch(field.as_ref(), &points, &seeds)
        }
    }
}

pub fn write_lambda_csv(lambda: &AdjointSolution, mut w: impl std::io::Write) -> Result<()> {
    writeln!(w, "cell,lambda")?;
    for (j, v) in lambda.lambda.iter().enumerate() {
        writeln!(w, "{j},{v:e}")?;
    }
    Ok(())
}
