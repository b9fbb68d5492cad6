use crate::error::{invalid, Result};

use super::UnstructuredMesh;

/// Softplus-of-distance partition of unity over mesh centers.
///
/// `psi_i(x) = r_i / sum_j r_j` with `r_i = log(1 + exp(-|c_i - x| / eps))`.
/// Weights are formed from `log r_i` so they never underflow; `eps = 0` is the
/// hard nearest-center indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOfUnity {
    dim: usize,
    centers: Vec<f64>,
    eps: f64,
}

/// `log(softplus(z))` and its derivative in `z`.
fn log_softplus(z: f64) -> (f64, f64) {
    if z < -30.0 {
        // softplus(z) = e^z (1 - e^z / 2 + ...), so the log is z to double precision.
        (z, 1.0)
    } else {
        let sp = z.exp().ln_1p();
        let sigmoid = 1.0 / (1.0 + (-z).exp());
        (sp.ln(), sigmoid / sp)
    }
}

impl PartitionOfUnity {
    pub fn new(mesh: &UnstructuredMesh, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return invalid(format!("partition-of-unity eps = {eps} must be finite and >= 0"));
        }
        Ok(Self { dim: mesh.dim(), centers: mesh.centers().to_vec(), eps })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub(crate) fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centers.chunks_exact(self.dim).enumerate() {
            let d2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        best.1
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        if self.eps == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[self.nearest(x)] = 1.0;
            return;
        }
        for (o, c) in out.iter_mut().zip(self.centers.chunks_exact(self.dim)) {
            let dist = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            *o = log_softplus(-dist / self.eps).0;
        }
        softmax_in_place(out);
    }

    /// Accumulates `d(g . psi(x)) / dx` into `out`; zero for the hard indicator.
    pub fn vjp(&self, x: &[f64], g: &[f64], out: &mut [f64]) {
        if self.eps == 0.0 {
            return;
        }
        let n = self.n_cells();
        let mut logr = vec![0.0; n];
        let mut dlog = vec![0.0; n];
        let mut dist = vec![0.0; n];
        for (i, c) in self.centers.chunks_exact(self.dim).enumerate() {
            dist[i] = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let (l, dl) = log_softplus(-dist[i] / self.eps);
            logr[i] = l;
            dlog[i] = dl;
        }
        softmax_in_place(&mut logr);
        let psi = logr;
        let gbar: f64 = psi.iter().zip(g).map(|(p, gi)| p * gi).sum();
        for (i, c) in self.centers.chunks_exact(self.dim).enumerate() {
            if dist[i] == 0.0 {
                continue;
            }
            // d log r_i / dx = dlog_i * (-(x - c_i) / (eps |x - c_i|))
            let coeff = psi[i] * (g[i] - gbar) * dlog[i] / (self.eps * dist[i]);
            if coeff == 0.0 {
                continue;
            }
            for ((o, xk), ck) in out.iter_mut().zip(x).zip(c) {
                *o -= coeff * (xk - ck);
            }
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}
