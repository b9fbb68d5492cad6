//! Ulam matrices of a learned flow map and their parameter gradients.
//!
//! The flow is fixed-step RK4; gradients are exact reverse mode through every
//! stage, so they match the discrete forward map rather than the exact flow.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::measure::SampleCloud;
use crate::systems::{VectorField, BLOWUP_LIMIT};
use crate::velocity::ParametricField;

use super::{estimate_markov, Orientation, PartitionOfUnity, SourceSet, UlamMatrix};

const FLOW_BLOCK: usize = 256;

/// The loss value, its gradient in the field parameters and the estimated matrix.
#[derive(Debug, Clone)]
pub struct FlowMapLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub markov: UlamMatrix,
}

fn check_flow(field: &dyn VectorField, cloud: &SampleCloud, flow_dt: f64, substeps: usize) -> Result<()> {
    if cloud.dim() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: cloud.dim() });
    }
    if !(flow_dt > 0.0) || !flow_dt.is_finite() || substeps == 0 {
        return invalid(format!("flow needs dt > 0 and substeps >= 1, got {flow_dt} and {substeps}"));
    }
    Ok(())
}

fn check_blowup(index: usize, y: &[f64]) -> Result<()> {
    match y.iter().position(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
        Some(component) => Err(Error::IntegrationBlowup { step: index, component, value: y[component] }),
        None => Ok(()),
    }
}

/// One RK4 step of size `h`; when `stages` is given the four stage inputs are appended to it.
fn rk4_step(field: &dyn VectorField, x: &mut [f64], h: f64, k: &mut [Vec<f64>; 4], tmp: &mut [f64], mut stages: Option<&mut Vec<f64>>) {
    let d = x.len();
    let offsets = [0.0, 0.5 * h, 0.5 * h, h];
    for s in 0..4 {
        if s == 0 {
            tmp.copy_from_slice(x);
        } else {
            for i in 0..d {
                tmp[i] = x[i] + offsets[s] * k[s - 1][i];
            }
        }
        if let Some(st) = stages.as_deref_mut() {
            st.extend_from_slice(tmp);
        }
        field.eval(tmp, &mut k[s]);
    }
    for i in 0..d {
        x[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
}

/// Images of every point under the RK4 flow over `flow_dt`.
///
/// Fails with [`Error::IntegrationBlowup`] (step = sample index) on a diverging image.
pub fn flow_images(field: &dyn VectorField, sources: &SampleCloud, flow_dt: f64, substeps: usize) -> Result<SampleCloud> {
    check_flow(field, sources, flow_dt, substeps)?;
    let d = field.dim();
    let h = flow_dt / substeps as f64;
    let mut out = sources.as_flat().to_vec();
    out.par_chunks_mut(FLOW_BLOCK * d).enumerate().try_for_each(|(b, block)| {
        let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        let mut tmp = vec![0.0; d];
        for (j, x) in block.chunks_exact_mut(d).enumerate() {
            for _ in 0..substeps {
                rk4_step(field, x, h, &mut k, &mut tmp, None);
            }
            check_blowup(b * FLOW_BLOCK + j, x)?;
        }
        Ok::<_, Error>(())
    })?;
    SampleCloud::new(d, out)
}

/// Row-oriented Ulam matrix of the flow map.
pub fn flowmap_markov(field: &dyn VectorField, sources: &SourceSet, pou: &PartitionOfUnity, flow_dt: f64, substeps: usize) -> Result<UlamMatrix> {
    let images = flow_images(field, sources.cloud(), flow_dt, substeps)?;
    estimate_markov(sources, &images, pou)
}

/// `J = |M(theta) - M_target|_F` and `dJ / dtheta`.
///
/// The partition of unity must be smooth (`eps > 0`) for the gradient to be
/// informative; with the hard indicator it is identically zero.
pub fn flowmap_loss_and_grad(
    field: &dyn ParametricField,
    sources: &SourceSet,
    pou: &PartitionOfUnity,
    target: &UlamMatrix,
    flow_dt: f64,
    substeps: usize,
) -> Result<FlowMapLoss> {
    let cloud = sources.cloud();
    check_flow(field, cloud, flow_dt, substeps)?;
    let n = pou.n_cells();
    if target.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: target.n() });
    }
    if field.out_dim() != field.dim() {
        return invalid("flow map needs a field with out_dim == dim");
    }
    let d = field.dim();
    let h = flow_dt / substeps as f64;

    // Forward pass, keeping every stage input for the reverse sweep.
    let per_sample = 4 * substeps * d;
    let mut images = cloud.as_flat().to_vec();
    let mut stages = vec![0.0; cloud.len() * per_sample];
    images
        .par_chunks_mut(FLOW_BLOCK * d)
        .zip(stages.par_chunks_mut(FLOW_BLOCK * per_sample))
        .enumerate()
        .try_for_each(|(b, (block, st_block))| {
            let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
            let mut tmp = vec![0.0; d];
            let mut buf = Vec::with_capacity(per_sample);
            for (j, (x, st)) in block.chunks_exact_mut(d).zip(st_block.chunks_exact_mut(per_sample)).enumerate() {
                buf.clear();
                for _ in 0..substeps {
                    rk4_step(field, x, h, &mut k, &mut tmp, Some(&mut buf));
                }
                st.copy_from_slice(&buf);
                check_blowup(b * FLOW_BLOCK + j, x)?;
            }
            Ok::<_, Error>(())
        })?;
    let images = SampleCloud::new(d, images)?;
    let markov = estimate_markov(sources, &images, pou)?;
    let target = target.to_orientation(Orientation::Row);

    let loss = markov.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let n_params = field.n_params();
    if loss == 0.0 || pou.eps() == 0.0 {
        return Ok(FlowMapLoss { loss, grad: vec![0.0; n_params], markov });
    }
    // dJ/dM_ij, pre-divided by the row counts so each sample seeds psi directly.
    let mut seed_rows: Vec<f64> = markov.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) / loss).collect();
    for (i, &c) in sources.counts().iter().enumerate() {
        seed_rows[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= c as f64);
    }

    let labels = sources.labels();
    let partial: Vec<Vec<f64>> = images
        .as_flat()
        .par_chunks(FLOW_BLOCK * d)
        .zip(stages.par_chunks(FLOW_BLOCK * per_sample))
        .zip(labels.par_chunks(FLOW_BLOCK))
        .map(|((ys, sts), ls)| {
            let mut g = vec![0.0; n_params];
            let mut xbar = vec![0.0; d];
            let mut kbar = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
            let mut ybar = vec![0.0; d];
            for ((y, st), &l) in ys.chunks_exact(d).zip(sts.chunks_exact(per_sample)).zip(ls) {
                xbar.iter_mut().for_each(|v| *v = 0.0);
                pou.vjp(y, &seed_rows[l * n..(l + 1) * n], &mut xbar);
                for step in (0..substeps).rev() {
                    let base = step * 4 * d;
                    let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
                    for s in 0..4 {
                        kbar[s].iter_mut().zip(&xbar).for_each(|(kb, xb)| *kb = weights[s] * xb);
                    }
                    // Stage s reads y_s = x + offset_s * k_{s-1}.
                    let offsets = [0.0, 0.5 * h, 0.5 * h, h];
                    for s in (0..4).rev() {
                        ybar.iter_mut().for_each(|v| *v = 0.0);
                        let ys = &st[base + s * d..base + (s + 1) * d];
                        field.backward(ys, &kbar[s], &mut g, Some(&mut ybar));
                        xbar.iter_mut().zip(&ybar).for_each(|(xb, yb)| *xb += yb);
                        if s > 0 {
                            let (lo, _) = kbar.split_at_mut(s);
                            lo[s - 1].iter_mut().zip(&ybar).for_each(|(kb, yb)| *kb += offsets[s] * yb);
                        }
                    }
                }
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; n_params];
    for g in partial {
        grad.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
    }
    Ok(FlowMapLoss { loss, grad, markov })
}
