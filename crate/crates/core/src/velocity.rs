//! Trainable velocity fields with hand-written reverse mode.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fvm::FaceVelocities;
use crate::measure::Grid;
use crate::systems::{builtin, OdeSystem, VectorField};

/// A vector field `v(x; theta)` that can backpropagate to parameters and inputs.
pub trait ParametricField: VectorField {
    /// Output width; [`VectorField::dim`] is the input width.
    fn out_dim(&self) -> usize;

    fn n_params(&self) -> usize;

    fn params(&self) -> &[f64];

    fn set_params(&mut self, theta: &[f64]);

    /// Accumulates `d(seed . v(x)) / d theta` into `grad_params` and, if given,
    /// `d(seed . v(x)) / dx` into `grad_input`.
    fn backward(&self, x: &[f64], seed: &[f64], grad_params: &mut [f64], grad_input: Option<&mut [f64]>);

    fn architecture(&self) -> Architecture;

    fn clone_box(&self) -> Box<dyn ParametricField>;
}

impl Clone for Box<dyn ParametricField> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

impl std::fmt::Debug for dyn ParametricField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ParametricField({:?}, {} params)", self.architecture(), self.n_params())
    }
}

const BATCH_BLOCK: usize = 256;

/// `sum_k d(seeds_k . v(points_k)) / d theta`, reduced over fixed blocks so the
/// result does not depend on the thread count.
pub fn backward_batch(model: &dyn ParametricField, points: &[f64], seeds: &[f64]) -> Vec<f64> {
    let (d_in, d_out) = (model.dim(), model.out_dim());
    let n_params = model.n_params();
    let partial: Vec<Vec<f64>> = points
        .par_chunks(BATCH_BLOCK * d_in)
        .zip(seeds.par_chunks(BATCH_BLOCK * d_out))
        .map(|(xs, ss)| {
            let mut g = vec![0.0; n_params];
            for (x, s) in xs.chunks(d_in).zip(ss.chunks(d_out)) {
                if s.iter().any(|&v| v != 0.0) {
                    model.backward(x, s, &mut g, None);
                }
            }
            g
        })
        .collect();
    let mut total = vec![0.0; n_params];
    for g in partial {
        total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
    }
    total
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    #[default]
    Xavier,
    Zero,
}

/// Serializable description of a model's shape; parameters are stored separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Mlp {
        widths: Vec<usize>,
        activation: String,
        input_shift: Vec<f64>,
        input_scale: Vec<f64>,
        output_scale: Vec<f64>,
    },
    Linear {
        dim: usize,
        out_dim: usize,
        degree: u32,
    },
    Masked {
        reference: String,
        #[serde(default)]
        reference_params: BTreeMap<String, f64>,
        learned: Vec<usize>,
        inner: Box<Architecture>,
    },
    Faces {
        grid: Grid,
    },
}

/// Feedforward network: tanh hidden layers, linear output.
///
/// Inputs are mapped to `(x - input_shift) / input_scale` before the first
/// layer and outputs are multiplied by `output_scale`; both are fixed.
/// Layer `l` stores its weights row-major (`out x in`) followed by its biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    output_scale: Vec<f64>,
}

impl Mlp {
    pub fn new(widths: &[usize], scheme: InitScheme, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return invalid(format!("MLP widths {widths:?} need at least two positive entries"));
        }
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut mlp = Self {
            widths: widths.to_vec(),
            params: vec![0.0; n],
            input_shift: vec![0.0; widths[0]],
            input_scale: vec![1.0; widths[0]],
            output_scale: vec![1.0; *widths.last().unwrap()],
        };
        mlp.init(scheme, seed);
        Ok(mlp)
    }

    /// `d -> 64 -> 64 -> out_dim`.
    pub fn default_for(dim: usize, out_dim: usize, seed: u64) -> Self {
        Self::new(&[dim, 64, 64, out_dim], InitScheme::Xavier, seed).expect("valid default widths")
    }

    pub fn init(&mut self, scheme: InitScheme, seed: u64) {
        self.params.iter_mut().for_each(|p| *p = 0.0);
        if scheme == InitScheme::Zero {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in self.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut self.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-a..a);
            }
            offset += fan_in * fan_out + fan_out;
        }
    }

    /// Fixes the affine input map, e.g. to send a domain box to `[-1, 1]^d`.
    pub fn with_input_normalization(mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != self.widths[0] || scale.len() != self.widths[0] || scale.iter().any(|&s| !(s > 0.0)) {
            return invalid("input normalization must match the input width with positive scales");
        }
        self.input_shift = shift;
        self.input_scale = scale;
        Ok(self)
    }

    /// Normalizes inputs from the box `[lo, hi]` to `[-1, 1]^d`.
    pub fn with_box(self, lo: &[f64], hi: &[f64]) -> Result<Self> {
        let shift = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let scale = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect();
        self.with_input_normalization(shift, scale)
    }

    pub fn with_output_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.out_dim() {
            return invalid("output scale must match the output width");
        }
        self.output_scale = scale;
        Ok(self)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Activations of every layer, input first.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(x.iter().zip(&self.input_shift).zip(&self.input_scale).map(|((v, s), c)| (v - s) / c).collect::<Vec<_>>());
        let mut offset = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let prev = &acts[l];
            let hidden = l + 1 < self.n_layers();
            let next: Vec<f64> = (0..n_out)
                .map(|r| {
                    let z = b[r] + w[r * n_in..(r + 1) * n_in].iter().zip(prev).map(|(a, p)| a * p).sum::<f64>();
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(next);
            offset += n_in * n_out + n_out;
        }
        acts
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        let acts = self.forward_all(x);
        for (o, (a, s)) in out.iter_mut().zip(acts.last().unwrap().iter().zip(&self.output_scale)) {
            *o = a * s;
        }
    }
}

impl VectorField for Mlp {
    /// Input width; the output width may differ (see [`Mlp::out_dim`]).
    fn dim(&self) -> usize {
        self.widths[0]
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.forward(x, out);
    }

    fn vjp_input(&self, x: &[f64], seed: &[f64], out: &mut [f64]) {
        let mut scratch = vec![0.0; self.params.len()];
        self.backward(x, seed, &mut scratch, Some(out));
    }
}

impl ParametricField for Mlp {
    fn out_dim(&self) -> usize {
        Mlp::out_dim(self)
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, theta: &[f64]) {
        self.params.copy_from_slice(theta);
    }

    fn backward(&self, x: &[f64], seed: &[f64], grad_params: &mut [f64], grad_input: Option<&mut [f64]>) {
        let acts = self.forward_all(x);
        let mut delta: Vec<f64> = seed.iter().zip(&self.output_scale).map(|(s, c)| s * c).collect();
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut offset = 0;
        for l in 0..self.n_layers() {
            offsets.push(offset);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for r in 0..n_out {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                let g = &mut grad_params[off + r * n_in..off + (r + 1) * n_in];
                g.iter_mut().zip(prev).for_each(|(gi, p)| *gi += dr * p);
                grad_params[off + n_in * n_out + r] += dr;
            }
            if l == 0 && grad_input.is_none() {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut back = vec![0.0; n_in];
            for r in 0..n_out {
                let dr = delta[r];
                if dr != 0.0 {
                    back.iter_mut().zip(&w[r * n_in..(r + 1) * n_in]).for_each(|(b, wi)| *b += dr * wi);
                }
            }
            if l > 0 {
                back.iter_mut().zip(prev).for_each(|(b, a)| *b *= 1.0 - a * a);
            }
            delta = back;
        }
        if let Some(gi) = grad_input {
            gi.iter_mut().zip(delta.iter().zip(&self.input_scale)).for_each(|(g, (d, s))| *g += d / s);
        }
    }

    fn architecture(&self) -> Architecture {
        Architecture::Mlp {
            widths: self.widths.clone(),
            activation: "tanh".into(),
            input_shift: self.input_shift.clone(),
            input_scale: self.input_scale.clone(),
            output_scale: self.output_scale.clone(),
        }
    }

    fn clone_box(&self) -> Box<dyn ParametricField> {
        Box::new(self.clone())
    }
}

/// `v_i(x) = sum_k theta_{i,k} phi_k(x)` over all monomials `phi_k` of total degree `<= degree`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeatures {
    dim: usize,
    out_dim: usize,
    degree: u32,
    exponents: Vec<Vec<u32>>,
    params: Vec<f64>,
}

impl LinearFeatures {
    pub fn new(dim: usize, out_dim: usize, degree: u32) -> Self {
        let mut exponents = vec![vec![]];
        for _ in 0..dim {
            exponents = exponents
                .into_iter()
                .flat_map(|e: Vec<u32>| {
                    let used: u32 = e.iter().sum();
                    (0..=degree - used).map(move |p| {
                        let mut next = e.clone();
                        next.push(p);
                        next
                    })
                })
                .collect();
        }
        exponents.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
        let n = exponents.len() * out_dim;
        Self { dim, out_dim, degree, exponents, params: vec![0.0; n] }
    }

    pub fn n_features(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.exponents.iter().map(|e| e.iter().zip(x).map(|(&p, v)| v.powi(p as i32)).product()).collect()
    }
}

impl VectorField for LinearFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let phi = self.features(x);
        let nf = phi.len();
        for (i, o) in out.iter_mut().enumerate().take(self.out_dim) {
            *o = self.params[i * nf..(i + 1) * nf].iter().zip(&phi).map(|(t, f)| t * f).sum();
        }
    }

    fn vjp_input(&self, x: &[f64], seed: &[f64], out: &mut [f64]) {
        let mut scratch = vec![0.0; self.params.len()];
        self.backward(x, seed, &mut scratch, Some(out));
    }
}

impl ParametricField for LinearFeatures {
    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, theta: &[f64]) {
        self.params.copy_from_slice(theta);
    }

    fn backward(&self, x: &[f64], seed: &[f64], grad_params: &mut [f64], grad_input: Option<&mut [f64]>) {
        let phi = self.features(x);
        let nf = phi.len();
        for i in 0..self.out_dim {
            grad_params[i * nf..(i + 1) * nf].iter_mut().zip(&phi).for_each(|(g, f)| *g += seed[i] * f);
        }
        if let Some(gi) = grad_input {
            for (k, e) in self.exponents.iter().enumerate() {
                let coeff: f64 = (0..self.out_dim).map(|i| seed[i] * self.params[i * nf + k]).sum();
                if coeff == 0.0 {
                    continue;
                }
                for a in 0..self.dim {
                    if e[a] == 0 {
                        continue;
                    }
                    let partial: f64 = (0..self.dim)
                        .map(|b| if b == a { e[b] as f64 * x[b].powi(e[b] as i32 - 1) } else { x[b].powi(e[b] as i32) })
                        .product();
                    gi[a] += coeff * partial;
                }
            }
        }
    }

    fn architecture(&self) -> Architecture {
        Architecture::Linear { dim: self.dim, out_dim: self.out_dim, degree: self.degree }
    }

    fn clone_box(&self) -> Box<dyn ParametricField> {
        Box::new(self.clone())
    }
}

/// Learns only the components listed in `learned`; the rest come from a reference field.
///
/// The inner model maps `R^d` to `R^{learned.len()}`.
#[derive(Clone)]
pub struct MaskedField {
    reference: OdeSystem,
    reference_params: BTreeMap<String, f64>,
    learned: Vec<usize>,
    inner: Box<dyn ParametricField>,
}

impl MaskedField {
    /// `reference` must be a builtin system name so checkpoints can rebuild it.
    pub fn new(reference: &str, reference_params: BTreeMap<String, f64>, learned: Vec<usize>, inner: Box<dyn ParametricField>) -> Result<Self> {
        let system = builtin(reference, &reference_params)?;
        let ode = system
            .as_ode()
            .ok_or_else(|| Error::InvalidArgument(format!("mask reference `{reference}` is not an ODE")))?
            .clone();
        let d = ode.dim();
        if learned.is_empty() || learned.iter().any(|&i| i >= d) {
            return invalid(format!("learned components {learned:?} out of range for dimension {d}"));
        }
        if inner.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: inner.dim() });
        }
        if inner.out_dim() != learned.len() {
            return Err(Error::DimensionMismatch { expected: learned.len(), got: inner.out_dim() });
        }
        Ok(Self { reference: ode, reference_params, learned, inner })
    }

    pub fn learned(&self) -> &[usize] {
        &self.learned
    }

    pub fn reference(&self) -> &OdeSystem {
        &self.reference
    }

    pub fn inner(&self) -> &dyn ParametricField {
        self.inner.as_ref()
    }
}

impl std::fmt::Debug for MaskedField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskedField")
            .field("reference", &self.reference.name)
            .field("learned", &self.learned)
            .finish()
    }
}

impl VectorField for MaskedField {
    fn dim(&self) -> usize {
        self.reference.dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.reference.eval(x, out);
        let mut learned = vec![0.0; self.learned.len()];
        self.inner.eval(x, &mut learned);
        for (&i, v) in self.learned.iter().zip(learned) {
            out[i] = v;
        }
    }

    fn vjp_input(&self, x: &[f64], seed: &[f64], out: &mut [f64]) {
        let mut scratch = vec![0.0; self.inner.n_params()];
        self.backward(x, seed, &mut scratch, Some(out));
    }
}

impl ParametricField for MaskedField {
    fn out_dim(&self) -> usize {
        self.reference.dim()
    }

    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn params(&self) -> &[f64] {
        self.inner.params()
    }

    fn set_params(&mut self, theta: &[f64]) {
        self.inner.set_params(theta);
    }

    fn backward(&self, x: &[f64], seed: &[f64], grad_params: &mut [f64], grad_input: Option<&mut [f64]>) {
        let inner_seed: Vec<f64> = self.learned.iter().map(|&i| seed[i]).collect();
        match grad_input {
            None => self.inner.backward(x, &inner_seed, grad_params, None),
            Some(gi) => {
                self.inner.backward(x, &inner_seed, grad_params, Some(gi));
                let mut pinned = seed.to_vec();
                self.learned.iter().for_each(|&i| pinned[i] = 0.0);
                if pinned.iter().any(|&v| v != 0.0) {
                    self.reference.vjp_input(x, &pinned, gi);
                }
            }
        }
    }

    fn architecture(&self) -> Architecture {
        Architecture::Masked {
            reference: self.reference.name.clone(),
            reference_params: self.reference_params.clone(),
            learned: self.learned.clone(),
            inner: Box::new(self.inner.architecture()),
        }
    }

    fn clone_box(&self) -> Box<dyn ParametricField> {
        Box::new(self.clone())
    }
}

/// Velocity parameterization used by the finite-volume fit.
#[derive(Debug, Clone)]
pub enum VelocityModel {
    /// One free value per interior face.
    Faces(FaceVelocities),
    /// A smooth field sampled at face centers.
    Field(Box<dyn ParametricField>),
}

impl VelocityModel {
    pub fn n_params(&self) -> usize {
        match self {
            VelocityModel::Faces(f) => f.n_interior(),
            VelocityModel::Field(m) => m.n_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            VelocityModel::Faces(f) => f.interior_faces().map(|(i, j)| f.get(i, j)).collect(),
            VelocityModel::Field(m) => m.params().to_vec(),
        }
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: theta.len() });
        }
        match self {
            VelocityModel::Faces(f) => {
                let faces: Vec<(usize, usize)> = f.interior_faces().collect();
                for ((i, j), &v) in faces.into_iter().zip(theta) {
                    f.set(i, j, v);
                }
            }
            VelocityModel::Field(m) => m.set_params(theta),
        }
        Ok(())
    }

    pub fn faces(&self, grid: &Grid) -> Result<FaceVelocities> {
        match self {
            VelocityModel::Faces(f) if f.grid() == grid => Ok(f.clone()),
            VelocityModel::Faces(_) => Err(Error::SupportMismatch("face model built on a different grid".into())),
            VelocityModel::Field(m) => FaceVelocities::sample(grid, m.as_ref()),
        }
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        let architecture = match self {
            VelocityModel::Faces(f) => Architecture::Faces { grid: f.grid().clone() },
            VelocityModel::Field(m) => m.architecture(),
        };
        ModelCheckpoint { architecture, params: self.params() }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let mut model = match &ckpt.architecture {
            Architecture::Faces { grid } => {
                grid.validate()?;
                VelocityModel::Faces(FaceVelocities::zeros(grid))
            }
            arch => VelocityModel::Field(build_field(arch)?),
        };
        model.set_params(&ckpt.params)?;
        Ok(model)
    }
}

/// Builds a zero-initialized field from its architecture descriptor.
pub fn build_field(arch: &Architecture) -> Result<Box<dyn ParametricField>> {
    Ok(match arch {
        Architecture::Mlp { widths, activation, input_shift, input_scale, output_scale } => {
            if activation != "tanh" {
                return Err(Error::Config(format!("unsupported activation `{activation}`")));
            }
            Box::new(
                Mlp::new(widths, InitScheme::Zero, 0)?
                    .with_input_normalization(input_shift.clone(), input_scale.clone())?
                    .with_output_scale(output_scale.clone())?,
            )
        }
        Architecture::Linear { dim, out_dim, degree } => Box::new(LinearFeatures::new(*dim, *out_dim, *degree)),
        Architecture::Masked { reference, reference_params, learned, inner } => {
            Box::new(MaskedField::new(reference, reference_params.clone(), learned.clone(), build_field(inner)?)?)
        }
        Architecture::Faces { .. } => return Err(Error::Config("face models are not smooth fields".into())),
    })
}

/// Architecture descriptor plus flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub architecture: Architecture,
    pub params: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn of_field(model: &dyn ParametricField) -> Self {
        Self { architecture: model.architecture(), params: model.params().to_vec() }
    }

    pub fn to_field(&self) -> Result<Box<dyn ParametricField>> {
        let mut field = build_field(&self.architecture)?;
        if field.n_params() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: field.n_params(), got: self.params.len() });
        }
        field.set_params(&self.params);
        Ok(field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::lorenz63;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn check_gradients(model: &mut dyn ParametricField, out_dim: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.dim();
        let theta0 = model.params().to_vec();
        for _ in 0..20 {
            let x = random_vec(d, &mut rng);
            let s = random_vec(out_dim, &mut rng);
            let mut gp = vec![0.0; model.n_params()];
            let mut gx = vec![0.0; d];
            model.backward(&x, &s, &mut gp, Some(&mut gx));
            let dir = random_vec(model.n_params(), &mut rng);
            let dir_x = random_vec(d, &mut rng);
            let h = 1e-6;
            let objective = |m: &dyn ParametricField, x: &[f64]| {
                let mut out = vec![0.0; d.max(out_dim)];
                m.eval(x, &mut out);
                out.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()
            };
            let shifted = |t: f64| theta0.iter().zip(&dir).map(|(a, b)| a + t * b).collect::<Vec<_>>();
            model.set_params(&shifted(h));
            let plus = objective(model, &x);
            model.set_params(&shifted(-h));
            let minus = objective(model, &x);
            model.set_params(&theta0);
            let fd = (plus - minus) / (2.0 * h);
            let an: f64 = gp.iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-2), "params: {fd} vs {an}");
            let xp: Vec<f64> = x.iter().zip(&dir_x).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&dir_x).map(|(a, b)| a - h * b).collect();
            let fd = (objective(model, &xp) - objective(model, &xm)) / (2.0 * h);
            let an: f64 = gx.iter().zip(&dir_x).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-2), "inputs: {fd} vs {an}");
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let m = Mlp::new(&[3, 8, 2], InitScheme::Zero, 0).unwrap();
        assert!(m.params().iter().all(|&p| p == 0.0));
        let mut out = [1.0; 2];
        m.eval(&[0.3, -1.0, 2.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_a_matvec() {
        let mut m = Mlp::new(&[2, 3], InitScheme::Zero, 0).unwrap();
        // W = [[1,2],[3,4],[5,6]], b = [0.5, -1, 2]
        m.set_params(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -1.0, 2.0]);
        let mut out = [0.0; 3];
        m.eval(&[1.0, -2.0], &mut out);
        assert_eq!(out, [-2.5, -6.0, -5.0]);
    }

    #[test]
    fn single_tanh_neuron_gradient() {
        // v(x) = w2 tanh(w1 x + b1) + b2
        let mut m = Mlp::new(&[1, 1, 1], InitScheme::Zero, 0).unwrap();
        let (w1, b1, w2, b2) = (0.7, -0.2, 1.3, 0.1);
        m.set_params(&[w1, b1, w2, b2]);
        let x = 0.9;
        let t = (w1 * x + b1).tanh();
        let mut g = vec![0.0; 4];
        let mut gx = vec![0.0];
        m.backward(&[x], &[2.0], &mut g, Some(&mut gx));
        let sech2 = 1.0 - t * t;
        let expect = [2.0 * w2 * sech2 * x, 2.0 * w2 * sech2, 2.0 * t, 2.0];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((gx[0] - 2.0 * w2 * sech2 * w1).abs() < 1e-15);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut m = Mlp::new(&[3, 7, 5, 2], InitScheme::Xavier, 4)
            .unwrap()
            .with_input_normalization(vec![0.1, 0.0, -0.2], vec![2.0, 1.0, 0.5])
            .unwrap()
            .with_output_scale(vec![3.0, 0.5])
            .unwrap();
        check_gradients(&mut m, 2, 1);
    }

    #[test]
    fn linear_features_gradients_and_values() {
        let mut m = LinearFeatures::new(2, 2, 3);
        assert_eq!(m.n_features(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        m.set_params(&random_vec(20, &mut rng));
        check_gradients(&mut m, 2, 2);
        let x = [0.4, -1.5];
        let phi = m.features(&x);
        let mut out = [0.0; 2];
        m.eval(&x, &mut out);
        let direct: f64 = (0..10).map(|k| m.params()[k] * phi[k]).sum();
        assert!((out[0] - direct).abs() < 1e-14);
    }

    #[test]
    fn masked_field_keeps_reference_components() {
        let inner = Mlp::new(&[3, 5, 1], InitScheme::Xavier, 3).unwrap();
        let mut masked = MaskedField::new("lorenz63", BTreeMap::new(), vec![0], Box::new(inner.clone())).unwrap();
        let x = [1.0, -2.0, 20.0];
        let (mut out, mut truth, mut learned) = ([0.0; 3], [0.0; 3], [0.0]);
        masked.eval(&x, &mut out);
        lorenz63(10.0, 28.0, 8.0 / 3.0).eval(&x, &mut truth);
        inner.eval(&x, &mut learned);
        assert_eq!(out[0], learned[0]);
        assert_eq!(&out[1..], &truth[1..]);
        check_gradients(&mut masked, 3, 5);
        assert!(MaskedField::new("lorenz63", BTreeMap::new(), vec![3], Box::new(inner)).is_err());
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let m = Mlp::new(&[2, 9, 9, 2], InitScheme::Xavier, 8).unwrap();
        let x = [0.3, -0.7];
        let (g1, g2) = ([1.0, -0.5], [0.25, 2.0]);
        let (a, b) = (1.7, -0.6);
        let run = |s: &[f64]| {
            let mut g = vec![0.0; m.n_params()];
            m.backward(&x, s, &mut g, None);
            g
        };
        let combo: Vec<f64> = g1.iter().zip(&g2).map(|(p, q)| a * p + b * q).collect();
        let (r1, r2, rc) = (run(&g1), run(&g2), run(&combo));
        for k in 0..m.n_params() {
            assert!((rc[k] - (a * r1[k] + b * r2[k])).abs() < 1e-12);
        }
        assert!(run(&[0.0, 0.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xavier_init_is_seeded_with_expected_variance() {
        let a = Mlp::new(&[64, 64, 64, 2], InitScheme::Xavier, 42).unwrap();
        let b = Mlp::new(&[64, 64, 64, 2], InitScheme::Xavier, 42).unwrap();
        assert_eq!(a.params(), b.params());
        let w1 = &a.params()[..64 * 64];
        let var = w1.iter().map(|w| w * w).sum::<f64>() / w1.len() as f64;
        let expect = 2.0 / 128.0;
        assert!((var / expect - 1.0).abs() < 0.2, "{var} vs {expect}");
        assert!(a.params()[64 * 64..64 * 65].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_backward_matches_loop() {
        let m = Mlp::new(&[2, 6, 2], InitScheme::Xavier, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_vec(2 * 700, &mut rng);
        let seeds = random_vec(2 * 700, &mut rng);
        let batch = backward_batch(&m, &pts, &seeds);
        let mut looped = vec![0.0; m.n_params()];
        for k in 0..700 {
            m.backward(&pts[2 * k..2 * k + 2], &seeds[2 * k..2 * k + 2], &mut looped, None);
        }
        for (a, b) in batch.iter().zip(&looped) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoints_round_trip() {
        let inner = Mlp::new(&[3, 4, 1], InitScheme::Xavier, 9).unwrap().with_box(&[-20.0, -30.0, 0.0], &[20.0, 30.0, 50.0]).unwrap();
        let masked = MaskedField::new("lorenz63", BTreeMap::new(), vec![0], Box::new(inner)).unwrap();
        let ckpt = ModelCheckpoint::of_field(&masked);
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        let rebuilt = back.to_field().unwrap();
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        masked.eval(&[1.0, 2.0, 3.0], &mut a);
        rebuilt.eval(&[1.0, 2.0, 3.0], &mut b);
        assert_eq!(a, b);

        let g = Grid::cube(&[0.0], &[1.0], 4).unwrap();
        let mut faces = VelocityModel::Faces(FaceVelocities::zeros(&g));
        faces.set_params(&[1.0, 2.0, 3.0]).unwrap();
        let back = VelocityModel::from_checkpoint(&faces.checkpoint()).unwrap();
        assert_eq!(back.params(), vec![1.0, 2.0, 3.0]);
        assert!(serde_json::from_str::<ModelCheckpoint>(r#"{"architecture":{"kind":"linear","dim":1,"out_dim":1,"degree":1},"params":[],"extra":1}"#).is_err());
    }
}
