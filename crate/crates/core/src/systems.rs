//! Benchmark dynamical systems and the integrators that generate inference data.
//!
//! Continuous-time systems implement [`VectorField`]; learned velocity models
//! implement the same trait so every integrator here also runs on them.
//! Stochastic paths use isotropic constant diffusion `sigma = sqrt(2 D) I`, so
//! the associated Fokker-Planck equation carries `D * Laplacian(rho)`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// Any coordinate beyond this magnitude aborts integration.
pub const BLOWUP_LIMIT: f64 = 1e12;

/// A (possibly learned) vector field `v: R^d -> R^d`.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], out: &mut [f64]);

    /// Accumulates `J(x)^T seed` into `out`, where `J` is the Jacobian of `v` at `x`.
    ///
    /// The default uses central differences; analytic fields override it.
    fn vjp_input(&self, x: &[f64], seed: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for k in 0..d {
            let h = 1e-6 * (1.0 + x[k].abs());
            xp[k] = x[k] + h;
            self.eval(&xp, &mut fp);
            xp[k] = x[k] - h;
            self.eval(&xp, &mut fm);
            xp[k] = x[k];
            let mut acc = 0.0;
            for i in 0..d {
                acc += seed[i] * (fp[i] - fm[i]);
            }
            out[k] += acc / (2.0 * h);
        }
    }
}

type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type VjpFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// An autonomous ODE `x' = v(x)` with named parameters.
#[derive(Clone)]
pub struct OdeSystem {
    pub name: String,
    pub dim: usize,
    pub params: Vec<(String, f64)>,
    rhs: FieldFn,
    vjp: Option<VjpFn>,
}

impl OdeSystem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        params: Vec<(String, f64)>,
        rhs: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            params,
            rhs: Arc::new(rhs),
            vjp: None,
        }
    }

    /// Attaches an analytic vector-Jacobian product `out += J(x)^T seed`.
    pub fn with_vjp(
        mut self,
        vjp: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.vjp = Some(Arc::new(vjp));
        self
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("params", &self.params)
            .finish()
    }
}

impl VectorField for OdeSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.rhs)(x, out)
    }

    fn vjp_input(&self, x: &[f64], seed: &[f64], out: &mut [f64]) {
        match &self.vjp {
            Some(vjp) => vjp(x, seed, out),
            None => {
                let d = self.dim;
                let mut xp = x.to_vec();
                let mut fp = vec![0.0; d];
                let mut fm = vec![0.0; d];
                for k in 0..d {
                    let h = 1e-6 * (1.0 + x[k].abs());
                    xp[k] = x[k] + h;
                    self.eval(&xp, &mut fp);
                    xp[k] = x[k] - h;
                    self.eval(&xp, &mut fm);
                    xp[k] = x[k];
                    let acc: f64 = (0..d).map(|i| seed[i] * (fp[i] - fm[i])).sum();
                    out[k] += acc / (2.0 * h);
                }
            }
        }
    }
}

/// A self-map `T: X -> X` on a box domain.
#[derive(Clone)]
pub struct DiscreteMap {
    pub name: String,
    pub dim: usize,
    /// Declared domain box `(lo, hi)`, if the map is confined to one.
    pub domain: Option<(Vec<f64>, Vec<f64>)>,
    step: FieldFn,
}

impl DiscreteMap {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        domain: Option<(Vec<f64>, Vec<f64>)>,
        step: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            domain,
            step: Arc::new(step),
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        (self.step)(x, out)
    }

    pub fn image(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply(x, &mut out);
        out
    }
}

impl fmt::Debug for DiscreteMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteMap")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("domain", &self.domain)
            .finish()
    }
}

/// An ordered sequence of states sampled every `dt` time units (`dt = 0` for maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    data: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
}

impl Trajectory {
    pub fn from_flat(dim: usize, data: Vec<f64>, dt: f64, seed: u64) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return invalid("trajectory needs at least one state of positive dimension");
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("trajectory contains non-finite values");
        }
        Ok(Self { dim, data, dt, seed })
    }

    pub fn from_states(states: &[Vec<f64>], dt: f64, seed: u64) -> Result<Self> {
        let dim = states.first().map_or(0, |s| s.len());
        if states.iter().any(|s| s.len() != dim) {
            return invalid("ragged trajectory states");
        }
        Self::from_flat(dim, states.concat(), dt, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Drops the first `n` states.
    pub fn skip(&self, n: usize) -> Result<Self> {
        Self::from_flat(self.dim, self.data[n * self.dim..].to_vec(), self.dt, self.seed)
    }

    /// Keeps every `stride`-th state.
    pub fn thin(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let data = self.states().step_by(stride).flatten().copied().collect();
        Self {
            dim: self.dim,
            data,
            dt: self.dt * stride as f64,
            seed: self.seed,
        }
    }
}

fn guard(step: usize, x: &[f64]) -> Result<()> {
    for (component, &value) in x.iter().enumerate() {
        if !value.is_finite() || value.abs() > BLOWUP_LIMIT {
            return Err(Error::IntegrationBlowup {
                step,
                component,
                value,
            });
        }
    }
    Ok(())
}

/// Workspace for classical fourth-order Runge-Kutta steps.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }

    pub(crate) fn step(&mut self, field: &dyn VectorField, x: &mut [f64], h: f64) {
        let d = x.len();
        field.eval(x, &mut self.k1);
        for i in 0..d {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        field.eval(&self.tmp, &mut self.k2);
        for i in 0..d {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        field.eval(&self.tmp, &mut self.k3);
        for i in 0..d {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        field.eval(&self.tmp, &mut self.k4);
        for i in 0..d {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

fn check_stepping(field: &dyn VectorField, x0: &[f64], dt: f64, substeps: usize) -> Result<()> {
    if x0.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: x0.len(),
        });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    if substeps == 0 {
        return invalid("substeps must be at least 1");
    }
    guard(0, x0)
}

/// Fixed-step RK4 solution of `x' = v(x)`, sampled every `dt` with `substeps`
/// internal steps per sample. Returns `n_steps + 1` states.
pub fn integrate_ode(
    field: &dyn VectorField,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    substeps: usize,
) -> Result<Trajectory> {
    check_stepping(field, x0, dt, substeps)?;
    let d = field.dim();
    let h = dt / substeps as f64;
    let mut rk = Rk4::new(d);
    let mut x = x0.to_vec();
    let mut data = Vec::with_capacity((n_steps + 1) * d);
    data.extend_from_slice(&x);
    for step in 1..=n_steps {
        for _ in 0..substeps {
            rk.step(field, &mut x, h);
        }
        guard(step, &x)?;
        data.extend_from_slice(&x);
    }
    Ok(Trajectory { dim: d, data, dt, seed: 0 })
}

/// Euler-Maruyama path of `dX = v(X) dt + sqrt(2 D) dW`, sampled every `dt`
/// with `substeps` internal steps. `D = 0` is explicit Euler.
pub fn integrate_sde(
    field: &dyn VectorField,
    diffusion: f64,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    substeps: usize,
    seed: u64,
) -> Result<Trajectory> {
    check_stepping(field, x0, dt, substeps)?;
    if !(diffusion >= 0.0) {
        return invalid(format!("diffusion must be nonnegative, got {diffusion}"));
    }
    let d = field.dim();
    let h = dt / substeps as f64;
    let noise = (2.0 * diffusion * h).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.to_vec();
    let mut v = vec![0.0; d];
    let mut data = Vec::with_capacity((n_steps + 1) * d);
    data.extend_from_slice(&x);
    for step in 1..=n_steps {
        for _ in 0..substeps {
            field.eval(&x, &mut v);
            for i in 0..d {
                x[i] += h * v[i];
                if diffusion > 0.0 {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    x[i] += noise * xi;
                }
            }
        }
        guard(step, &x)?;
        data.extend_from_slice(&x);
    }
    Ok(Trajectory { dim: d, data, dt, seed })
}

/// Orbit `x0, T(x0), ..., T^n(x0)`.
pub fn iterate_map(map: &DiscreteMap, x0: &[f64], n_iters: usize) -> Result<Trajectory> {
    if x0.len() != map.dim {
        return Err(Error::DimensionMismatch {
            expected: map.dim,
            got: x0.len(),
        });
    }
    guard(0, x0)?;
    let d = map.dim;
    let mut x = x0.to_vec();
    let mut next = vec![0.0; d];
    let mut data = Vec::with_capacity((n_iters + 1) * d);
    data.extend_from_slice(&x);
    for step in 1..=n_iters {
        map.apply(&x, &mut next);
        guard(step, &next)?;
        std::mem::swap(&mut x, &mut next);
        data.extend_from_slice(&x);
    }
    Ok(Trajectory { dim: d, data, dt: 0.0, seed: 0 })
}

/// A catalog entry: either a flow or a map.
#[derive(Debug, Clone)]
pub enum System {
    Ode(OdeSystem),
    Map(DiscreteMap),
}

impl System {
    pub fn dim(&self) -> usize {
        match self {
            System::Ode(s) => s.dim,
            System::Map(m) => m.dim,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            System::Ode(s) => &s.name,
            System::Map(m) => &m.name,
        }
    }

    pub fn as_ode(&self) -> Option<&OdeSystem> {
        match self {
            System::Ode(s) => Some(s),
            System::Map(_) => None,
        }
    }

    pub fn as_map(&self) -> Option<&DiscreteMap> {
        match self {
            System::Map(m) => Some(m),
            System::Ode(_) => None,
        }
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: &[&str] = &[
    "vdp",
    "lorenz63",
    "lorenz96",
    "cat",
    "cat_modified",
    "torus",
    "doubling",
    "identity",
    "double_well",
];

/// Looks up a benchmark system by name. Recognised parameters (all optional):
///
/// | system       | parameters                          |
/// |--------------|-------------------------------------|
/// | `vdp`        | `c` (2)                             |
/// | `lorenz63`   | `c1` (10), `c2` (28), `c3` (8/3)    |
/// | `lorenz96`   | `dim` (30), `forcing` (8)           |
/// | `torus`      | `alpha` (0.3), `beta` (sqrt 2 - 1)  |
/// | `identity`   | `dim` (1)                           |
/// | `double_well`| `a` (1)                             |
pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<System> {
    let get = |k: &str, default: f64| params.get(k).copied().unwrap_or(default);
    let unit_box = |d: usize| Some((vec![0.0; d], vec![1.0; d]));
    let sys = match name {
        "vdp" => System::Ode(van_der_pol(get("c", 2.0))),
        "lorenz63" => System::Ode(lorenz63(get("c1", 10.0), get("c2", 28.0), get("c3", 8.0 / 3.0))),
        "lorenz96" => {
            let dim = get("dim", 30.0);
            if dim < 4.0 || dim.fract() != 0.0 {
                return invalid(format!("lorenz96 needs an integer dim >= 4, got {dim}"));
            }
            System::Ode(lorenz96(dim as usize, get("forcing", 8.0)))
        }
        "cat" => System::Map(DiscreteMap::new("cat", 2, unit_box(2), |x, out| {
            out.copy_from_slice(&cat_step(x[0], x[1]))
        })),
        "cat_modified" => System::Map(DiscreteMap::new("cat_modified", 2, unit_box(2), |x, out| {
            // Conjugating by x -> x^(1/10) carries Lebesgue to the density 10 x^9.
            let u = x[0].max(0.0).powi(10);
            let [a, b] = cat_step(u, x[1]);
            out[0] = a.powf(0.1);
            out[1] = b;
        })),
        "torus" => System::Map(torus_rotation(get("alpha", 0.3), get("beta", 2f64.sqrt() - 1.0))),
        "doubling" => System::Map(DiscreteMap::new("doubling", 1, unit_box(1), |x, out| {
            out[0] = (2.0 * x[0]).rem_euclid(1.0)
        })),
        "identity" => {
            let dim = get("dim", 1.0) as usize;
            System::Map(DiscreteMap::new("identity", dim.max(1), None, |x, out| {
                out.copy_from_slice(x)
            }))
        }
        "double_well" => System::Ode(double_well(get("a", 1.0))),
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    Ok(sys)
}

fn cat_step(x: f64, y: f64) -> [f64; 2] {
    [(2.0 * x + y).rem_euclid(1.0), (x + y).rem_euclid(1.0)]
}

/// `x' = a x - x^3`: wells at `+-sqrt(a)`.
pub fn double_well(a: f64) -> OdeSystem {
    OdeSystem::new("double_well", 1, vec![("a".into(), a)], move |x, out| {
        out[0] = a * x[0] - x[0] * x[0] * x[0];
    })
    .with_vjp(move |x, s, out| {
        out[0] += s[0] * (a - 3.0 * x[0] * x[0]);
    })
}

/// `x' = y, y' = c (1 - x^2) y - x`.
pub fn van_der_pol(c: f64) -> OdeSystem {
    OdeSystem::new("vdp", 2, vec![("c".into(), c)], move |x, out| {
        out[0] = x[1];
        out[1] = c * (1.0 - x[0] * x[0]) * x[1] - x[0];
    })
    .with_vjp(move |x, s, out| {
        out[0] += s[1] * (-2.0 * c * x[0] * x[1] - 1.0);
        out[1] += s[0] + s[1] * c * (1.0 - x[0] * x[0]);
    })
}

pub fn lorenz63(c1: f64, c2: f64, c3: f64) -> OdeSystem {
    let params = vec![("c1".into(), c1), ("c2".into(), c2), ("c3".into(), c3)];
    OdeSystem::new("lorenz63", 3, params, move |x, out| {
        out[0] = c1 * (x[1] - x[0]);
        out[1] = x[0] * (c2 - x[2]) - x[1];
        out[2] = x[0] * x[1] - c3 * x[2];
    })
    .with_vjp(move |x, s, out| {
        out[0] += -c1 * s[0] + (c2 - x[2]) * s[1] + x[1] * s[2];
        out[1] += c1 * s[0] - s[1] + x[0] * s[2];
        out[2] += -x[0] * s[1] - c3 * s[2];
    })
}

/// `x_i' = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F` with cyclic indices.
pub fn lorenz96(dim: usize, forcing: f64) -> OdeSystem {
    let params = vec![("dim".into(), dim as f64), ("forcing".into(), forcing)];
    OdeSystem::new("lorenz96", dim, params, move |x, out| {
        let d = x.len();
        for i in 0..d {
            let ip1 = (i + 1) % d;
            let im1 = (i + d - 1) % d;
            let im2 = (i + d - 2) % d;
            out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
        }
    })
    .with_vjp(|x, s, out| {
        let d = x.len();
        for i in 0..d {
            let ip1 = (i + 1) % d;
            let im1 = (i + d - 1) % d;
            let im2 = (i + d - 2) % d;
            out[ip1] += s[i] * x[im1];
            out[im2] -= s[i] * x[im1];
            out[im1] += s[i] * (x[ip1] - x[im2]);
            out[i] -= s[i];
        }
    })
}

/// `T(z1, z2) = (z1 + alpha, z2 + beta) mod 1`.
pub fn torus_rotation(alpha: f64, beta: f64) -> DiscreteMap {
    DiscreteMap::new(
        format!("torus({alpha},{beta})"),
        2,
        Some((vec![0.0; 2], vec![1.0; 2])),
        move |x, out| {
            out[0] = (x[0] + alpha).rem_euclid(1.0);
            out[1] = (x[1] + beta).rem_euclid(1.0);
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> OdeSystem {
        OdeSystem::new("decay", 1, vec![], |x, out| out[0] = -x[0])
    }

    #[test]
    fn zero_field_is_constant() {
        let sys = OdeSystem::new("zero", 2, vec![], |_, out| out.fill(0.0));
        let traj = integrate_ode(&sys, &[1.0, 2.0], 0.37, 5, 3).unwrap();
        assert_eq!(traj.len(), 6);
        assert!(traj.states().all(|s| s == [1.0, 2.0]));
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let traj = integrate_ode(&decay(), &[1.0], 0.1, 10, 1).unwrap();
        assert!((traj.last()[0] - (-1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |dt: f64| {
            let n = (1.0 / dt).round() as usize;
            let t = integrate_ode(&decay(), &[1.0], dt, n, 1).unwrap();
            (t.last()[0] - (-1f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn van_der_pol_settles_on_limit_cycle() {
        let sys = van_der_pol(2.0);
        let traj = integrate_ode(&sys, &[0.1, 0.0], 0.05, 4000, 5).unwrap();
        for s in traj.states().skip(2000) {
            let r = (s[0] * s[0] + s[1] * s[1]).sqrt();
            assert!(r > 0.8 && r < 4.5, "radius {r}");
        }
    }

    #[test]
    fn blowup_reports_step() {
        let sys = OdeSystem::new("explode", 1, vec![], |x, out| out[0] = x[0] * x[0]);
        match integrate_ode(&sys, &[1.0], 0.5, 100, 1) {
            Err(Error::IntegrationBlowup { step, .. }) => assert!(step >= 1 && step < 100),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn sde_without_noise_is_euler() {
        let sys = van_der_pol(1.0);
        let path = integrate_sde(&sys, 0.0, &[1.0, 0.5], 0.01, 50, 1, 7).unwrap();
        let mut x = vec![1.0, 0.5];
        let mut v = vec![0.0; 2];
        for k in 1..=50 {
            sys.eval(&x, &mut v);
            x[0] += 0.01 * v[0];
            x[1] += 0.01 * v[1];
            assert_eq!(path.state(k), x.as_slice());
        }
    }

    #[test]
    fn euler_and_rk4_agree_to_first_order() {
        let sys = van_der_pol(1.0);
        let gap = |dt: f64| {
            let n = (2.0 / dt).round() as usize;
            let a = integrate_sde(&sys, 0.0, &[1.0, 0.5], dt, n, 1, 0).unwrap();
            let b = integrate_ode(&sys, &[1.0, 0.5], dt, n, 1).unwrap();
            let (p, q) = (a.last(), b.last());
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        };
        let (g1, g2) = (gap(0.01), gap(0.005));
        assert!(g1 < 0.05);
        let ratio = g1 / g2;
        assert!((1.6..2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn brownian_increment_variance() {
        let sys = OdeSystem::new("zero", 1, vec![], |_, out| out[0] = 0.0);
        let (d, dt, n) = (0.5, 0.01, 100_000);
        let path = integrate_sde(&sys, d, &[0.0], dt, n, 1, 42).unwrap();
        let incs: Vec<f64> = path.as_flat().windows(2).map(|w| w[1] - w[0]).collect();
        let mean = incs.iter().sum::<f64>() / n as f64;
        let var = incs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = 2.0 * d * dt;
        assert!((var / expected - 1.0).abs() < 0.1, "var {var} vs {expected}");
    }

    #[test]
    fn sde_is_reproducible_per_seed() {
        let sys = lorenz63(10.0, 28.0, 8.0 / 3.0);
        let a = integrate_sde(&sys, 10.0, &[1.0, 1.0, 20.0], 0.01, 200, 2, 3).unwrap();
        let b = integrate_sde(&sys, 10.0, &[1.0, 1.0, 20.0], 0.01, 200, 2, 3).unwrap();
        let c = integrate_sde(&sys, 10.0, &[1.0, 1.0, 20.0], 0.01, 200, 2, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.as_flat(), c.as_flat());
    }

    #[test]
    fn stochastic_lorenz_stays_bounded() {
        let sys = lorenz63(10.0, 28.0, 8.0 / 3.0);
        let path = integrate_sde(&sys, 10.0, &[1.0, 1.0, 20.0], 0.01, 20_000, 2, 11).unwrap();
        for s in path.states() {
            assert!(s[0].abs() < 40.0 && s[1].abs() < 50.0 && s[2] > -15.0 && s[2] < 70.0);
        }
    }

    #[test]
    fn torus_rotation_orbit() {
        let map = torus_rotation(0.3, 0.77);
        let traj = iterate_map(&map, &[0.0, 0.0], 4).unwrap();
        let first: Vec<f64> = traj.states().map(|s| s[0]).collect();
        for (a, b) in first.iter().zip([0.0, 0.3, 0.6, 0.9, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_map_is_constant() {
        let sys = builtin("identity", &BTreeMap::from([("dim".to_string(), 3.0)])).unwrap();
        let traj = iterate_map(sys.as_map().unwrap(), &[0.1, 0.2, 0.3], 10).unwrap();
        assert!(traj.states().all(|s| s == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn modified_cat_map_stays_in_unit_square() {
        let sys = builtin("cat_modified", &BTreeMap::new()).unwrap();
        let traj = iterate_map(sys.as_map().unwrap(), &[0.5, 0.25], 10_000).unwrap();
        assert!(traj.states().all(|s| s.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn catalog_dimensions() {
        let none = BTreeMap::new();
        assert_eq!(builtin("lorenz63", &none).unwrap().dim(), 3);
        assert_eq!(builtin("lorenz96", &none).unwrap().dim(), 30);
        let l96 = builtin("lorenz96", &BTreeMap::from([("dim".into(), 12.0)])).unwrap();
        assert_eq!(l96.dim(), 12);
        assert_eq!(builtin("vdp", &none).unwrap().as_ode().unwrap().param("c"), Some(2.0));
        assert!(builtin("cat_modified", &none).unwrap().as_map().is_some());
        assert_eq!(builtin("double_well", &none).unwrap().dim(), 1);
        assert!(matches!(builtin("pendulum", &none), Err(Error::UnknownSystem(_))));
    }

    #[test]
    fn analytic_vjp_matches_differences() {
        let systems = [van_der_pol(2.0), lorenz63(10.0, 28.0, 8.0 / 3.0), lorenz96(7, 8.0), double_well(1.5)];
        for sys in systems {
            let d = sys.dim;
            let x: Vec<f64> = (0..d).map(|i| 0.3 + 0.7 * i as f64).collect();
            let s: Vec<f64> = (0..d).map(|i| 1.0 - 0.2 * i as f64).collect();
            let mut analytic = vec![0.0; d];
            sys.vjp_input(&x, &s, &mut analytic);
            let plain = OdeSystem::new("fd", d, vec![], {
                let sys = sys.clone();
                move |x, out| sys.eval(x, out)
            });
            let mut numeric = vec![0.0; d];
            plain.vjp_input(&x, &s, &mut numeric);
            for (a, b) in analytic.iter().zip(&numeric) {
                assert!((a - b).abs() < 1e-5 * (1.0 + a.abs()), "{} {a} {b}", sys.name);
            }
        }
    }
}
