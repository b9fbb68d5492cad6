//! Differentiable misfits between a model probability vector and a fixed target.
//!
//! The adjoint solver only needs `J(rho)` and `dJ/drho`, so any new objective
//! plugs in by implementing [`Objective`].

use serde::{Deserialize, Serialize};

use super::Measure;

pub trait Objective: Send + Sync {
    /// Value and gradient with respect to the model weights `rho`.
    fn value_and_grad(&self, rho: &[f64]) -> (f64, Vec<f64>);

    fn value(&self, rho: &[f64]) -> f64 {
        self.value_and_grad(rho).0
    }
}

/// `1/2 * integral |rho - rho*|^2` over piecewise-constant densities.
#[derive(Debug, Clone)]
pub struct L2Objective {
    target: Vec<f64>,
    volume: f64,
}

impl L2Objective {
    pub fn new(target: &Measure) -> Self {
        Self {
            target: target.weights().to_vec(),
            volume: target.support().cell_volume(),
        }
    }
}

impl Objective for L2Objective {
    fn value_and_grad(&self, rho: &[f64]) -> (f64, Vec<f64>) {
        let grad: Vec<f64> = rho.iter().zip(&self.target).map(|(p, q)| (p - q) / self.volume).collect();
        let value = 0.5 * rho.iter().zip(&self.target).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / self.volume;
        (value, grad)
    }
}

/// `sum rho* log(rho* / rho)` over cells where both are positive.
#[derive(Debug, Clone)]
pub struct KlObjective {
    target: Vec<f64>,
}

impl KlObjective {
    pub fn new(target: &Measure) -> Self {
        Self {
            target: target.weights().to_vec(),
        }
    }
}

impl Objective for KlObjective {
    fn value_and_grad(&self, rho: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; rho.len()];
        for (j, (&p, &q)) in rho.iter().zip(&self.target).enumerate() {
            if p > 0.0 && q > 0.0 {
                value += q * (q / p).ln();
                grad[j] = -q / p;
            }
        }
        (value, grad)
    }
}

/// Plain `1/2 |rho - rho*|^2` on probability vectors.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    target: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(target: &Measure) -> Self {
        Self {
            target: target.weights().to_vec(),
        }
    }
}

impl Objective for QuadraticObjective {
    fn value_and_grad(&self, rho: &[f64]) -> (f64, Vec<f64>) {
        let grad: Vec<f64> = rho.iter().zip(&self.target).map(|(p, q)| p - q).collect();
        let value = 0.5 * grad.iter().map(|g| g * g).sum::<f64>();
        (value, grad)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    #[default]
    L2,
    Kl,
    Quadratic,
}

impl ObjectiveKind {
    pub fn build(self, target: &Measure) -> Box<dyn Objective> {
        match self {
            ObjectiveKind::L2 => Box::new(L2Objective::new(target)),
            ObjectiveKind::Kl => Box::new(KlObjective::new(target)),
            ObjectiveKind::Quadratic => Box::new(QuadraticObjective::new(target)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{kl_divergence, l2_distance, Grid, Support};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn values_agree_with_distances() {
        let g = Grid::cube(&[0.0, 0.0], &[1.0, 2.0], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut random = || Measure::normalized((0..16).map(|_| rng.random::<f64>() + 0.01).collect(), Support::Grid(g.clone())).unwrap();
        let (model, target) = (random(), random());
        let l2 = L2Objective::new(&target).value(model.weights());
        assert!((l2 - l2_distance(&model, &target).unwrap()).abs() < 1e-14);
        let kl = KlObjective::new(&target).value(model.weights());
        assert!((kl - kl_divergence(&model, &target).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = Grid::cube(&[0.0], &[1.0], 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut target_w: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        target_w[3] = 0.0;
        let target = Measure::normalized(target_w, Support::Grid(g.clone())).unwrap();
        let rho: Vec<f64> = (0..12).map(|_| 0.05 + rng.random::<f64>() * 0.1).collect();
        for kind in [ObjectiveKind::L2, ObjectiveKind::Kl, ObjectiveKind::Quadratic] {
            let obj = kind.build(&target);
            let (_, grad) = obj.value_and_grad(&rho);
            for _ in 0..10 {
                let dir: Vec<f64> = (0..12).map(|_| rng.random::<f64>() - 0.5).collect();
                let h = 1e-6;
                let plus: Vec<f64> = rho.iter().zip(&dir).map(|(r, d)| r + h * d).collect();
                let minus: Vec<f64> = rho.iter().zip(&dir).map(|(r, d)| r - h * d).collect();
                let fd = (obj.value(&plus) - obj.value(&minus)) / (2.0 * h);
                let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{kind:?}: {fd} vs {an}");
            }
        }
    }
}
