//! First-iteration gradients of every fit driver against central differences
//! on three coordinates.

use ergodic_sysid::delay::{delay_loss_and_grad, DelayMapConfig, MapModel};
use ergodic_sysid::fvm::{cfl_dt, StationaryMethod, DEFAULT_SAFETY};
use ergodic_sysid::measure::{Grid, ObjectiveKind, SampleCloud};
use ergodic_sysid::optim::{fvm_forward, fvm_loss_and_grad, gradient_spot_check, DelayData, FvmSettings};
use ergodic_sysid::pfo::{build_mesh, flowmap_loss_and_grad, flowmap_markov, PartitionOfUnity, SourceSet};
use ergodic_sysid::systems::{integrate_ode, lorenz63, van_der_pol};
use ergodic_sysid::velocity::{InitScheme, MaskedField, Mlp, ParametricField, VelocityModel};

const TOL: f64 = 1e-3;

fn assert_checks(name: &str, checks: &[(usize, f64, f64, f64)]) {
    for &(i, analytic, fd, rel) in checks {
        assert!(rel < TOL, "{name}: theta[{i}] analytic {analytic:e} vs fd {fd:e} (rel {rel:e})");
    }
}

#[test]
fn fvm_driver_gradient() {
    for objective in [ObjectiveKind::L2, ObjectiveKind::Kl, ObjectiveKind::Quadratic] {
        for method in [StationaryMethod::Direct, StationaryMethod::Power] {
            let grid = Grid::new(vec![-3.0, -3.0], vec![3.0, 3.6], vec![10, 11]).unwrap();
            let settings = FvmSettings { diffusion: 0.1, eps: 1e-3, dt: cfl_dt(&grid, 0.1, 20.0, DEFAULT_SAFETY).unwrap(), objective, method };
            let truth = VelocityModel::Faces(ergodic_sysid::fvm::FaceVelocities::sample(&grid, &van_der_pol(1.0)).unwrap());
            let target = fvm_forward(&truth, &grid, &settings).unwrap();
            let net = Mlp::new(&[2, 8, 2], InitScheme::Xavier, 3).unwrap().with_box(&grid.lo, &grid.hi).unwrap();
            let model = VelocityModel::Field(Box::new(net));
            let theta = model.params();
            let checks = gradient_spot_check(&theta, &[1, 9, theta.len() - 2], 1e-6, |t| {
                let mut m = model.clone();
                m.set_params(t)?;
                fvm_loss_and_grad(&m, &target, &settings)
            })
            .unwrap();
            assert_checks(&format!("fvm {objective:?} {method:?}"), &checks);
        }
    }
}

#[test]
fn pfo_driver_gradient() {
    let truth = lorenz63(10.0, 28.0, 8.0 / 3.0);
    let traj = integrate_ode(&truth, &[1.0, 1.0, 20.0], 0.02, 3000, 1).unwrap().skip(500).unwrap();
    let cloud = SampleCloud::from_trajectory(&traj);
    let mesh = build_mesh(&cloud, 12, false, 0).unwrap();
    let sources = SourceSet::new(&mesh, cloud.strided(600)).unwrap();
    let pou = PartitionOfUnity::new(&mesh, 2.0).unwrap();
    let target = flowmap_markov(&truth, &sources, &pou, 0.05, 2).unwrap();
    let inner = Mlp::new(&[3, 6, 1], InitScheme::Xavier, 5).unwrap().with_box(&[-20.0, -25.0, 0.0], &[20.0, 25.0, 50.0]).unwrap();
    let params = [("c1".to_string(), 10.0), ("c2".to_string(), 28.0), ("c3".to_string(), 8.0 / 3.0)].into();
    let model = MaskedField::new("lorenz63", params, vec![0], Box::new(inner)).unwrap();
    let theta = model.params();
    let checks = gradient_spot_check(&theta, &[0, 7, theta.len() - 1], 1e-6, |t| {
        let mut m = model.clone();
        m.set_params(t);
        let out = flowmap_loss_and_grad(&m, &sources, &pou, &target, 0.05, 2)?;
        Ok((out.loss, out.grad))
    })
    .unwrap();
    assert_checks("pfo", &checks);
}

#[test]
fn delay_driver_gradients() {
    let traj = integrate_ode(&lorenz63(10.0, 28.0, 8.0 / 3.0), &[1.0, 1.0, 20.0], 0.05, 500, 5).unwrap().skip(100).unwrap();
    let cfg = DelayMapConfig::new(3).unwrap();
    let data = DelayData::from_trajectory(&traj, &cfg).unwrap();
    let net = Mlp::new(&[3, 8, 3], InitScheme::Xavier, 2).unwrap().with_box(&[-20.0, -25.0, 0.0], &[20.0, 25.0, 50.0]).unwrap();
    let model = MapModel::learned(Box::new(net), true).unwrap();
    let theta = model.params();
    for j2 in [false, true] {
        let checks = gradient_spot_check(&theta, &[2, 20, theta.len() - 1], 1e-6, |t| {
            let mut m = model.clone();
            m.set_params(t)?;
            let delay = j2.then_some((&data.observed_delay, &cfg));
            let out = delay_loss_and_grad(&m, &data.mu, &data.images, delay)?;
            Ok((out.value(), out.grad))
        })
        .unwrap();
        assert_checks(if j2 { "delay J2" } else { "delay J1" }, &checks);
    }
}
