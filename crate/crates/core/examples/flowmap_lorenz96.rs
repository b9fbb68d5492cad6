//! Learn the first velocity component of Lorenz-96 (d = 30) by matching
//! flow-map Markov matrices on a k-means mesh with a softplus partition of unity.

use std::time::Instant;

use ergodic_sysid::measure::SampleCloud;
use ergodic_sysid::optim::{fit_pfo, AdamConfig, FitOptions, FlowSettings, RunControl};
use ergodic_sysid::pfo::{build_mesh, flowmap_markov, PartitionOfUnity, SourceSet};
use ergodic_sysid::systems::{integrate_ode, lorenz96};
use ergodic_sysid::velocity::{InitScheme, MaskedField, Mlp};

fn main() -> ergodic_sysid::Result<()> {
    let d = 30;
    let truth = lorenz96(d, 8.0);
    let x0: Vec<f64> = (0..d).map(|i| if i == 0 { 8.01 } else { 8.0 }).collect();
    let traj = integrate_ode(&truth, &x0, 0.05, 21_000, 2)?.skip(1000)?;
    let cloud = SampleCloud::from_trajectory(&traj);

    let mesh = build_mesh(&cloud.strided(10_000), 200, false, 0)?;
    let sources = SourceSet::new(&mesh, cloud.strided(4000))?;
    let pou = PartitionOfUnity::new(&mesh, 5.0)?;
    let flow = FlowSettings { flow_dt: 0.1, substeps: 2 };
    let t = Instant::now();
    let target = flowmap_markov(&truth, &sources, &pou, flow.flow_dt, flow.substeps)?;
    println!("target matrix from {} sources in {:.2?}", sources.len(), t.elapsed());

    let (lo, hi) = (vec![-10.0; d], vec![14.0; d]);
    let inner = Mlp::new(&[d, 32, 32, 1], InitScheme::Xavier, 1)?.with_box(&lo, &hi)?.with_output_scale(vec![5.0])?;
    let params = [("dim".to_string(), d as f64), ("forcing".to_string(), 8.0)].into();
    let mut model = MaskedField::new("lorenz96", params, vec![0], Box::new(inner))?;
    let opts = FitOptions { n_iters: 200, adam: AdamConfig { lr: 0.005, ..AdamConfig::default() }, ..FitOptions::default() };
    let report = fit_pfo(&target, &mut model, &sources, &pou, flow, &opts, 0, RunControl::default())?;
    println!("Frobenius loss {:.4} -> {:.4} in {} iterations", report.initial_loss(), report.final_loss(), report.iterations);
    Ok(())
}
