//! Fit a discrete-time map to a Lorenz-63 orbit twice: with the state-only
//! loss J1 and with the delay-coordinate loss J2, from the same initialization.

use ergodic_sysid::delay::{pushforward_delay_measure, DelayMapConfig, MapModel, MMD_MAX_POINTS};
use ergodic_sysid::measure::{energy_mmd, SampleCloud};
use ergodic_sysid::optim::{fit_delay, AdamConfig, DelayData, DelayLossKind, FitOptions, RunControl};
use ergodic_sysid::systems::{integrate_ode, lorenz63};
use ergodic_sysid::velocity::{InitScheme, Mlp};

fn main() -> ergodic_sysid::Result<()> {
    let observed = integrate_ode(&lorenz63(10.0, 28.0, 8.0 / 3.0), &[1.0, 1.0, 20.0], 0.05, 1200, 5)?.skip(200)?;
    let cfg = DelayMapConfig::new(3)?;
    let data = DelayData::from_trajectory(&observed, &cfg)?;
    let cloud = SampleCloud::from_trajectory(&observed);
    let (lo, hi) = bounds(&cloud);
    let net = Mlp::new(&[3, 32, 32, 3], InitScheme::Xavier, 0)?.with_box(&lo, &hi)?;
    let init = MapModel::learned(Box::new(net), true)?;

    let opts = FitOptions { n_iters: 300, adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..FitOptions::default() };
    for kind in [DelayLossKind::J1, DelayLossKind::J2] {
        let mut model = init.clone();
        let report = fit_delay(&observed, &mut model, &cfg, kind, &opts, 0, RunControl::default())?;
        let pushed = pushforward_delay_measure(&data.mu.strided(MMD_MAX_POINTS), &model, &cfg)?;
        let mmd = energy_mmd(&pushed, &data.observed_delay)?;
        println!("{kind:?}: loss {:.3e} -> {:.3e}, delay-measure MMD {mmd:.3e}", report.initial_loss(), report.final_loss());
    }
    Ok(())
}

fn bounds(cloud: &SampleCloud) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; cloud.dim()];
    let mut hi = vec![f64::NEG_INFINITY; cloud.dim()];
    for p in cloud.points() {
        for i in 0..p.len() {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    (lo, hi)
}
