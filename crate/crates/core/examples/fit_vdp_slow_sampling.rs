//! Identify Van der Pol (c = 2) from 1000 states sampled every 4 time units.
//! Only the second velocity component is learned; x' = y is kept.
//!
//! `cargo run --release --example fit_vdp_slow_sampling`

use ergodic_sysid::cli::{cmd_eval, cmd_fit, ExperimentConfig};

fn main() -> ergodic_sysid::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/fig1_vdp.json");
    let mut cfg = ExperimentConfig::load(path.as_ref())?;
    cfg.out = Some(std::env::temp_dir().join("fig1_vdp"));
    let report = cmd_fit(&cfg, None)?.remove(0);
    println!("L2 loss {:.4} -> {:.4}", report.initial_loss(), report.final_loss());
    let metrics = cmd_eval(&cfg)?;
    println!("W2(simulated, observed) = {:.4}", metrics.0["w2"]);
    Ok(())
}
