//! Drive a full experiment from a JSON config through the library, the same
//! way the command-line front end does.
//!
//! `cargo run --release --example run_config -- configs/smoke.json`

use std::path::PathBuf;

use ergodic_sysid::cli::{cmd_eval, cmd_fit, cmd_histogram, cmd_simulate, ExperimentConfig};

fn main() -> ergodic_sysid::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("configs/smoke.json"));
    let cfg = ExperimentConfig::load(&path)?;
    cmd_simulate(&cfg)?;
    if cfg.histogram.is_some() {
        let m = cmd_histogram(&cfg)?;
        println!("histogram: {} cells", m.len());
    }
    if cfg.fit.is_some() {
        for report in cmd_fit(&cfg, None)? {
            println!("fit: loss {:.4e} -> {:.4e} over {} iterations", report.initial_loss(), report.final_loss(), report.iterations);
        }
    }
    if cfg.eval.is_some() {
        println!("eval: {}", cmd_eval(&cfg)?.0);
    }
    println!("artifacts in {}", cfg.out_dir().display());
    Ok(())
}
