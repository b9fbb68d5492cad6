//! Two torus rotations share the uniform invariant measure, but their
//! delay-coordinate measures differ.

use ergodic_sysid::delay::{delay_embed, DelayMapConfig};
use ergodic_sysid::measure::{energy_mmd, SampleCloud};
use ergodic_sysid::systems::{iterate_map, torus_rotation};

fn main() -> ergodic_sysid::Result<()> {
    let a = torus_rotation(2f64.sqrt() - 1.0, 3f64.sqrt() - 1.0);
    let b = torus_rotation(5f64.sqrt() - 2.0, 7f64.sqrt() - 2.0);
    let cfg = DelayMapConfig::new(2)?;
    let ta = iterate_map(&a, &[0.1, 0.2], 4000)?;
    let tb = iterate_map(&b, &[0.1, 0.2], 4000)?;
    let ta2 = iterate_map(&a, &[0.7, 0.4], 4000)?;

    let state = energy_mmd(&SampleCloud::from_trajectory(&ta), &SampleCloud::from_trajectory(&tb))?;
    let delay = energy_mmd(&delay_embed(&ta, &cfg)?, &delay_embed(&tb, &cfg)?)?;
    let baseline = energy_mmd(&delay_embed(&ta, &cfg)?, &delay_embed(&ta2, &cfg)?)?;
    println!("state-coordinate MMD   {state:.2e}");
    println!("delay-coordinate MMD   {delay:.2e}");
    println!("same-system baseline   {baseline:.2e}");
    Ok(())
}
