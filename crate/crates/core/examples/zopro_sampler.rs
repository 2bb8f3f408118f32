//! Geometry of adaptive perturbations across one iteration's alpha schedule.
//!
//! cargo run --release --example zopro_sampler

use zopro::analysis::relative_angle;
use zopro::optim::{zopro_direction, IterationState};
use zopro::param::{sample_gaussian, NoiseSpec};

fn main() -> zopro::Result<()> {
    let (d, steps) = (2000, 11);
    let delta_pi = sample_gaussian(NoiseSpec::new(1, d))?.scaled(0.05);
    let delta_r = sample_gaussian(NoiseSpec::new(2, d))?.offset(3.0, &delta_pi)?;
    println!("|dpi| = {:.4}, angle(dpi, dR) = {:.2} deg", delta_pi.norm(), relative_angle(&delta_pi, &delta_r)?);
    println!("step  alpha  |z|      angle(z, dpi)  angle(z, dR)");
    for step in 0..steps {
        let state = IterationState {
            delta_pi: Some(delta_pi.clone()),
            delta_r: Some(delta_r.clone()),
            step_index: step,
            iteration_index: 2,
        };
        let dir = zopro_direction(&state, steps, d, 100 + step as u64)?;
        println!(
            "{step:4}  {:.2}   {:.4}   {:12.4}   {:11.6}",
            dir.alpha().unwrap_or(f64::NAN),
            dir.z.norm(),
            relative_angle(&dir.z, &delta_pi)?,
            relative_angle(&dir.z, &delta_r)?,
        );
    }
    Ok(())
}
