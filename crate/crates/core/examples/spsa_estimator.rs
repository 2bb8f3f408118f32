//! Two-point SPSA on a linear and a quadratic objective.
//!
//! cargo run --release --example spsa_estimator

use zopro::optim::spsa_step;
use zopro::param::{sample_gaussian, NoiseSpec, ParamVector};
use zopro::seed::derive;

fn main() -> zopro::Result<()> {
    let d = 50;
    let c = sample_gaussian(NoiseSpec::new(1, d))?;
    let theta = ParamVector::zeros(d)?;

    // averaging g * z over many draws recovers the gradient of <c, theta>
    let mut mean = vec![0.0; d];
    let draws = 20_000;
    for i in 0..draws {
        let z = sample_gaussian(NoiseSpec::new(derive(2, &[i]), d))?;
        let out = spsa_step(&theta, |p, _| p.dot(&c), &z, 1e-3, 1.0, 0)?;
        for (m, zi) in mean.iter_mut().zip(z.as_slice()) {
            *m += out.projected_grad * zi / draws as f64;
        }
    }
    let mean = ParamVector::new(mean)?;
    println!("linear: cosine(mean estimate, c) = {:.4} after {draws} draws", mean.cosine(&c)?);

    // on a quadratic the central difference along z is the exact directional
    // derivative; steps ascend, so the bowl is upside down
    let quad = |p: &ParamVector, _: u64| Ok(p.as_slice()[0] - 0.5 * p.dot(p)?);
    let mut x = sample_gaussian(NoiseSpec::new(3, d))?;
    for step in 0..=300u64 {
        let z = sample_gaussian(NoiseSpec::new(derive(4, &[step]), d))?;
        let out = spsa_step(&x, quad, &z, 0.1, 0.01, 0)?;
        if step % 100 == 0 {
            println!("quadratic: step {step:3} J = {:+.5} g = {:+.4}", quad(&x, 0)?, out.projected_grad);
        }
        x = out.params;
    }
    Ok(())
}
