//! Linear variance schedule: cumulative signal, closed-form forward sampling
//! and the strided step subsets used at inference.
//!
//! `cargo run --example noise_schedule`

use candle_core::{Device, Tensor};
use lpdo::schedule::NoiseSchedule;

fn main() -> lpdo::Result<()> {
    let schedule = NoiseSchedule::linear(20, 1e-4, 0.02)?;
    println!("{:>4} {:>10} {:>10} {:>10}", "t", "beta", "alpha_bar", "snr");
    for t in [1, 5, 10, 15, 20] {
        println!("{t:>4} {:>10.5} {:>10.5} {:>10.3}", schedule.beta(t), schedule.alpha_bar(t), schedule.snr(t));
    }

    let x0 = Tensor::new(&[[1.0f64, -2.0, 0.5]], &Device::Cpu)?;
    let noise = Tensor::new(&[[0.3f64, 0.1, -0.7]], &Device::Cpu)?;
    let x_t = schedule.q_sample(&x0, 20, &noise)?;
    println!("x_0  = {:?}", x0.to_vec2::<f64>()?[0]);
    println!("x_20 = {:?}", x_t.to_vec2::<f64>()?[0]);
    // The last reverse step returns the denoiser's estimate unchanged.
    let back = schedule.posterior_step(&x_t, &x0, 1, &noise)?;
    println!("posterior at t=1 returns x0_hat: {}", back.to_vec2::<f64>()? == x0.to_vec2::<f64>()?);

    for n in [1, 2, 5, 20] {
        println!("{n:>2} steps visit {:?}", schedule.inference_timesteps(n)?);
    }
    Ok(())
}
