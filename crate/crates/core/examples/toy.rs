//! Trains the 20-Gaussian toy scene and prints train PSNR as it goes.

use std::time::Instant;

use ugsplat::scene::Split;
use ugsplat::synthetic::{generate, SyntheticSpec};
use ugsplat::trainer::{TrainConfig, Trainer};

fn main() -> ugsplat::Result<()> {
    let iterations: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let syn = generate::<f64>(&SyntheticSpec::default())?;
    let cfg = TrainConfig {
        iterations,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(syn.scene, cfg)?;
    let start = Instant::now();
    println!("start: train psnr {:.2}", t.mean_psnr(Split::Train)?.unwrap());
    t.run_until(iterations, |t, r| {
        if r.iteration % 250 == 0 {
            let p = t.mean_psnr(Split::Train).unwrap().unwrap();
            println!(
                "{:5} loss {:.5} train psnr {:.2} n {} frozen {} ({:.1?})",
                r.iteration,
                r.loss,
                p,
                t.scene.gaussians.len(),
                t.model.is_frozen(),
                start.elapsed()
            );
        }
    })?;
    Ok(())
}
