//! Train-minus-test PSNR gap on a sparse-view scene, with and without the
//! uncertainty mechanism, over several seeds.

use ugsplat::metrics::uncertainty_stats;
use ugsplat::scene::Split;
use ugsplat::softdrop::Mechanism;
use ugsplat::synthetic::{generate, InitKind, SyntheticSpec};
use ugsplat::trainer::{TrainConfig, Trainer};

fn main() -> ugsplat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let count: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(80);
    for seed in 0..seeds {
        let spec = SyntheticSpec {
            gaussians: 40,
            train_views: 5,
            test_views: 3,
            seed,
            init: InitKind::Sparse { count, log_scale: -1.8 },
            ..SyntheticSpec::default()
        };
        let mut row = Vec::new();
        for mech in [Mechanism::default(), Mechanism::disabled()] {
            let syn = generate::<f64>(&spec)?;
            let cfg = TrainConfig {
                iterations,
                seed,
                mechanism: mech,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(syn.scene, cfg)?;
            let cam = t.scene.train_views[0].camera.clone();
            let h0 = uncertainty_stats(&t.model, &t.scene.gaussians, &cam, 0, 0)?;
            t.run()?;
            let h1 = uncertainty_stats(&t.model, &t.scene.gaussians, &cam, 0, iterations)?;
            let tr = t.mean_psnr(Split::Train)?.unwrap();
            let te = t.mean_psnr(Split::Test)?.unwrap();
            row.push(format!(
                "train {tr:.2} test {te:.2} gap {:.2} med {:.3}->{:.3} band {:.2}->{:.2} frozen {:?} n {}",
                tr - te,
                h0.median,
                h1.median,
                h0.band_fraction,
                h1.band_fraction,
                t.state.freeze.frozen_at,
                t.scene.gaussians.len()
            ));
        }
        println!("seed {seed}\n  on : {}\n  off: {}", row[0], row[1]);
    }
    Ok(())
}
