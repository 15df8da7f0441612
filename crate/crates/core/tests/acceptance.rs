//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Set `UGSPLAT_ACCEPT` to a comma-separated list of criterion numbers to run
//! a subset, e.g. `UGSPLAT_ACCEPT=2,3`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use common::{
    hashgrid_check, loss_check, mlp_check, random_camera, random_gaussians, raster_check, rng, softdrop_check,
};
use ugsplat::checkpoint;
use ugsplat::metrics::UncertaintyHistogram;
use ugsplat::raster::{render, render_reference, RasterConfig};
use ugsplat::scene::Split;
use ugsplat::softdrop::{clamp_weight, soft_drop_weight, Mechanism, SoftDropConfig};
use ugsplat::synthetic::{generate, InitKind, SyntheticSpec};
use ugsplat::trainer::{check_freeze, metrics_csv, FreezeState, TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = [
        ("hash encoder", hashgrid_check(50, 1), 1e-4),
        ("mlp", mlp_check(50, 2), 1e-4),
        ("softdrop", softdrop_check(50, 3), 1e-4),
        ("rasterizer", raster_check(50, 4, 5), 1e-3),
        ("loss", loss_check(50, 5), 1e-4),
    ];
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(120);
    let mut parts = Vec::new();
    for (name, c, tol) in &checks {
        pass &= c.passes(*tol);
        parts.push(format!("{name} {:.1e}/{tol:.0e}", c.worst));
    }
    outcome(pass, format!("{} in {elapsed:.1?}", parts.join(", ")))
}

fn omega_points() -> Outcome {
    let cfg = SoftDropConfig::default();
    let tau = cfg.temperature;
    let half = soft_drop_weight(0.5f64, 0.5, tau);
    let w = soft_drop_weight(0.6f64, 0.5, tau);
    let wc = clamp_weight(w, &cfg);
    // crossing points of the q = 0.5 slice, by bisection on a decreasing curve
    let crossing = |level: f64| {
        let (mut lo, mut hi) = (0.3f64, 0.7f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if soft_drop_weight(mid, 0.5, tau) > level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (upper, lower) = (crossing(cfg.omega_max), crossing(cfg.omega_min));
    let pass = half == 0.5
        && (w - 0.01703).abs() <= 1e-4
        && wc == 0.2
        && (upper - 0.47).abs() <= 0.005
        && (lower - 0.53).abs() <= 0.005;
    outcome(
        pass,
        format!("omega(0.5,0.5)={half}, omega(0.6,0.5)={w:.5} -> {wc}, band u in [{upper:.4}, {lower:.4}]"),
    )
}

fn blending() -> Outcome {
    let (mut worst_sum, mut worst_oracle) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(1..=50);
        let cam = random_camera(&mut r, 32, 40.0);
        let g = random_gaussians(&mut r, n, (seed % 2) as usize, 0.8);
        let op: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
        let cfg = RasterConfig {
            background: [0.2, 0.1, 0.4],
            ..RasterConfig::default()
        };
        let out = render(&g, &cam, &op, &cfg).unwrap();
        for (w, t) in out.weight_sum.iter().zip(&out.transmittance) {
            worst_sum = worst_sum.max((w + t - 1.0).abs());
        }
        let (reference, _) = render_reference(&g, &cam, &op, &cfg).unwrap();
        for (a, b) in out.image.pixels().iter().zip(reference.pixels()) {
            worst_oracle = worst_oracle.max((a - b).abs());
        }
    }
    outcome(
        worst_sum <= 1e-5 && worst_oracle <= 1e-6,
        format!("max |sum w + T - 1| {worst_sum:.1e}, max |tiled - oracle| {worst_oracle:.1e} over 100 scenes"),
    )
}

fn toy_convergence() -> Outcome {
    let start = Instant::now();
    let syn = generate::<f64>(&SyntheticSpec::default()).unwrap();
    let cfg = TrainConfig {
        iterations: 2000,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(syn.scene, cfg).unwrap();
    let mut reached = None;
    t.run_until(2000, |t, r| {
        if reached.is_none() && r.iteration % 100 == 0 && t.mean_psnr(Split::Train).unwrap().unwrap() >= 35.0 {
            reached = Some(r.iteration);
        }
    })
    .unwrap();
    let last = t.mean_psnr(Split::Train).unwrap().unwrap();
    let elapsed = start.elapsed();
    outcome(
        last >= 35.0 && elapsed < Duration::from_secs(300),
        format!("train PSNR {last:.2} dB at 2000 (35 dB first seen at {reached:?}), {elapsed:.1?}"),
    )
}

struct SparseRun {
    train: f64,
    test: f64,
    median: (f64, f64),
    band: (f64, f64),
}

fn pooled_uncertainty(t: &Trainer<f64>) -> UncertaintyHistogram {
    let mut all = Vec::new();
    for (v, view) in t.scene.train_views.iter().enumerate() {
        all.extend(t.uncertainties(&view.camera, v).unwrap().1);
    }
    UncertaintyHistogram::from_values(&all, t.state.iteration)
}

fn sparse_run(seed: u64, mechanism: Mechanism) -> SparseRun {
    let spec = SyntheticSpec {
        gaussians: 40,
        train_views: 5,
        test_views: 3,
        seed,
        init: InitKind::Sparse {
            count: 80,
            log_scale: -1.8,
        },
        ..SyntheticSpec::default()
    };
    let syn = generate::<f64>(&spec).unwrap();
    let cfg = TrainConfig {
        iterations: 3000,
        seed,
        mechanism,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(syn.scene, cfg).unwrap();
    let h0 = pooled_uncertainty(&t);
    t.run().unwrap();
    let h1 = pooled_uncertainty(&t);
    SparseRun {
        train: t.mean_psnr(Split::Train).unwrap().unwrap(),
        test: t.mean_psnr(Split::Test).unwrap().unwrap(),
        median: (h0.median, h1.median),
        band: (h0.band_fraction, h1.band_fraction),
    }
}

fn sparse_study() -> (Outcome, Outcome) {
    let seeds = 5;
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        on.push(sparse_run(seed, Mechanism::default()));
        off.push(sparse_run(seed, Mechanism::disabled()));
    }
    let mean = |runs: &[SparseRun], f: fn(&SparseRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let gap = |r: &SparseRun| r.train - r.test;
    let (gap_on, gap_off) = (mean(&on, gap), mean(&off, gap));
    let (test_on, test_off) = (mean(&on, |r| r.test), mean(&off, |r| r.test));
    let gap_outcome = outcome(
        gap_on < gap_off && test_on >= test_off - 0.1,
        format!("mean gap {gap_on:.3} (on) vs {gap_off:.3} (off), mean test PSNR {test_on:.2} vs {test_off:.2}"),
    );
    let good = on
        .iter()
        .filter(|r| r.median.1 < r.median.0 && r.band.1 < r.band.0)
        .count();
    let traces: Vec<String> = on
        .iter()
        .map(|r| format!("{:.3}->{:.3}/{:.2}->{:.2}", r.median.0, r.median.1, r.band.0, r.band.1))
        .collect();
    let dyn_outcome = outcome(
        good >= 4,
        format!(
            "{good}/{seeds} seeds lower median and band mass (median/band: {})",
            traces.join(" ")
        ),
    );
    (gap_outcome, dyn_outcome)
}

fn freeze_rule() -> Outcome {
    // hand-traced: gains 3.0, 1.5, 0.1 dB; the third gain is below 0.2
    let mut s = FreezeState::default();
    let trace = [(500, 18.0), (1000, 21.0), (1500, 22.5), (2000, 22.6), (2500, 30.0)];
    for (it, p) in trace {
        check_freeze(&mut s, p, 0.2, it);
    }
    let mut pass = s.frozen && s.frozen_at == Some(2000);
    // a drop below the best also freezes
    let mut d = FreezeState::default();
    for (it, p) in [(500, 20.0), (1000, 25.0), (1500, 24.0)] {
        check_freeze(&mut d, p, 0.2, it);
    }
    pass &= d.frozen_at == Some(1500);

    // a real run: replay its logged PSNRs through the rule and hold the model
    // against the moment it froze
    let cfg = TrainConfig {
        iterations: 2000,
        freeze_check_interval: 100,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(generate::<f64>(&SyntheticSpec::default()).unwrap().scene, cfg).unwrap();
    let mut snapshot = None;
    t.run_until(2000, |t, _| {
        if snapshot.is_none() && t.model.is_frozen() {
            snapshot = Some(t.model.clone());
        }
    })
    .unwrap();
    let mut replay = FreezeState::default();
    for row in t.state.log.iter().filter(|r| r.iteration % 100 == 0) {
        check_freeze(&mut replay, row.train_psnr.unwrap(), 0.2, row.iteration);
    }
    let constant = snapshot.as_ref() == Some(&t.model);
    pass &= replay.frozen_at.is_some() && replay.frozen_at == t.state.freeze.frozen_at && constant;
    outcome(
        pass,
        format!(
            "trace froze at {:?}, run froze at {:?} (replay {:?}), model constant after: {constant}",
            s.frozen_at, t.state.freeze.frozen_at, replay.frozen_at
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = TrainConfig {
        iterations: 100,
        freeze_check_interval: 25,
        eval_interval: 10,
        prune_interval: 30,
        seed: 11,
        ..TrainConfig::default()
    };
    let fresh = || Trainer::new(generate::<f64>(&SyntheticSpec::default()).unwrap().scene, cfg.clone()).unwrap();
    let mut a = fresh();
    a.run().unwrap();
    let mut b = fresh();
    b.run().unwrap();
    let repeat = metrics_csv(&a.state.log) == metrics_csv(&b.state.log);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = fresh();
    first.run_until(50, |_, _| {}).unwrap();
    checkpoint::save(&first, &path).unwrap();
    let mut resumed = checkpoint::load::<f64>(&path).unwrap();
    resumed.run().unwrap();
    let resume = metrics_csv(&resumed.state.log) == metrics_csv(&a.state.log)
        && resumed.scene.gaussians == a.scene.gaussians
        && resumed.model == a.model;
    outcome(
        repeat && resume,
        format!("repeat run identical: {repeat}, 50+50 resume identical: {resume}"),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("UGSPLAT_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let names = [
        "gradient suite",
        "soft dropout point checks",
        "blending conservation and oracle",
        "toy convergence",
        "sparse-view generalisation gap",
        "uncertainty dynamics",
        "freeze rule",
        "determinism and resume",
    ];
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    for n in (1..=8).filter(|n| wanted(*n)) {
        match n {
            1 => results.push((1, gradient_suite())),
            2 => results.push((2, omega_points())),
            3 => results.push((3, blending())),
            4 => results.push((4, toy_convergence())),
            // 5 and 6 share the same training runs
            5 => {
                let (gap, dynamics) = sparse_study();
                results.push((5, gap));
                if wanted(6) {
                    results.push((6, dynamics));
                }
            }
            6 if !wanted(5) => results.push((6, sparse_study().1)),
            7 => results.push((7, freeze_rule())),
            8 => results.push((8, determinism())),
            _ => {}
        }
    }

    let mut failed = 0;
    for (n, o) in &results {
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n} [{}] {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            names[*n as usize - 1],
            o.detail
        );
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
