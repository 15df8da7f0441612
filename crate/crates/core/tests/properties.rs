mod common;

use proptest::prelude::*;
use rand::Rng;

use common::{random_camera, random_gaussians, random_image, rng};
use ugsplat::hashgrid::{HashGrid, HashGridConfig};
use ugsplat::math::quat_normalize;
use ugsplat::metrics::{psnr, ssim, UncertaintyHistogram};
use ugsplat::raster::{render, render_reference, RasterConfig, Support};
use ugsplat::rng::{CounterRng, Domain};
use ugsplat::scene::{read_ply_points, write_ply, PlyFormat};
use ugsplat::scene::{view_direction, GaussianSet, ImageBuffer};
use ugsplat::softdrop::{sample_drop, soft_drop_weight, softdrop_forward, Mechanism, SoftDropConfig};
use ugsplat::uncertainty::UncertaintyNet;

fn cfg() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

fn no_early_stop() -> RasterConfig<f64> {
    RasterConfig {
        early_stop: false,
        ..RasterConfig::default()
    }
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn omega_is_antisymmetric(u in 1e-3f64..0.999, q in 1e-3f64..0.999) {
        let a = soft_drop_weight(u, q, 0.1);
        let b = soft_drop_weight(1.0 - u, 1.0 - q, 0.1);
        prop_assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b}");
    }

    #[test]
    fn omega_decreases_in_u(u1 in 1e-3f64..0.999, u2 in 1e-3f64..0.999, q in 1e-3f64..0.999) {
        prop_assume!(u1 < u2);
        let (w1, w2) = (soft_drop_weight(u1, q, 0.1), soft_drop_weight(u2, q, 0.1));
        prop_assert!(w1 >= w2);
    }

    #[test]
    fn effective_opacity_is_bounded(alpha in 1e-4f64..0.9999, u in 1e-4f64..0.9999, q in 1e-4f64..0.9999) {
        let c = SoftDropConfig::default();
        let out = softdrop_forward(alpha, u, Some(q), &c, Mechanism::default());
        prop_assert!(out.alpha_eff > 0.0 && out.alpha_eff < c.omega_max);
        prop_assert!(out.alpha_eff <= alpha);
        prop_assert!(out.omega_clamped >= c.omega_min && out.omega_clamped <= c.omega_max);
    }

    #[test]
    fn drop_samples_reproduce(seed in any::<u64>(), it in 0u64..10_000) {
        let us: Vec<(usize, f64)> = (0..16).map(|i| (i * 3, 0.05 * i as f64 + 0.1)).collect();
        let c = SoftDropConfig::default();
        prop_assert_eq!(sample_drop(&us, &c, seed, it), sample_drop(&us, &c, seed, it));
    }

    #[test]
    fn view_direction_has_unit_norm(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cam = random_camera(&mut r, 16, 20.0);
        let p: [f64; 3] = std::array::from_fn(|_| r.random_range(-3.0..3.0));
        if let Ok(d) = view_direction(&cam, p) {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quaternion_normalisation_is_idempotent(q in prop::array::uniform4(-2.0f64..2.0)) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let once = quat_normalize(q);
        let twice = quat_normalize(once);
        for k in 0..4 {
            prop_assert!((once[k] - twice[k]).abs() <= 2.0 * f64::EPSILON);
        }
    }

    #[test]
    fn ply_positions_round_trip(seed in any::<u64>(), binary in any::<bool>()) {
        let g = random_gaussians(&mut rng(seed), 7, 0, 2.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        let fmt = if binary { PlyFormat::BinaryLittleEndian } else { PlyFormat::Ascii };
        write_ply(&g, &path, fmt).unwrap();
        let back = read_ply_points::<f64>(&path).unwrap();
        prop_assert_eq!(back.positions, g.positions);
    }

    #[test]
    fn hash_encoding_is_linear_inside_a_cell(seed in any::<u64>(), t in 0.0f64..1.0) {
        let mut r = rng(seed);
        let mut c = HashGridConfig::with_levels(4);
        c.log2_table_size = 10;
        let mut grid = HashGrid::<f64, 3>::new(c, [-1.0; 3], [1.0; 3]).unwrap();
        grid.init_uniform(&mut r, 1.0);
        prop_assert_eq!(grid.output_dim(), 4 * grid.config().features_per_level);
        // along x, intersect the cells of every level around a random point;
        // resolutions are not integer multiples of each other
        let a: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.9..0.9));
        let unit = (a[0] + 1.0) / 2.0;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for level in 0..4 {
            let res = grid.config().resolution(level);
            let f = (unit * res).floor();
            lo = lo.max(f / res);
            hi = hi.min((f + 1.0) / res);
        }
        let to_world = |u: f64| 2.0 * u - 1.0;
        let mut base = a;
        base[0] = to_world(lo + 0.1 * (hi - lo));
        let mut e = a;
        e[0] = to_world(hi - 0.1 * (hi - lo));
        let mid: [f64; 3] = std::array::from_fn(|k| base[k] + t * (e[k] - base[k]));
        let (fa, fb, fm) = (grid.encode(base).unwrap(), grid.encode(e).unwrap(), grid.encode(mid).unwrap());
        for i in 0..fa.len() {
            let lin = fa[i] + t * (fb[i] - fa[i]);
            prop_assert!((fm[i] - lin).abs() < 1e-12, "feature {i}: {} vs {lin}", fm[i]);
        }
    }

    #[test]
    fn uncertainty_is_inside_the_open_interval(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut net = UncertaintyNet::<f64>::new(&[6, 8, 1], &mut r).unwrap();
        for v in &mut net.params {
            *v = r.random_range(-20.0..20.0);
        }
        let x: Vec<f64> = (0..6 * 32).map(|_| r.random_range(-5.0..5.0)).collect();
        let u = net.predict(&x, 0).unwrap().values;
        prop_assert!(u.iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert_eq!(u, net.predict(&x, 0).unwrap().values);
    }

    #[test]
    fn blend_weights_and_transmittance_sum_to_one(seed in any::<u64>(), n in 1usize..50) {
        let mut r = rng(seed);
        let cam = random_camera(&mut r, 32, 40.0);
        let g = random_gaussians(&mut r, n, 0, 0.8);
        let op: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
        let out = render(&g, &cam, &op, &RasterConfig::default()).unwrap();
        for (w, t) in out.weight_sum.iter().zip(&out.transmittance) {
            prop_assert!((w + t - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn tiled_render_matches_the_reference(seed in any::<u64>(), n in 1usize..50, sh1 in any::<bool>()) {
        let mut r = rng(seed);
        let cam = random_camera(&mut r, 32, 40.0);
        let g = random_gaussians(&mut r, n, sh1 as usize, 0.8);
        let op: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
        let c = RasterConfig { background: [0.2, 0.1, 0.4], ..no_early_stop() };
        let tiled = render(&g, &cam, &op, &c).unwrap();
        let (reference, trans) = render_reference(&g, &cam, &op, &c).unwrap();
        for (a, b) in tiled.image.pixels().iter().zip(reference.pixels()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in tiled.transmittance.iter().zip(&trans) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn storage_order_does_not_change_the_image(seed in any::<u64>(), n in 2usize..30) {
        let mut r = rng(seed);
        let cam = random_camera(&mut r, 32, 40.0);
        let g = random_gaussians(&mut r, n, 1, 0.8);
        let op: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        // permute the raw storage; push() would renormalise the rotations
        let mut h = g.clone();
        h.positions = perm.iter().map(|&i| g.positions[i]).collect();
        h.rotations = perm.iter().map(|&i| g.rotations[i]).collect();
        h.log_scales = perm.iter().map(|&i| g.log_scales[i]).collect();
        h.opacity_logits = perm.iter().map(|&i| g.opacity_logits[i]).collect();
        h.colours = perm.iter().flat_map(|&i| g.colour(i).to_vec()).collect();
        let hop: Vec<f64> = perm.iter().map(|&i| op[i]).collect();
        let a = render(&g, &cam, &op, &RasterConfig::default()).unwrap();
        let b = render(&h, &cam, &hop, &RasterConfig::default()).unwrap();
        prop_assert_eq!(a.image, b.image);
    }

    #[test]
    fn raising_opacity_never_lowers_own_weight(seed in any::<u64>(), n in 1usize..20, bump in 0.01f64..0.5) {
        let mut r = rng(seed);
        let cam = random_camera(&mut r, 32, 40.0);
        let mut g = random_gaussians(&mut r, n, 0, 0.8);
        // only the probe Gaussian has red, so red = its blend weight
        let probe = r.random_range(0..n);
        for i in 0..n {
            g.colour_mut(i).copy_from_slice(if i == probe { &[1.0, 0.0, 0.0] } else { &[0.0, 0.5, 0.5] });
        }
        let mut op: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.9)).collect();
        let before = render(&g, &cam, &op, &no_early_stop()).unwrap().image;
        op[probe] = (op[probe] + bump).min(0.999);
        let after = render(&g, &cam, &op, &no_early_stop()).unwrap().image;
        for (b, a) in before.pixels().iter().zip(after.pixels()).step_by(3) {
            prop_assert!(*a >= *b - 1e-15, "{b} -> {a}");
        }
    }

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_image(&mut r, 16, 16), random_image(&mut r, 16, 16));
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-14);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>()) {
        let mut r = rng(seed);
        let base: Vec<f64> = (0..3 * 24 * 24).map(|_| r.random_range(0.2..0.8)).collect();
        let noise: Vec<f64> = base.iter().map(|_| r.random_range(-1.0..1.0)).collect();
        let clean = ImageBuffer::from_pixels(24, 24, base.clone()).unwrap();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1] {
            let px = base.iter().zip(&noise).map(|(b, n)| b + amp * n).collect();
            let p = psnr(&clean, &ImageBuffer::from_pixels(24, 24, px).unwrap()).unwrap();
            prop_assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn histogram_conserves_count(values in prop::collection::vec(0.0f64..=1.0, 0..300)) {
        let h = UncertaintyHistogram::from_values(&values, 0);
        prop_assert_eq!(h.total(), values.len() as u64);
    }
}

#[test]
fn omega_median_at_half_uncertainty() {
    let r = CounterRng::new(11, Domain::DropoutQ);
    let mut w: Vec<f64> = (0..100_000)
        .map(|i| soft_drop_weight(0.5, r.uniform_open(0, i), 0.1))
        .collect();
    w.sort_by(f64::total_cmp);
    assert!((w[50_000] - 0.5).abs() < 0.01);
}

#[test]
fn ssim_of_independent_noise_is_small() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (a, b) = (random_image(&mut r, 64, 64), random_image(&mut r, 64, 64));
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.1, "seed {seed}: {s}");
    }
}

#[test]
fn unbounded_support_keeps_far_tails() {
    // a Gaussian far outside the frame still tints it when support is unbounded
    let mut g = GaussianSet::new(0).unwrap();
    g.push([3.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [-1.5; 3], 0.0, &[1.0, 1.0, 1.0]);
    let cam =
        ugsplat::scene::Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 20.0, 16, 16, 0.01).unwrap();
    let bounded = render(&g, &cam, &[0.5], &RasterConfig::default()).unwrap();
    let exact = render(
        &g,
        &cam,
        &[0.5],
        &RasterConfig {
            support: Support::Unbounded,
            ..RasterConfig::exact()
        },
    )
    .unwrap();
    let sum = |img: &ImageBuffer<f64>| img.pixels().iter().sum::<f64>();
    assert_eq!(sum(&bounded.image), 0.0);
    assert!(sum(&exact.image) > 0.0);
}
