//! Shared helpers for the integration tests: random scenes and
//! finite-difference gradient checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ugsplat::hashgrid::{HashGrid, HashGridConfig};
use ugsplat::loss::colour_loss;
use ugsplat::raster::{render, render_backward, RasterConfig};
use ugsplat::scene::{Camera, GaussianSet, ImageBuffer};
use ugsplat::softdrop::{softdrop_backward, softdrop_forward, Mechanism, SoftDropConfig};
use ugsplat::uncertainty::UncertaintyNet;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tracks the worst relative error seen across many comparisons.
#[derive(Debug, Default, Clone)]
pub struct Comparison {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl Comparison {
    /// Relative error `|a - n| / max(|a|, |n|, floor)`.
    pub fn add(&mut self, analytic: f64, numeric: f64, floor: f64, label: impl FnOnce() -> String) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        // NaN must win, so a broken gradient is never hidden
        if rel.is_nan() || rel > self.worst {
            self.worst = rel;
            self.worst_at = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.worst <= tol
    }
}

pub fn random_camera(r: &mut impl Rng, size: usize, focal: f64) -> Camera<f64> {
    let theta: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let phi: f64 = r.random_range(-0.5..0.5);
    let dist = 4.0;
    let eye = [
        dist * phi.cos() * theta.cos(),
        dist * phi.sin(),
        dist * phi.cos() * theta.sin(),
    ];
    Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], focal, focal, size, size, 0.01).unwrap()
}

/// Gaussians near the origin with colours kept away from the clip range.
pub fn random_gaussians(r: &mut impl Rng, n: usize, sh_degree: usize, spread: f64) -> GaussianSet<f64> {
    let mut g = GaussianSet::new(sh_degree).unwrap();
    for _ in 0..n {
        let pos = [
            r.random_range(-spread..spread),
            r.random_range(-spread..spread),
            r.random_range(-spread..spread),
        ];
        let q = [
            r.random_range(0.3..1.0),
            r.random_range(-0.6..0.6),
            r.random_range(-0.6..0.6),
            r.random_range(-0.6..0.6),
        ];
        let ls = [
            r.random_range(-1.8..-1.0),
            r.random_range(-1.8..-1.0),
            r.random_range(-1.8..-1.0),
        ];
        let mut colour = vec![
            r.random_range(0.3..0.7),
            r.random_range(0.3..0.7),
            r.random_range(0.3..0.7),
        ];
        if sh_degree == 1 {
            colour.extend((0..9).map(|_| r.random_range(-0.15..0.15)));
        }
        g.push(pos, q, ls, r.random_range(-1.0..1.0), &colour);
    }
    g
}

pub fn hashgrid_check(instances: usize, seed: u64) -> Comparison {
    let mut cmp = Comparison::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let mut cfg = HashGridConfig::with_levels(6);
        cfg.log2_table_size = 10;
        let mut grid = HashGrid::<f64, 3>::new(cfg, [-1.0; 3], [1.0; 3]).unwrap();
        grid.init_uniform(&mut r, 1.0);
        let x: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.95..0.95));
        let up: Vec<f64> = (0..grid.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = |g: &HashGrid<f64, 3>, x: [f64; 3]| -> f64 {
            g.encode(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let grad = grid.encode_backward(x, &up).unwrap();
        // trilinear interpolation is linear inside a cell, so a tiny step is exact
        let h = 1e-8;
        let scale = grad.input.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..3 {
            let mut p = x;
            let mut m = x;
            p[k] += h;
            m[k] -= h;
            let num = (f(&grid, p) - f(&grid, m)) / (2.0 * h);
            cmp.add(grad.input[k], num, 1e-3 * scale.max(1e-3), || {
                format!("hashgrid {inst} input {k}")
            });
        }
        let mut dense = vec![0.0; grid.tables.len()];
        grad.tables.accumulate_into(&mut dense);
        let touched: Vec<usize> = (0..dense.len()).filter(|i| dense[*i] != 0.0).collect();
        for &t in touched.iter().take(12) {
            let h = 1e-3;
            let mut gp = grid.clone();
            gp.tables[t] += h;
            let mut gm = grid.clone();
            gm.tables[t] -= h;
            let num = (f(&gp, x) - f(&gm, x)) / (2.0 * h);
            cmp.add(dense[t], num, 1e-9, || format!("hashgrid {inst} table {t}"));
        }
    }
    cmp
}

pub fn mlp_check(instances: usize, seed: u64) -> Comparison {
    let mut cmp = Comparison::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let widths = [8, 12, 10, 1];
        let mut net = UncertaintyNet::<f64>::new(&widths, &mut r).unwrap();
        for v in &mut net.params {
            *v = r.random_range(-0.8..0.8);
        }
        let rows = 3;
        let x: Vec<f64> = (0..rows * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..rows).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = |n: &UncertaintyNet<f64>, x: &[f64]| -> f64 {
            n.predict(x, 0)
                .unwrap()
                .values
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = net.predict_backward(&x, &up).unwrap();
        let h = 1e-6;
        let scale = g.params.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in (0..net.params.len()).step_by(7) {
            let mut p = net.clone();
            p.params[k] += h;
            let mut m = net.clone();
            m.params[k] -= h;
            let num = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
            cmp.add(g.params[k], num, 1e-4 * scale, || format!("mlp {inst} param {k}"));
        }
        for k in 0..x.len() {
            let mut p = x.clone();
            p[k] += h;
            let mut m = x.clone();
            m[k] -= h;
            let num = (f(&net, &p) - f(&net, &m)) / (2.0 * h);
            cmp.add(g.inputs[k], num, 1e-4 * scale, || format!("mlp {inst} input {k}"));
        }
    }
    cmp
}

pub fn softdrop_check(instances: usize, seed: u64) -> Comparison {
    let mut cmp = Comparison::default();
    let mut r = rng(seed);
    let cfg = SoftDropConfig::default();
    let mech = Mechanism::default();
    let mut done = 0;
    while done < instances {
        let alpha: f64 = r.random_range(0.05..0.95);
        // half the draws land in the unsaturated band around u = 0.5
        let u: f64 = if done % 2 == 0 {
            r.random_range(0.46..0.54)
        } else {
            r.random_range(0.02..0.98)
        };
        let q: f64 = r.random_range(0.01..0.99);
        let omega = softdrop_forward(alpha, u, Some(q), &cfg, mech).omega;
        if (omega - cfg.omega_min).abs() < 1e-4 || (omega - cfg.omega_max).abs() < 1e-4 {
            continue;
        }
        let up: f64 = r.random_range(-2.0..2.0);
        let f = |a: f64, u: f64| up * softdrop_forward(a, u, Some(q), &cfg, mech).alpha_eff;
        let (da, du) = softdrop_backward(alpha, u, Some(q), &cfg, mech, up);
        let h = 1e-7;
        let na = (f(alpha + h, u) - f(alpha - h, u)) / (2.0 * h);
        let nu = (f(alpha, u + h) - f(alpha, u - h)) / (2.0 * h);
        cmp.add(da, na, 1e-6, || format!("softdrop {done} alpha"));
        cmp.add(du, nu, 1e-6, || format!("softdrop {done} u"));
        done += 1;
    }
    cmp
}

#[derive(Clone, Copy, Debug)]
pub enum Param {
    Position,
    LogScale,
    Rotation,
    Colour,
}

pub fn param(g: &mut GaussianSet<f64>, kind: Param, i: usize, k: usize) -> &mut f64 {
    match kind {
        Param::Position => &mut g.positions[i][k],
        Param::LogScale => &mut g.log_scales[i][k],
        Param::Rotation => &mut g.rotations[i][k],
        Param::Colour => {
            let s = g.colour_stride();
            &mut g.colours[i * s + k]
        }
    }
}

/// Renders with unbounded support and no early stop, `L = <upstream, image>`.
pub fn raster_check(instances: usize, seed: u64, gaussians: usize) -> Comparison {
    let mut cmp = Comparison::default();
    let mut r = rng(seed);
    let cfg = RasterConfig::<f64> {
        background: [0.1, 0.2, 0.3],
        ..RasterConfig::exact()
    };
    for inst in 0..instances {
        let size = 16;
        let cam = random_camera(&mut r, size, 20.0);
        let mut g = random_gaussians(&mut r, gaussians, 1, 0.6);
        let mut op: Vec<f64> = (0..gaussians).map(|_| r.random_range(0.2..0.8)).collect();
        let up: Vec<f64> = (0..3 * size * size).map(|_| r.random_range(-1.0..1.0)).collect();
        let loss = |g: &GaussianSet<f64>, op: &[f64]| -> f64 {
            let out = render(g, &cam, op, &cfg).unwrap();
            out.image.pixels().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let out = render(&g, &cam, &op, &cfg).unwrap();
        let grad = render_backward(&g, &cam, &out, &up).unwrap();
        let mut scale = 0.0f64;
        for i in 0..gaussians {
            for v in grad.positions[i]
                .iter()
                .chain(&grad.rotations[i])
                .chain(&grad.log_scales[i])
            {
                scale = scale.max(v.abs());
            }
            scale = scale.max(grad.opacities[i].abs());
        }
        let floor = 1e-5 * scale.max(1e-6);
        let h = 1e-5;
        for i in 0..gaussians {
            let stride = g.colour_stride();
            let mut slots: Vec<(Param, usize, f64)> = Vec::new();
            for k in 0..3 {
                slots.push((Param::Position, k, grad.positions[i][k]));
                slots.push((Param::LogScale, k, grad.log_scales[i][k]));
            }
            for k in 0..4 {
                slots.push((Param::Rotation, k, grad.rotations[i][k]));
            }
            for k in 0..stride {
                slots.push((Param::Colour, k, grad.colours[i * stride + k]));
            }
            for (kind, k, analytic) in slots {
                let orig = *param(&mut g, kind, i, k);
                *param(&mut g, kind, i, k) = orig + h;
                let lp = loss(&g, &op);
                *param(&mut g, kind, i, k) = orig - h;
                let lm = loss(&g, &op);
                *param(&mut g, kind, i, k) = orig;
                cmp.add(analytic, (lp - lm) / (2.0 * h), floor, || {
                    format!("raster {inst} g{i} {kind:?} {k}")
                });
            }
            let o = op[i];
            op[i] = o + h;
            let lp = loss(&g, &op);
            op[i] = o - h;
            let lm = loss(&g, &op);
            op[i] = o;
            cmp.add(grad.opacities[i], (lp - lm) / (2.0 * h), floor, || {
                format!("raster {inst} g{i} opacity")
            });
        }
    }
    cmp
}

pub fn random_image(r: &mut impl Rng, w: usize, h: usize) -> ImageBuffer<f64> {
    let px = (0..3 * w * h).map(|_| r.random_range(0.05..0.95)).collect();
    ImageBuffer::from_pixels(w, h, px).unwrap()
}

pub fn loss_check(instances: usize, seed: u64) -> Comparison {
    let mut cmp = Comparison::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let target = random_image(&mut r, 8, 8);
        // keep every residual well away from the L1 kink
        let px: Vec<f64> = target
            .pixels()
            .iter()
            .map(|t| {
                let d: f64 = r.random_range(0.01..0.2);
                if *t > 0.5 {
                    t - d
                } else {
                    t + d
                }
            })
            .collect();
        let rendered = ImageBuffer::from_pixels(8, 8, px.clone()).unwrap();
        let lambda: f64 = r.random_range(0.0..1.0);
        let out = colour_loss(&rendered, &target, lambda).unwrap();
        let scale = out.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let h = 1e-6;
        for k in 0..px.len() {
            let mut p = px.clone();
            p[k] += h;
            let mut m = px.clone();
            m[k] -= h;
            let lp = colour_loss(&ImageBuffer::from_pixels(8, 8, p).unwrap(), &target, lambda)
                .unwrap()
                .loss;
            let lm = colour_loss(&ImageBuffer::from_pixels(8, 8, m).unwrap(), &target, lambda)
                .unwrap()
                .loss;
            cmp.add(out.grad[k], (lp - lm) / (2.0 * h), 1e-4 * scale, || {
                format!("loss {inst} pixel {k}")
            });
        }
    }
    cmp
}
