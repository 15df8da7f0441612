//! Tiled front-to-back alpha blending and its reverse pass.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::project::{project, project_backward, CullReason, ProjectedGaussian, ProjectedGrad};
use crate::scalar::{clamp01, lit, Real};
use crate::scene::{Camera, GaussianSet, ImageBuffer};

/// Per-pixel blend factor ceiling.
pub const MAX_ALPHA: f64 = 0.99;
/// Blending stops before transmittance would fall below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const DEFAULT_TILE: usize = 16;
/// `-0.5 * SUPPORT_SIGMA²`: Gaussians with a lower exponent are ignored at a pixel.
const MIN_POWER: f64 = -4.5;

/// Where a Gaussian is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// Inside its 3σ ellipse only; tiles come from the ellipse's bounding box.
    Bounded,
    /// Everywhere, with no image-bounds culling. Smooth in every parameter,
    /// which finite-difference checks rely on.
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterConfig<T> {
    pub background: [T; 3],
    pub support: Support,
    pub early_stop: bool,
    pub tile_size: usize,
}

impl<T: Real> Default for RasterConfig<T> {
    fn default() -> Self {
        Self {
            background: [T::zero(); 3],
            support: Support::Bounded,
            early_stop: true,
            tile_size: DEFAULT_TILE,
        }
    }
}

impl<T: Real> RasterConfig<T> {
    /// No early termination and unbounded support: the blend is a smooth
    /// function of every parameter.
    pub fn exact() -> Self {
        Self {
            support: Support::Unbounded,
            early_stop: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RenderStats {
    pub visible: usize,
    pub culled_near: usize,
    pub culled_outside: usize,
    pub skipped_singular: usize,
}

/// What the reverse pass needs from the forward pass.
#[derive(Clone, Debug, PartialEq)]
struct ForwardState<T> {
    projected: Vec<ProjectedGaussian<T>>,
    /// Depth-sorted indices into `projected`, one list per tile.
    tiles: Vec<Vec<u32>>,
    /// Per pixel: length of the tile-list prefix that was blended.
    n_contrib: Vec<u32>,
    tiles_x: usize,
    tile_size: usize,
    support: Support,
    background_is: [T; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub image: ImageBuffer<T>,
    /// Final transmittance per pixel, row-major.
    pub transmittance: Vec<T>,
    /// Sum of blend weights per pixel.
    pub weight_sum: Vec<T>,
    /// Sum of blend weights over all pixels, per Gaussian.
    pub gaussian_weight: Vec<T>,
    pub stats: RenderStats,
    state: Option<ForwardState<T>>,
}

impl<T: Real> RenderOutput<T> {
    pub fn has_state(&self) -> bool {
        self.state.is_some()
    }

    /// Drops the data only the reverse pass needs.
    pub fn discard_state(&mut self) {
        self.state = None;
    }

    /// Indices of the Gaussians that survived culling.
    pub fn visible_indices(&self) -> Vec<usize> {
        self.state
            .as_ref()
            .map(|s| s.projected.iter().map(|p| p.index).collect())
            .unwrap_or_default()
    }

    /// Raw little-endian `f32` dump: magic, width, height, RGB, then transmittance.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(16 + 16 * self.transmittance.len());
        buf.extend_from_slice(RAW_MAGIC);
        buf.extend_from_slice(&(self.image.width() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.image.height() as u32).to_le_bytes());
        for v in self.image.pixels().iter().chain(&self.transmittance) {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

pub const RAW_MAGIC: &[u8; 8] = b"UGRAW\0\0\x01";

/// Reads a dump written by [`RenderOutput::write_raw`]: `(width, height, rgb, transmittance)`.
pub fn read_raw(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::Format(format!("{} is not a raw render dump", path.display())));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n = w * h;
    if bytes.len() != 16 + 16 * n {
        return Err(Error::Format(format!("{} is truncated", path.display())));
    }
    let vals: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((w, h, vals[..3 * n].to_vec(), vals[3 * n..].to_vec()))
}

/// Blend factor of `p` at pixel centre `(px, py)`.
#[derive(Clone, Copy)]
struct Hit<T> {
    alpha: T,
    density: T,
    dx: T,
    dy: T,
    saturated: bool,
}

#[inline]
fn hit<T: Real>(p: &ProjectedGaussian<T>, px: T, py: T, support: Support) -> Option<Hit<T>> {
    let dx = px - p.mean2d[0];
    let dy = py - p.mean2d[1];
    let [a, b, c] = p.conic;
    let power = -lit::<T>(0.5) * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if support == Support::Bounded && power < lit(MIN_POWER) {
        return None;
    }
    let density = power.exp();
    let raw = p.opacity * density;
    let cap = lit::<T>(MAX_ALPHA);
    Some(Hit {
        alpha: if raw > cap { cap } else { raw },
        density,
        dx,
        dy,
        saturated: raw > cap,
    })
}

/// Stable order: depth, then Gaussian index.
fn depth_order<T: Real>(a: &ProjectedGaussian<T>, b: &ProjectedGaussian<T>) -> std::cmp::Ordering {
    a.depth
        .partial_cmp(&b.depth)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.index.cmp(&b.index))
}

/// Projects every Gaussian and tallies culls.
fn project_all<T: Real>(
    gaussians: &GaussianSet<T>,
    camera: &Camera<T>,
    opacities: &[T],
    support: Support,
) -> (Vec<ProjectedGaussian<T>>, RenderStats) {
    let results: Vec<_> = (0..gaussians.len())
        .into_par_iter()
        .map(|i| project(gaussians, i, camera, opacities[i], support == Support::Bounded))
        .collect();
    let mut stats = RenderStats::default();
    let mut projected = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(p) => projected.push(p),
            Err(CullReason::BehindNearPlane) => stats.culled_near += 1,
            Err(CullReason::OutsideImage) => stats.culled_outside += 1,
            Err(CullReason::Singular) => stats.skipped_singular += 1,
        }
    }
    stats.visible = projected.len();
    (projected, stats)
}

fn check_inputs<T: Real>(
    gaussians: &GaussianSet<T>,
    camera: &Camera<T>,
    opacities: &[T],
    cfg: &RasterConfig<T>,
) -> Result<()> {
    if opacities.len() != gaussians.len() {
        return Err(Error::Shape {
            expected: gaussians.len(),
            got: opacities.len(),
        });
    }
    if cfg.tile_size == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    camera.validate()
}

/// Renders `gaussians` from `camera` with per-Gaussian effective opacities.
pub fn render<T: Real>(
    gaussians: &GaussianSet<T>,
    camera: &Camera<T>,
    opacities: &[T],
    cfg: &RasterConfig<T>,
) -> Result<RenderOutput<T>> {
    check_inputs(gaussians, camera, opacities, cfg)?;
    let (w, h) = (camera.width, camera.height);
    let ts = cfg.tile_size;
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let (projected, stats) = project_all(gaussians, camera, opacities, cfg.support);

    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let half = lit::<T>(0.5);
    for (k, p) in projected.iter().enumerate() {
        let (x0, x1, y0, y1) = match cfg.support {
            Support::Unbounded => (0, tiles_x - 1, 0, tiles_y - 1),
            Support::Bounded => {
                let span = |m: T, r: T, n: usize| -> (usize, usize) {
                    let lo = (m - r - half).ceil().max(T::zero());
                    let hi = (m + r - half).floor().min(lit((n - 1) as f64));
                    (lo.to_usize().unwrap_or(0), hi.to_usize().unwrap_or(0))
                };
                let (px0, px1) = span(p.mean2d[0], p.radius[0], w);
                let (py0, py1) = span(p.mean2d[1], p.radius[1], h);
                (px0 / ts, px1 / ts, py0 / ts, py1 / ts)
            }
        };
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    tiles
        .par_iter_mut()
        .for_each(|list| list.sort_by(|a, b| depth_order(&projected[*a as usize], &projected[*b as usize])));

    struct TileOut<T> {
        colour: Vec<T>,
        trans: Vec<T>,
        wsum: Vec<T>,
        contrib: Vec<u32>,
        gweight: Vec<T>,
    }
    let bg = cfg.background;
    let min_t = lit::<T>(MIN_TRANSMITTANCE);
    let outs: Vec<TileOut<T>> = (0..tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &tiles[t];
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let xs = tx * ts..((tx + 1) * ts).min(w);
            let ys = ty * ts..((ty + 1) * ts).min(h);
            let n = xs.len() * ys.len();
            let mut out = TileOut {
                colour: Vec::with_capacity(3 * n),
                trans: Vec::with_capacity(n),
                wsum: Vec::with_capacity(n),
                contrib: Vec::with_capacity(n),
                gweight: vec![T::zero(); list.len()],
            };
            for y in ys.clone() {
                for x in xs.clone() {
                    let px = lit::<T>(x as f64) + half;
                    let py = lit::<T>(y as f64) + half;
                    let mut tr = T::one();
                    let mut c = [T::zero(); 3];
                    let mut ws = T::zero();
                    let mut last = 0u32;
                    for (k, &gi) in list.iter().enumerate() {
                        let p = &projected[gi as usize];
                        let Some(hh) = hit(p, px, py, cfg.support) else {
                            continue;
                        };
                        let next = tr * (T::one() - hh.alpha);
                        if cfg.early_stop && next < min_t {
                            break;
                        }
                        let wgt = hh.alpha * tr;
                        for ch in 0..3 {
                            c[ch] += wgt * p.colour[ch];
                        }
                        ws += wgt;
                        out.gweight[k] += wgt;
                        tr = next;
                        last = k as u32 + 1;
                    }
                    for ch in 0..3 {
                        out.colour.push(c[ch] + tr * bg[ch]);
                    }
                    out.trans.push(tr);
                    out.wsum.push(ws);
                    out.contrib.push(last);
                }
            }
            out
        })
        .collect();

    let mut pixels = vec![T::zero(); 3 * w * h];
    let mut transmittance = vec![T::zero(); w * h];
    let mut weight_sum = vec![T::zero(); w * h];
    let mut n_contrib = vec![0u32; w * h];
    let mut gaussian_weight = vec![T::zero(); gaussians.len()];
    for (t, out) in outs.iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let xs = tx * ts..((tx + 1) * ts).min(w);
        let ys = ty * ts..((ty + 1) * ts).min(h);
        let mut j = 0;
        for y in ys {
            for x in xs.clone() {
                let pi = y * w + x;
                for ch in 0..3 {
                    pixels[3 * pi + ch] = clamp01(out.colour[3 * j + ch]);
                }
                transmittance[pi] = out.trans[j];
                weight_sum[pi] = out.wsum[j];
                n_contrib[pi] = out.contrib[j];
                j += 1;
            }
        }
        for (k, &gi) in tiles[t].iter().enumerate() {
            gaussian_weight[projected[gi as usize].index] += out.gweight[k];
        }
    }

    Ok(RenderOutput {
        image: ImageBuffer::from_rendered(w, h, pixels),
        transmittance,
        weight_sum,
        gaussian_weight,
        stats,
        state: Some(ForwardState {
            projected,
            tiles,
            n_contrib,
            tiles_x,
            tile_size: ts,
            support: cfg.support,
            background_is: bg,
        }),
    })
}

/// Per-pixel blend over all Gaussians with no tiling. Slow; used as an oracle.
pub fn render_reference<T: Real>(
    gaussians: &GaussianSet<T>,
    camera: &Camera<T>,
    opacities: &[T],
    cfg: &RasterConfig<T>,
) -> Result<(ImageBuffer<T>, Vec<T>)> {
    check_inputs(gaussians, camera, opacities, cfg)?;
    let bounded = cfg.support == Support::Bounded;
    let mut visible: Vec<ProjectedGaussian<T>> = (0..gaussians.len())
        .filter_map(|i| project(gaussians, i, camera, opacities[i], bounded).ok())
        .collect();
    visible.sort_by(depth_order);
    let (w, h) = (camera.width, camera.height);
    let mut pixels = Vec::with_capacity(3 * w * h);
    let mut trans = Vec::with_capacity(w * h);
    let half = lit::<T>(0.5);
    for y in 0..h {
        for x in 0..w {
            let px = lit::<T>(x as f64) + half;
            let py = lit::<T>(y as f64) + half;
            let mut tr = T::one();
            let mut c = [T::zero(); 3];
            for p in &visible {
                let Some(hh) = hit(p, px, py, cfg.support) else {
                    continue;
                };
                let next = tr * (T::one() - hh.alpha);
                if cfg.early_stop && next < lit(MIN_TRANSMITTANCE) {
                    break;
                }
                for ch in 0..3 {
                    c[ch] += hh.alpha * tr * p.colour[ch];
                }
                tr = next;
            }
            for ch in 0..3 {
                pixels.push(clamp01(c[ch] + tr * cfg.background[ch]));
            }
            trans.push(tr);
        }
    }
    Ok((ImageBuffer::from_rendered(w, h, pixels), trans))
}

/// Gradients of a scalar loss with respect to every Gaussian parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrad<T> {
    pub positions: Vec<[T; 3]>,
    /// With respect to the stored (not necessarily unit) quaternions.
    pub rotations: Vec<[T; 4]>,
    pub log_scales: Vec<[T; 3]>,
    /// Same layout as [`GaussianSet::colours`].
    pub colours: Vec<T>,
    /// With respect to the effective opacities passed to [`render`].
    pub opacities: Vec<T>,
}

impl<T: Real> RenderGrad<T> {
    pub fn zeros(gaussians: &GaussianSet<T>) -> Self {
        let n = gaussians.len();
        Self {
            positions: vec![[T::zero(); 3]; n],
            rotations: vec![[T::zero(); 4]; n],
            log_scales: vec![[T::zero(); 3]; n],
            colours: vec![T::zero(); gaussians.colours.len()],
            opacities: vec![T::zero(); n],
        }
    }
}

/// Reverse pass given `upstream = dL/d(image)` in row-major RGB order.
///
/// Re-traverses each pixel's blend list back to front, rebuilding
/// transmittance from the stored final value.
pub fn render_backward<T: Real>(
    gaussians: &GaussianSet<T>,
    camera: &Camera<T>,
    output: &RenderOutput<T>,
    upstream: &[T],
) -> Result<RenderGrad<T>> {
    let state = output
        .state
        .as_ref()
        .ok_or_else(|| Error::Contract("render_backward needs the forward state".into()))?;
    let (w, h) = (camera.width, camera.height);
    if upstream.len() != 3 * w * h {
        return Err(Error::Shape {
            expected: 3 * w * h,
            got: upstream.len(),
        });
    }
    if output.image.width() != w || output.image.height() != h {
        return Err(Error::Contract("camera does not match the forward pass".into()));
    }
    let ts = state.tile_size;
    let tiles_x = state.tiles_x;
    let half = lit::<T>(0.5);
    let bg = state.background_is;
    let projected = &state.projected;

    let tile_grads: Vec<Vec<ProjectedGrad<T>>> = (0..state.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &state.tiles[t];
            let mut grads = vec![ProjectedGrad::zero(); list.len()];
            if list.is_empty() {
                return grads;
            }
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let pi = y * w + x;
                    let dc = [upstream[3 * pi], upstream[3 * pi + 1], upstream[3 * pi + 2]];
                    if dc.iter().all(|v| *v == T::zero()) {
                        continue;
                    }
                    let px = lit::<T>(x as f64) + half;
                    let py = lit::<T>(y as f64) + half;
                    let mut tr = output.transmittance[pi];
                    let mut behind = bg;
                    for k in (0..state.n_contrib[pi] as usize).rev() {
                        let p = &projected[list[k] as usize];
                        let Some(hh) = hit(p, px, py, state.support) else {
                            continue;
                        };
                        let a = hh.alpha;
                        let t_k = tr / (T::one() - a);
                        let mut grad_a = T::zero();
                        let g = &mut grads[k];
                        for ch in 0..3 {
                            grad_a += dc[ch] * (p.colour[ch] - behind[ch]);
                            g.colour[ch] += a * t_k * dc[ch];
                            behind[ch] = a * p.colour[ch] + (T::one() - a) * behind[ch];
                        }
                        grad_a *= t_k;
                        tr = t_k;
                        if hh.saturated {
                            continue;
                        }
                        g.opacity += grad_a * hh.density;
                        let dpower = grad_a * p.opacity * hh.density;
                        let [ca, cb, cc] = p.conic;
                        g.conic[0] -= half * hh.dx * hh.dx * dpower;
                        g.conic[1] -= hh.dx * hh.dy * dpower;
                        g.conic[2] -= half * hh.dy * hh.dy * dpower;
                        g.mean2d[0] += dpower * (ca * hh.dx + cb * hh.dy);
                        g.mean2d[1] += dpower * (cb * hh.dx + cc * hh.dy);
                    }
                }
            }
            grads
        })
        .collect();

    // fixed tile-order reduction
    let mut per_projected = vec![ProjectedGrad::zero(); projected.len()];
    for (t, grads) in tile_grads.iter().enumerate() {
        for (k, g) in grads.iter().enumerate() {
            per_projected[state.tiles[t][k] as usize].add(g);
        }
    }

    let stride = gaussians.colour_stride();
    let param_grads: Vec<_> = projected
        .par_iter()
        .zip(per_projected.par_iter())
        .map(|(p, g)| {
            let mut gc = vec![T::zero(); stride];
            let pg = project_backward(gaussians, p.index, camera, g, &mut gc);
            (pg, gc, g.opacity)
        })
        .collect();

    let mut out = RenderGrad::zeros(gaussians);
    for (p, (pg, gc, go)) in projected.iter().zip(param_grads) {
        let i = p.index;
        out.positions[i] = pg.position;
        out.rotations[i] = pg.rotation;
        out.log_scales[i] = pg.log_scale;
        out.colours[i * stride..(i + 1) * stride].copy_from_slice(&gc);
        out.opacities[i] = go;
    }
    Ok(out)
}
