//! SSIM machinery and the photometric training loss `L1 + λ D-SSIM`.

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};
use crate::scene::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// How windows near the image border are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Only windows fully inside the image.
    Valid,
    /// One window per pixel; samples outside the image count as zero.
    Same,
}

fn kernel<T: Real>() -> [T; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = raw.iter().sum();
    raw.map(|v| lit(v / s))
}

/// Separable Gaussian filter over one `w x h` plane.
struct Filter<T> {
    k: [T; SSIM_WINDOW],
    w: usize,
    h: usize,
    ow: usize,
    oh: usize,
    pad: isize,
}

impl<T: Real> Filter<T> {
    fn new(w: usize, h: usize, padding: Padding) -> Result<Self> {
        let (ow, oh, pad) = match padding {
            Padding::Valid => {
                if w < SSIM_WINDOW || h < SSIM_WINDOW {
                    return Err(Error::Dimension(format!(
                        "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
                    )));
                }
                (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1, 0)
            }
            Padding::Same => (w, h, (SSIM_WINDOW / 2) as isize),
        };
        Ok(Self {
            k: kernel(),
            w,
            h,
            ow,
            oh,
            pad,
        })
    }

    fn apply(&self, input: &[T]) -> Vec<T> {
        // rows first: h x ow
        let mut tmp = vec![T::zero(); self.h * self.ow];
        for y in 0..self.h {
            for ox in 0..self.ow {
                let mut acc = T::zero();
                for (k, kv) in self.k.iter().enumerate() {
                    let x = ox as isize + k as isize - self.pad;
                    if x >= 0 && (x as usize) < self.w {
                        acc += *kv * input[y * self.w + x as usize];
                    }
                }
                tmp[y * self.ow + ox] = acc;
            }
        }
        let mut out = vec![T::zero(); self.oh * self.ow];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let mut acc = T::zero();
                for (k, kv) in self.k.iter().enumerate() {
                    let y = oy as isize + k as isize - self.pad;
                    if y >= 0 && (y as usize) < self.h {
                        acc += *kv * tmp[y as usize * self.ow + ox];
                    }
                }
                out[oy * self.ow + ox] = acc;
            }
        }
        out
    }

    /// Adjoint of [`Filter::apply`].
    fn adjoint(&self, grad_out: &[T]) -> Vec<T> {
        let mut tmp = vec![T::zero(); self.h * self.ow];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let g = grad_out[oy * self.ow + ox];
                for (k, kv) in self.k.iter().enumerate() {
                    let y = oy as isize + k as isize - self.pad;
                    if y >= 0 && (y as usize) < self.h {
                        tmp[y as usize * self.ow + ox] += *kv * g;
                    }
                }
            }
        }
        let mut out = vec![T::zero(); self.h * self.w];
        for y in 0..self.h {
            for ox in 0..self.ow {
                let g = tmp[y * self.ow + ox];
                for (k, kv) in self.k.iter().enumerate() {
                    let x = ox as isize + k as isize - self.pad;
                    if x >= 0 && (x as usize) < self.w {
                        out[y * self.w + x as usize] += *kv * g;
                    }
                }
            }
        }
        out
    }
}

fn planes<T: Real>(img: &ImageBuffer<T>) -> [Vec<T>; 3] {
    std::array::from_fn(|c| img.pixels().iter().skip(c).step_by(3).copied().collect())
}

/// Mean SSIM over all channels and windows, optionally with `dSSIM/da`
/// in interleaved RGB layout.
pub fn ssim_with_grad<T: Real>(
    a: &ImageBuffer<T>,
    b: &ImageBuffer<T>,
    padding: Padding,
    want_grad: bool,
) -> Result<(T, Option<Vec<T>>)> {
    if !a.same_size(b) {
        return Err(Error::Dimension(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let f = Filter::<T>::new(a.width(), a.height(), padding)?;
    let (pa, pb) = (planes(a), planes(b));
    let c1 = lit::<T>(SSIM_C1);
    let c2 = lit::<T>(SSIM_C2);
    let two = lit::<T>(2.0);
    let n_out = f.ow * f.oh;
    let norm = T::one() / lit::<T>((3 * n_out) as f64);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| vec![T::zero(); a.pixels().len()]);
    for ch in 0..3 {
        let x = &pa[ch];
        let y = &pb[ch];
        let xx: Vec<T> = x.iter().map(|v| *v * *v).collect();
        let yy: Vec<T> = y.iter().map(|v| *v * *v).collect();
        let xy: Vec<T> = x.iter().zip(y).map(|(p, q)| *p * *q).collect();
        let (mx, my) = (f.apply(x), f.apply(y));
        let (exx, eyy, exy) = (f.apply(&xx), f.apply(&yy), f.apply(&xy));
        let mut d_mu = vec![T::zero(); n_out];
        let mut d_var = vec![T::zero(); n_out];
        let mut d_cov = vec![T::zero(); n_out];
        for p in 0..n_out {
            let (ux, uy) = (mx[p], my[p]);
            let vx = exx[p] - ux * ux;
            let vy = eyy[p] - uy * uy;
            let cxy = exy[p] - ux * uy;
            let a1 = two * ux * uy + c1;
            let a2 = two * cxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = vx + vy + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // partials w.r.t. mu_x, sigma_x^2, sigma_xy, scaled by the mean.
                // Factored through a1/b1 and a2/b2 (both exactly 1 when x == y)
                // so identical images give an exactly zero gradient.
                let ds_dmu = two / b1 * (uy * (a2 / b2) - ux * s);
                let ds_dvar = -s / b2;
                let ds_dcov = two * (a1 / b1) / b2;
                d_mu[p] = norm * (ds_dmu - two * ux * ds_dvar - uy * ds_dcov);
                d_var[p] = norm * ds_dvar;
                d_cov[p] = norm * ds_dcov;
            }
        }
        if let Some(g) = grad.as_mut() {
            let (gm, gv, gc) = (f.adjoint(&d_mu), f.adjoint(&d_var), f.adjoint(&d_cov));
            for i in 0..x.len() {
                g[3 * i + ch] = gm[i] + two * x[i] * gv[i] + y[i] * gc[i];
            }
        }
    }
    Ok((total * norm, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub l1: T,
    /// `(1 - SSIM) / 2`.
    pub dssim: T,
    /// `dL/d(rendered)`, interleaved RGB.
    pub grad: Vec<T>,
}

/// `mean|r - t| + λ (1 - SSIM(r, t)) / 2` with SSIM over zero-padded windows.
pub fn colour_loss<T: Real>(rendered: &ImageBuffer<T>, reference: &ImageBuffer<T>, lambda: T) -> Result<LossOutput<T>> {
    if !rendered.same_size(reference) {
        return Err(Error::Dimension(format!(
            "rendered {}x{} vs reference {}x{}",
            rendered.width(),
            rendered.height(),
            reference.width(),
            reference.height()
        )));
    }
    let n = rendered.pixels().len();
    let inv_n = T::one() / lit::<T>(n as f64);
    let mut l1 = T::zero();
    let mut grad = vec![T::zero(); n];
    for (i, (r, t)) in rendered.pixels().iter().zip(reference.pixels()).enumerate() {
        let d = *r - *t;
        l1 += d.abs();
        grad[i] = if d > T::zero() {
            inv_n
        } else if d < T::zero() {
            -inv_n
        } else {
            T::zero()
        };
    }
    l1 *= inv_n;
    let half = lit::<T>(0.5);
    let (s, sg) = ssim_with_grad(rendered, reference, Padding::Same, lambda != T::zero())?;
    if let Some(sg) = sg {
        for (gi, si) in grad.iter_mut().zip(sg) {
            *gi -= lambda * half * si;
        }
    }
    let dssim = (T::one() - s) * half;
    Ok(LossOutput {
        loss: l1 + lambda * dssim,
        l1,
        dssim,
        grad,
    })
}
