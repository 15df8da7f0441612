//! Degree 0 and 1 spherical-harmonic colour.
//!
//! Degree 0 is the DC coefficient used directly as linear RGB. Degree 1 adds
//! the three linear bands with the real SH basis
//! `(-C1 y, C1 z, -C1 x)` evaluated on the unit view direction.

use crate::math::Vec3;
use crate::scalar::{clamp01, lit, Real};

pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Number of SH coefficients per channel.
pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

fn basis<T: Real>(degree: usize, dir: Vec3<T>) -> [T; 4] {
    let c1 = lit::<T>(SH_C1);
    if degree == 0 {
        [T::one(), T::zero(), T::zero(), T::zero()]
    } else {
        [T::one(), -c1 * dir[1], c1 * dir[2], -c1 * dir[0]]
    }
}

/// Colour before clipping.
pub fn evaluate_sh_raw<T: Real>(coeffs: &[T], degree: usize, dir: Vec3<T>) -> [T; 3] {
    let b = basis(degree, dir);
    let mut out = [T::zero(); 3];
    for (k, bk) in b.iter().enumerate().take(coeff_count(degree)) {
        for c in 0..3 {
            out[c] += *bk * coeffs[3 * k + c];
        }
    }
    out
}

/// Colour clipped into `[0, 1]` per channel. NaN stays NaN so corrupt
/// parameters surface as a non-finite loss.
pub fn evaluate_sh<T: Real>(coeffs: &[T], degree: usize, dir: Vec3<T>) -> [T; 3] {
    evaluate_sh_raw(coeffs, degree, dir).map(clamp01)
}

/// Gradients with respect to the coefficients (written into `grad_coeffs`)
/// and the view direction (returned). Channels clipped in the forward pass
/// pass no gradient.
pub fn evaluate_sh_backward<T: Real>(
    coeffs: &[T],
    degree: usize,
    dir: Vec3<T>,
    upstream: [T; 3],
    grad_coeffs: &mut [T],
) -> Vec3<T> {
    let raw = evaluate_sh_raw(coeffs, degree, dir);
    let g: [T; 3] = std::array::from_fn(|c| {
        if raw[c] >= T::zero() && raw[c] <= T::one() {
            upstream[c]
        } else {
            T::zero()
        }
    });
    let b = basis(degree, dir);
    for k in 0..coeff_count(degree) {
        for c in 0..3 {
            grad_coeffs[3 * k + c] += b[k] * g[c];
        }
    }
    if degree == 0 {
        return [T::zero(); 3];
    }
    let c1 = lit::<T>(SH_C1);
    let mut gd = [T::zero(); 3];
    for c in 0..3 {
        gd[1] -= c1 * coeffs[3 + c] * g[c];
        gd[2] += c1 * coeffs[6 + c] * g[c];
        gd[0] -= c1 * coeffs[9 + c] * g[c];
    }
    gd
}
