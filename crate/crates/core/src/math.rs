//! Fixed-size vector and matrix helpers on plain arrays.
//!
//! Matrices are row-major `[[T; C]; R]`. Everything here is small enough that
//! the compiler fully unrolls it, and keeping the types as arrays makes the
//! hand-written backward passes line up index-for-index with the forward code.

use crate::scalar::Real;

pub type Vec2<T> = [T; 2];
pub type Vec3<T> = [T; 3];
pub type Quat<T> = [T; 4];
pub type Mat2<T> = [[T; 2]; 2];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn add3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3<T: Real>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

#[inline]
pub fn mat3_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

#[inline]
pub fn mat3_t_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    let mut out = [T::zero(); 3];
    for (i, row) in m.iter().enumerate() {
        for j in 0..3 {
            out[j] += row[j] * v[i];
        }
    }
    out
}

pub fn mat3_identity<T: Real>() -> Mat3<T> {
    let mut m = [[T::zero(); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

pub fn mat3_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn mat3_transpose<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// `a * b^T`
pub fn mat3_mul_t<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    mat3_mul(a, &mat3_transpose(b))
}

/// `a^T * b`
pub fn mat3_t_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    mat3_mul(&mat3_transpose(a), b)
}

/// Largest absolute entry of `R R^T - I`.
pub fn orthonormality_error<T: Real>(r: &Mat3<T>) -> T {
    let rrt = mat3_mul_t(r, r);
    let mut worst = T::zero();
    for (i, row) in rrt.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((v - target).abs());
        }
    }
    worst
}

#[inline]
pub fn quat_norm<T: Real>(q: Quat<T>) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rescales to unit norm. Applying it twice gives the same result as once up to rounding.
pub fn quat_normalize<T: Real>(q: Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    if n <= T::zero() || !n.is_finite() {
        return [T::one(), T::zero(), T::zero(), T::zero()];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Gradient of `q / |q|` pulled back to `q`.
pub fn quat_normalize_backward<T: Real>(q: Quat<T>, grad_unit: Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let proj = u[0] * grad_unit[0] + u[1] * grad_unit[1] + u[2] * grad_unit[2] + u[3] * grad_unit[3];
    [
        (grad_unit[0] - u[0] * proj) / n,
        (grad_unit[1] - u[1] * proj) / n,
        (grad_unit[2] - u[2] * proj) / n,
        (grad_unit[3] - u[3] * proj) / n,
    ]
}

/// Rotation matrix of a unit quaternion in w-x-y-z order.
pub fn quat_to_mat<T: Real>(q: Quat<T>) -> Mat3<T> {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = one + one;
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Pulls `dL/dR` back through [`quat_to_mat`] (no normalisation).
pub fn quat_to_mat_backward<T: Real>(q: Quat<T>, g: &Mat3<T>) -> Quat<T> {
    let [w, x, y, z] = q;
    let two = T::one() + T::one();
    let four = two + two;
    let dw = two * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let dx = two * (y * g[0][1] + z * g[0][2] + y * g[1][0] - w * g[1][2] + z * g[2][0] + w * g[2][1])
        - four * x * (g[1][1] + g[2][2]);
    let dy = two * (x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1])
        - four * y * (g[0][0] + g[2][2]);
    let dz = two * (-w * g[0][1] + x * g[0][2] + w * g[1][0] + y * g[1][2] + x * g[2][0] + y * g[2][1])
        - four * z * (g[0][0] + g[1][1]);
    [dw, dx, dy, dz]
}
