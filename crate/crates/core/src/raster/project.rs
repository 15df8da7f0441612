//! 3D covariance construction and the local-affine pinhole projection.

use crate::math::{self, quat_normalize, Mat2, Mat3, Quat, Vec2, Vec3};
use crate::raster::sh;
use crate::scalar::{lit, Real};
use crate::scene::{view_direction, view_direction_backward, Camera, GaussianSet};

/// Added to the diagonal of every screen-space covariance, in px².
pub const LOW_PASS: f64 = 0.3;
/// Screen-space covariances with a larger condition number are skipped.
pub const MAX_CONDITION: f64 = 1e12;
/// Gaussians contribute where `d^T Σ'^-1 d <= SUPPORT_SIGMA²`.
pub const SUPPORT_SIGMA: f64 = 3.0;

/// A Gaussian after projection into one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian<T> {
    /// Index into the source [`GaussianSet`].
    pub index: usize,
    pub mean2d: Vec2<T>,
    pub cov2d: Mat2<T>,
    /// Inverse covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [T; 3],
    pub depth: T,
    pub colour: [T; 3],
    pub opacity: T,
    /// Half-extent of the 3σ bounding box, in pixels.
    pub radius: Vec2<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CullReason {
    BehindNearPlane,
    OutsideImage,
    Singular,
}

/// `M = R S` and `Σ = M M^T`.
fn factor<T: Real>(rotation: Quat<T>, log_scale: Vec3<T>) -> (Mat3<T>, Mat3<T>) {
    let r = math::quat_to_mat(quat_normalize(rotation));
    let s = log_scale.map(|v| v.exp());
    let m: Mat3<T> = std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * s[j]));
    (r, m)
}

/// `Σ = R S S^T R^T` for a (re-normalised) quaternion and per-axis log scales.
pub fn build_covariance<T: Real>(rotation: Quat<T>, log_scale: Vec3<T>) -> Mat3<T> {
    let (_, m) = factor(rotation, log_scale);
    math::mat3_mul_t(&m, &m)
}

/// Pulls a symmetric `dL/dΣ` back to the raw quaternion and the log scales.
pub fn build_covariance_backward<T: Real>(rotation: Quat<T>, log_scale: Vec3<T>, grad: &Mat3<T>) -> (Quat<T>, Vec3<T>) {
    let (r, m) = factor(rotation, log_scale);
    let two = lit::<T>(2.0);
    let gm = math::mat3_mul(grad, &m).map(|row| row.map(|v| v * two));
    let s = log_scale.map(|v| v.exp());
    let gr: Mat3<T> = std::array::from_fn(|i| std::array::from_fn(|j| gm[i][j] * s[j]));
    let mut gls = [T::zero(); 3];
    for j in 0..3 {
        let mut acc = T::zero();
        for i in 0..3 {
            acc += gm[i][j] * r[i][j];
        }
        gls[j] = acc * s[j];
    }
    let unit = quat_normalize(rotation);
    let gq = math::quat_normalize_backward(rotation, math::quat_to_mat_backward(unit, &gr));
    (gq, gls)
}

/// 2×3 Jacobian of the pinhole map at camera-space point `t`.
pub fn pinhole_jacobian<T: Real>(camera: &Camera<T>, t: Vec3<T>) -> [[T; 3]; 2] {
    let iz = T::one() / t[2];
    let iz2 = iz * iz;
    [
        [camera.fx * iz, T::zero(), -camera.fx * t[0] * iz2],
        [T::zero(), camera.fy * iz, -camera.fy * t[1] * iz2],
    ]
}

/// `J C J^T + LOW_PASS I` for a symmetric 3×3 `C`.
fn screen_covariance<T: Real>(j: &[[T; 3]; 2], c: &Mat3<T>) -> Mat2<T> {
    let mut jc = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for k in 0..3 {
            jc[r][k] = j[r][0] * c[0][k] + j[r][1] * c[1][k] + j[r][2] * c[2][k];
        }
    }
    let mut out = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for s in 0..2 {
            out[r][s] = jc[r][0] * j[s][0] + jc[r][1] * j[s][1] + jc[r][2] * j[s][2];
        }
    }
    let lp = lit::<T>(LOW_PASS);
    out[0][0] += lp;
    out[1][1] += lp;
    // exact symmetry regardless of rounding order
    out[1][0] = out[0][1];
    out
}

/// Pixel-space mean, camera depth, screen covariance and the camera-space point.
fn geometry<T: Real>(
    position: Vec3<T>,
    rotation: Quat<T>,
    log_scale: Vec3<T>,
    camera: &Camera<T>,
) -> (Vec2<T>, Mat2<T>, Vec3<T>) {
    let t = camera.to_camera(position);
    let w = camera.rotation();
    let sigma = build_covariance(rotation, log_scale);
    let c = math::mat3_mul_t(&math::mat3_mul(&w, &sigma), &w);
    let j = pinhole_jacobian(camera, t);
    let mean = [camera.fx * t[0] / t[2] + camera.cx, camera.fy * t[1] / t[2] + camera.cy];
    (mean, screen_covariance(&j, &c), t)
}

/// Inverse of a symmetric 2×2 as `[a, b, c]`, or `None` when ill-conditioned.
pub fn conic_of<T: Real>(cov: &Mat2<T>) -> Option<[T; 3]> {
    let (a, b, c) = (cov[0][0], cov[0][1], cov[1][1]);
    let det = a * c - b * b;
    let half_tr = (a + c) / lit(2.0);
    let disc = (half_tr * half_tr - det).max(T::zero()).sqrt();
    let (lmax, lmin) = (half_tr + disc, half_tr - disc);
    if !det.is_finite() || det <= T::zero() || lmin <= T::zero() || lmax / lmin > lit(MAX_CONDITION) {
        return None;
    }
    Some([c / det, -b / det, a / det])
}

/// Projects Gaussian `i` of `gaussians` with effective opacity `opacity`.
/// With `bounded == false` the image-bounds cull is skipped.
pub fn project<T: Real>(
    gaussians: &GaussianSet<T>,
    i: usize,
    camera: &Camera<T>,
    opacity: T,
    bounded: bool,
) -> Result<ProjectedGaussian<T>, CullReason> {
    let position = gaussians.positions[i];
    let t = camera.to_camera(position);
    if !(t[2] > camera.near_clip) {
        return Err(CullReason::BehindNearPlane);
    }
    let (mean2d, cov2d, t) = geometry(position, gaussians.rotations[i], gaussians.log_scales[i], camera);
    let conic = conic_of(&cov2d).ok_or(CullReason::Singular)?;
    let k = lit::<T>(SUPPORT_SIGMA);
    let radius = [k * cov2d[0][0].sqrt(), k * cov2d[1][1].sqrt()];
    if bounded {
        let half = lit::<T>(0.5);
        let (w, h) = (lit::<T>(camera.width as f64), lit::<T>(camera.height as f64));
        // pixel centres sit at x + 0.5
        if mean2d[0] + radius[0] < half
            || mean2d[0] - radius[0] > w - half
            || mean2d[1] + radius[1] < half
            || mean2d[1] - radius[1] > h - half
        {
            return Err(CullReason::OutsideImage);
        }
    }
    let dir = view_direction(camera, position).map_err(|_| CullReason::BehindNearPlane)?;
    let colour = sh::evaluate_sh(gaussians.colour(i), gaussians.sh_degree(), dir);
    Ok(ProjectedGaussian {
        index: i,
        mean2d,
        cov2d,
        conic,
        depth: t[2],
        colour,
        opacity,
        radius,
    })
}

/// Upstream gradients for one projected Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectedGrad<T> {
    pub mean2d: Vec2<T>,
    /// `dL/d[a, b, c]` where `b` enters the quadratic form as `2 b dx dy`.
    pub conic: [T; 3],
    pub colour: [T; 3],
    pub opacity: T,
}

impl<T: Real> ProjectedGrad<T> {
    pub fn zero() -> Self {
        Self {
            mean2d: [T::zero(); 2],
            conic: [T::zero(); 3],
            colour: [T::zero(); 3],
            opacity: T::zero(),
        }
    }

    pub fn add(&mut self, o: &Self) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.colour[k] += o.colour[k];
        }
        self.opacity += o.opacity;
    }
}

/// Gradients of one Gaussian's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParamGrad<T> {
    pub position: Vec3<T>,
    pub rotation: Quat<T>,
    pub log_scale: Vec3<T>,
}

/// Pulls screen-space gradients back to position, rotation, log scale and
/// SH coefficients (accumulated into `grad_colour`).
pub fn project_backward<T: Real>(
    gaussians: &GaussianSet<T>,
    i: usize,
    camera: &Camera<T>,
    grad: &ProjectedGrad<T>,
    grad_colour: &mut [T],
) -> GaussianParamGrad<T> {
    let position = gaussians.positions[i];
    let rotation = gaussians.rotations[i];
    let log_scale = gaussians.log_scales[i];
    let (_, cov2d, t) = geometry(position, rotation, log_scale, camera);
    let w = camera.rotation();
    let sigma = build_covariance(rotation, log_scale);
    let c = math::mat3_mul_t(&math::mat3_mul(&w, &sigma), &w);
    let j = pinhole_jacobian(camera, t);

    // conic -> screen covariance: dΣ' = -K G K with symmetric G
    let det = cov2d[0][0] * cov2d[1][1] - cov2d[0][1] * cov2d[0][1];
    let kinv = [
        [cov2d[1][1] / det, -cov2d[0][1] / det],
        [-cov2d[0][1] / det, cov2d[0][0] / det],
    ];
    let half = lit::<T>(0.5);
    let gk = [
        [grad.conic[0], grad.conic[1] * half],
        [grad.conic[1] * half, grad.conic[2]],
    ];
    let mut gs = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for s in 0..2 {
            let mut acc = T::zero();
            for a in 0..2 {
                for b in 0..2 {
                    acc += kinv[r][a] * gk[a][b] * kinv[b][s];
                }
            }
            gs[r][s] = -acc;
        }
    }

    // Σ' = J C J^T: dC = J^T G J, dJ = 2 G J C
    let mut gc = [[T::zero(); 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            let mut acc = T::zero();
            for r in 0..2 {
                for s in 0..2 {
                    acc += j[r][p] * gs[r][s] * j[s][q];
                }
            }
            gc[p][q] = acc;
        }
    }
    let mut gj = [[T::zero(); 3]; 2];
    let two = lit::<T>(2.0);
    for r in 0..2 {
        for q in 0..3 {
            let mut acc = T::zero();
            for s in 0..2 {
                for p in 0..3 {
                    acc += gs[r][s] * j[s][p] * c[p][q];
                }
            }
            gj[r][q] = two * acc;
        }
    }
    let gsigma = math::mat3_mul(&math::mat3_t_mul(&w, &gc), &w);
    let (rotation_grad, log_scale_grad) = build_covariance_backward(rotation, log_scale, &gsigma);

    // camera-space point through J and the mean
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = T::one() / t[2];
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut gt = [T::zero(); 3];
    gt[0] += gj[0][2] * (-fx * iz2);
    gt[1] += gj[1][2] * (-fy * iz2);
    gt[2] += gj[0][0] * (-fx * iz2)
        + gj[0][2] * (two * fx * t[0] * iz3)
        + gj[1][1] * (-fy * iz2)
        + gj[1][2] * (two * fy * t[1] * iz3);
    gt[0] += grad.mean2d[0] * fx * iz;
    gt[1] += grad.mean2d[1] * fy * iz;
    gt[2] -= grad.mean2d[0] * fx * t[0] * iz2 + grad.mean2d[1] * fy * t[1] * iz2;
    let mut gpos = math::mat3_t_vec(&w, gt);

    // colour through SH and the view direction
    if grad.colour.iter().any(|v| *v != T::zero()) {
        if let Ok(dir) = view_direction(camera, position) {
            let gdir = sh::evaluate_sh_backward(
                gaussians.colour(i),
                gaussians.sh_degree(),
                dir,
                grad.colour,
                grad_colour,
            );
            if gaussians.sh_degree() > 0 {
                gpos = math::add3(gpos, view_direction_backward(camera, position, gdir));
            }
        }
    }

    GaussianParamGrad {
        position: gpos,
        rotation: rotation_grad,
        log_scale: log_scale_grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_camera(f: f64, size: usize) -> Camera<f64> {
        let m = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let c = size as f64 / 2.0;
        Camera::new(f, f, c, c, size, size, m, 0.01).unwrap()
    }

    fn close(a: &Mat3<f64>, b: &Mat3<f64>, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    #[test]
    fn covariance_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert!(close(&build_covariance(id, [0.0; 3]), &math::mat3_identity(), 1e-15));
        let l = [0.0, 2f64.ln(), 3f64.ln()];
        let d = [[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 9.0]];
        assert!(close(&build_covariance(id, l), &d, 1e-12));
        let h = std::f64::consts::FRAC_PI_4;
        let rz = [h.cos(), 0.0, 0.0, h.sin()];
        let d = [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 9.0]];
        assert!(close(&build_covariance(rz, l), &d, 1e-12));
    }

    #[test]
    fn isotropic_projection() {
        let cam = identity_camera(100.0, 64);
        let mut g = GaussianSet::new(0).unwrap();
        g.push([0.0, 0.0, 5.0], [1.0, 0.0, 0.0, 0.0], [0.0; 3], 0.0, &[1.0, 0.0, 0.0]);
        let p = project(&g, 0, &cam, 0.5, true).unwrap();
        assert_eq!(p.mean2d, [32.0, 32.0]);
        assert!((p.cov2d[0][0] - (400.0 + LOW_PASS)).abs() < 1e-9);
        assert!((p.cov2d[1][1] - (400.0 + LOW_PASS)).abs() < 1e-9);
        assert!(p.cov2d[0][1].abs() < 1e-12);
        assert_eq!(p.depth, 5.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = identity_camera(100.0, 32);
        let mut g = GaussianSet::new(0).unwrap();
        g.push([0.0, 0.0, -1.0], [1.0, 0.0, 0.0, 0.0], [0.0; 3], 0.0, &[1.0, 0.0, 0.0]);
        assert_eq!(project(&g, 0, &cam, 0.5, true), Err(CullReason::BehindNearPlane));
    }

    #[test]
    fn far_off_screen_is_culled_unless_unbounded() {
        let cam = identity_camera(100.0, 32);
        let mut g = GaussianSet::new(0).unwrap();
        g.push([10.0, 0.0, 2.0], [1.0, 0.0, 0.0, 0.0], [-4.0; 3], 0.0, &[1.0, 0.0, 0.0]);
        assert_eq!(project(&g, 0, &cam, 0.5, true), Err(CullReason::OutsideImage));
        assert!(project(&g, 0, &cam, 0.5, false).is_ok());
    }

    #[test]
    fn camera_translation_moves_mean_per_pinhole() {
        let mut g = GaussianSet::new(0).unwrap();
        g.push([0.3, -0.2, 4.0], [1.0, 0.0, 0.0, 0.0], [-3.0; 3], 0.0, &[1.0, 0.0, 0.0]);
        let mut cam = identity_camera(50.0, 32);
        let tvec = [0.5, 0.25, 1.0];
        for k in 0..3 {
            cam.world_to_camera[k][3] = tvec[k];
        }
        let p = project(&g, 0, &cam, 0.5, false).unwrap();
        let t = [0.8, 0.05, 5.0];
        assert!((p.mean2d[0] - (50.0 * t[0] / t[2] + 16.0)).abs() < 1e-12);
        assert!((p.mean2d[1] - (50.0 * t[1] / t[2] + 16.0)).abs() < 1e-12);
        assert_eq!(p.depth, 5.0);
    }

    #[test]
    fn monte_carlo_projection_agrees_with_jacobian() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let cam = identity_camera(100.0, 64);
        let mut g = GaussianSet::new(0).unwrap();
        g.push(
            [0.2, -0.1, 5.0],
            [0.9, 0.2, -0.3, 0.1],
            [-2.5, -2.0, -2.8],
            0.0,
            &[1.0, 0.0, 0.0],
        );
        let p = project(&g, 0, &cam, 0.5, true).unwrap();
        let (_, m) = factor(g.rotations[0], g.log_scales[0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let d = math::mat3_vec(&m, z);
            let x = math::add3(g.positions[0], d);
            pts.push([100.0 * x[0] / x[2], 100.0 * x[1] / x[2]]);
        }
        let mean = [
            pts.iter().map(|p| p[0]).sum::<f64>() / n as f64,
            pts.iter().map(|p| p[1]).sum::<f64>() / n as f64,
        ];
        let mut cov = [[0.0; 2]; 2];
        for q in &pts {
            for r in 0..2 {
                for s in 0..2 {
                    cov[r][s] += (q[r] - mean[r]) * (q[s] - mean[s]) / n as f64;
                }
            }
        }
        for r in 0..2 {
            let analytic = p.cov2d[r][r] - LOW_PASS;
            assert!(
                (cov[r][r] - analytic).abs() / analytic < 0.03,
                "{r}: {} vs {analytic}",
                cov[r][r]
            );
        }
        let scale = (p.cov2d[0][0] * p.cov2d[1][1]).sqrt();
        assert!((cov[0][1] - p.cov2d[0][1]).abs() / scale < 0.03);
    }
}
