//! Gaussians, cameras, images and the scene container.

mod config;
mod ply;

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{self, mat3_t_vec, mat3_vec, norm3, orthonormality_error, quat_normalize, sub3, Mat3, Quat, Vec3};
use crate::scalar::{lit, sigmoid, Real};

pub use config::{load_scene, BoxSpec, SceneConfigFile, SplitSpec, ViewSpec};
pub use ply::{ingest_point_cloud, read_ply_points, write_ply, PlyFormat, PlyPoints};

/// Axis-aligned box in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Vec3<T>, max: Vec3<T>) -> Self {
        Self { min, max }
    }

    /// Smallest box containing every point, or `None` for an empty slice.
    pub fn from_points(points: &[Vec3<T>]) -> Option<Self> {
        let first = *points.first()?;
        let mut b = Self::new(first, first);
        for p in points {
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        Some(b)
    }

    /// Grows each side by `fraction` of the largest extent (at least `min_pad`).
    pub fn padded(&self, fraction: T, min_pad: T) -> Self {
        let extent = self.extent();
        let largest = extent[0].max(extent[1]).max(extent[2]);
        let pad = (largest * fraction).max(min_pad);
        Self {
            min: [self.min[0] - pad, self.min[1] - pad, self.min[2] - pad],
            max: [self.max[0] + pad, self.max[1] + pad, self.max[2] + pad],
        }
    }

    pub fn extent(&self) -> Vec3<T> {
        sub3(self.max, self.min)
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Structure-of-arrays storage for every learnable per-Gaussian parameter.
///
/// Colours are spherical-harmonic coefficients laid out coefficient-major:
/// `[k][channel]` for `k in 0..(degree + 1)^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet<T> {
    pub positions: Vec<Vec3<T>>,
    /// Unit quaternions, w-x-y-z.
    pub rotations: Vec<Quat<T>>,
    pub log_scales: Vec<Vec3<T>>,
    pub opacity_logits: Vec<T>,
    pub colours: Vec<T>,
    sh_degree: usize,
}

impl<T: Real> GaussianSet<T> {
    pub fn new(sh_degree: usize) -> Result<Self> {
        if sh_degree > 1 {
            return Err(Error::Config(format!("sh_degree must be 0 or 1, got {sh_degree}")));
        }
        Ok(Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            colours: Vec::new(),
            sh_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    /// Scalars per Gaussian in [`GaussianSet::colours`].
    pub fn colour_stride(&self) -> usize {
        3 * (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    pub fn colour(&self, i: usize) -> &[T] {
        let s = self.colour_stride();
        &self.colours[i * s..(i + 1) * s]
    }

    pub fn colour_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.colour_stride();
        &mut self.colours[i * s..(i + 1) * s]
    }

    /// Appends one Gaussian. `colour` may hold only the DC term; higher bands are zero-filled.
    pub fn push(&mut self, position: Vec3<T>, rotation: Quat<T>, log_scale: Vec3<T>, opacity_logit: T, colour: &[T]) {
        self.positions.push(position);
        self.rotations.push(quat_normalize(rotation));
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        let stride = self.colour_stride();
        let n = colour.len().min(stride);
        self.colours.extend_from_slice(&colour[..n]);
        self.colours.extend(std::iter::repeat_n(T::zero(), stride - n));
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> Vec3<T> {
        let l = self.log_scales[i];
        [l[0].exp(), l[1].exp(), l[2].exp()]
    }

    pub fn rotation_matrix(&self, i: usize) -> Mat3<T> {
        math::quat_to_mat(quat_normalize(self.rotations[i]))
    }

    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = quat_normalize(*q);
        }
    }

    /// Keeps the Gaussians whose `keep` flag is set, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let stride = self.colour_stride();
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.rotations.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.log_scales.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.opacity_logits.retain(|_| *it.next().unwrap());
        let mut idx = 0usize;
        self.colours.retain(|_| {
            let k = keep[idx / stride];
            idx += 1;
            k
        });
    }

    /// Indices of Gaussians holding any non-finite parameter.
    pub fn non_finite_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                !(self.positions[i].iter().all(|v| v.is_finite())
                    && self.rotations[i].iter().all(|v| v.is_finite())
                    && self.log_scales[i].iter().all(|v| v.is_finite())
                    && self.opacity_logits[i].is_finite()
                    && self.colour(i).iter().all(|v| v.is_finite()))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.colours.len() != n * self.colour_stride()
        {
            return Err(Error::Dimension(
                "gaussian parameter arrays have different lengths".into(),
            ));
        }
        let tol = lit::<T>(1e-6);
        for (i, q) in self.rotations.iter().enumerate() {
            if (math::quat_norm(*q) - T::one()).abs() > tol {
                return Err(Error::InvalidInput(format!("rotation {i} is not a unit quaternion")));
            }
        }
        Ok(())
    }
}

/// Pinhole camera. `world_to_camera` maps world points into a frame with
/// +x right, +y down and +z along the optical axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: [[T; 4]; 4],
    pub near_clip: T,
}

impl<T: Real> Camera<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        width: usize,
        height: usize,
        world_to_camera: [[T; 4]; 4],
        near_clip: T,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
            near_clip,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3<T>,
        target: Vec3<T>,
        up: Vec3<T>,
        fx: T,
        fy: T,
        width: usize,
        height: usize,
        near_clip: T,
    ) -> Result<Self> {
        let forward = sub3(target, eye);
        let f_norm = norm3(forward);
        if f_norm <= T::zero() {
            return Err(Error::InvalidInput("eye coincides with target".into()));
        }
        let z = math::scale3(forward, T::one() / f_norm);
        // image y points down, so "down" is -up projected off the optical axis
        let down = math::scale3(up, -T::one());
        let x = cross(down, z);
        let x_norm = norm3(x);
        if x_norm <= lit(1e-12) {
            return Err(Error::InvalidInput("up vector parallel to view axis".into()));
        }
        let x = math::scale3(x, T::one() / x_norm);
        let y = cross(z, x);
        let r = [x, y, z];
        let t = math::scale3(mat3_vec(&r, eye), -T::one());
        let mut m = [[T::zero(); 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[i][j];
            }
            m[i][3] = t[i];
        }
        m[3][3] = T::one();
        let half = lit::<T>(0.5);
        Self::new(
            fx,
            fy,
            T::from_usize(width).unwrap() * half,
            T::from_usize(height).unwrap() * half,
            width,
            height,
            m,
            near_clip,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Dimension(format!(
                "camera image size {}x{} must be positive",
                self.width, self.height
            )));
        }
        if !(self.near_clip > T::zero()) {
            return Err(Error::InvalidInput("near_clip must be positive".into()));
        }
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        let all_finite = self
            .world_to_camera
            .iter()
            .flatten()
            .chain([&self.cx, &self.cy])
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidInput("camera has non-finite entries".into()));
        }
        let dev = orthonormality_error(&self.rotation());
        if dev > lit(1e-6) {
            return Err(Error::NotOrthonormal {
                deviation: dev.to_f64_lossy(),
            });
        }
        Ok(())
    }

    /// The 3x3 block `W` of the world-to-camera transform.
    pub fn rotation(&self) -> Mat3<T> {
        let m = &self.world_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3<T> {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Camera centre in world coordinates, `-W^T t`.
    pub fn centre(&self) -> Vec3<T> {
        math::scale3(mat3_t_vec(&self.rotation(), self.translation()), -T::one())
    }

    pub fn to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        math::add3(mat3_vec(&self.rotation(), p), self.translation())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[inline]
fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Unit vector from the camera centre to `position`.
pub fn view_direction<T: Real>(camera: &Camera<T>, position: Vec3<T>) -> Result<Vec3<T>> {
    let d = sub3(position, camera.centre());
    let n = norm3(d);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::DegenerateDirection);
    }
    Ok(math::scale3(d, T::one() / n))
}

/// Gradient of [`view_direction`] pulled back to the position.
pub fn view_direction_backward<T: Real>(camera: &Camera<T>, position: Vec3<T>, grad_dir: Vec3<T>) -> Vec3<T> {
    let d = sub3(position, camera.centre());
    let n = norm3(d);
    let v = math::scale3(d, T::one() / n);
    let proj = math::dot3(v, grad_dir);
    math::scale3(sub3(grad_dir, math::scale3(v, proj)), T::one() / n)
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    width: usize,
    height: usize,
    pixels: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn new(width: usize, height: usize, fill: [T; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            pixels.extend_from_slice(&fill);
        }
        Self { width, height, pixels }
    }

    /// Renderer output: size already known, and NaN from corrupt parameters
    /// must reach the loss rather than fail here.
    pub(crate) fn from_rendered(width: usize, height: usize, pixels: Vec<T>) -> Self {
        debug_assert_eq!(pixels.len(), 3 * width * height);
        Self { width, height, pixels }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image size {width}x{height} must be positive"
            )));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Shape {
                expected: 3 * width * height,
                got: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::Domain(format!(
                "pixel channel {bad} = {} outside [0, 1]",
                pixels[bad]
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let o = 3 * (y * self.width + x);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Sets a pixel, clamping each channel into `[0, 1]`.
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [T; 3]) {
        let o = 3 * (y * self.width + x);
        for c in 0..3 {
            self.pixels[o + c] = rgb[c].max(T::zero()).min(T::one());
        }
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let inv = lit::<T>(1.0 / 255.0);
        let pixels = img
            .into_raw()
            .into_iter()
            .map(|b| T::from_u8(b).unwrap() * inv)
            .collect();
        Self::from_pixels(w as usize, h as usize, pixels)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View<T> {
    pub camera: Camera<T>,
    pub image: ImageBuffer<T>,
}

impl<T: Real> View<T> {
    pub fn new(camera: Camera<T>, image: ImageBuffer<T>) -> Result<Self> {
        if camera.width != image.width() || camera.height != image.height() {
            return Err(Error::Dimension(format!(
                "camera is {}x{} but image is {}x{}",
                camera.width,
                camera.height,
                image.width(),
                image.height()
            )));
        }
        Ok(Self { camera, image })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta<T> {
    pub name: String,
    pub bounds: Aabb<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    pub gaussians: GaussianSet<T>,
    pub train_views: Vec<View<T>>,
    pub test_views: Vec<View<T>>,
    pub meta: SceneMeta<T>,
}

impl<T: Real> Scene<T> {
    pub fn new(
        gaussians: GaussianSet<T>,
        train_views: Vec<View<T>>,
        test_views: Vec<View<T>>,
        meta: SceneMeta<T>,
    ) -> Result<Self> {
        if train_views.is_empty() {
            return Err(Error::Config("scene needs at least one train view".into()));
        }
        gaussians.validate()?;
        if let Some(i) = gaussians.positions.iter().position(|p| !meta.bounds.contains(*p)) {
            return Err(Error::Config(format!(
                "gaussian {i} lies outside the scene bounding box"
            )));
        }
        Ok(Self {
            gaussians,
            train_views,
            test_views,
            meta,
        })
    }

    pub fn views(&self, split: Split) -> &[View<T>] {
        match split {
            Split::Train => &self.train_views,
            Split::Test => &self.test_views,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!(
                "unknown split {other:?} (expected train or test)"
            ))),
        }
    }
}
