//! Small synthetic scenes: random ground-truth Gaussians, ring cameras, and
//! reference images drawn by the brute-force blend.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{render_reference, RasterConfig};
use crate::rng::{CounterRng, Domain};
use crate::scalar::{lit, logit, Real};
use crate::scene::{Aabb, Camera, GaussianSet, Scene, SceneMeta, View};

/// How the trainable Gaussians start out relative to the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitKind {
    /// The ground truth itself.
    Exact,
    /// True centres jittered by up to `position_noise`, grey, α = 0.5,
    /// isotropic scale `exp(log_scale)`.
    Perturbed { position_noise: f64, log_scale: f64 },
    /// `count` points drawn uniformly inside the ground-truth box, grey,
    /// α = 0.5, isotropic scale `exp(log_scale)`.
    Sparse { count: usize, log_scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub gaussians: usize,
    pub train_views: usize,
    pub test_views: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub focal: f64,
    /// Camera distance from the origin.
    pub radius: f64,
    /// Ground-truth centres lie in `[-spread, spread]^3`.
    pub spread: f64,
    pub log_scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    pub sh_degree: usize,
    pub background: [f64; 3],
    pub seed: u64,
    pub init: InitKind,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            gaussians: 20,
            train_views: 8,
            test_views: 2,
            size: 32,
            focal: 64.0,
            radius: 4.0,
            spread: 0.8,
            log_scale_range: (-2.3, -1.6),
            opacity_range: (0.3, 0.7),
            sh_degree: 0,
            background: [0.0; 3],
            seed: 0,
            init: InitKind::Perturbed {
                position_noise: 0.02,
                log_scale: -2.0,
            },
        }
    }
}

impl SyntheticSpec {
    /// Three Gaussians, two train views and one test view.
    pub fn fixture() -> Self {
        Self {
            name: "fixture".into(),
            gaussians: 3,
            train_views: 2,
            test_views: 1,
            init: InitKind::Exact,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians == 0 {
            return Err(Error::EmptyScene("synthetic scene needs at least one gaussian".into()));
        }
        if self.train_views == 0 {
            return Err(Error::Config("synthetic scene needs at least one train view".into()));
        }
        if self.size == 0 || !(self.focal > 0.0) || !(self.spread > 0.0) {
            return Err(Error::Config("size, focal and spread must be positive".into()));
        }
        if !(self.radius > self.spread * 3f64.sqrt()) {
            return Err(Error::Config("cameras must sit outside the gaussian cube".into()));
        }
        let (lo, hi) = self.opacity_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config("opacity range must lie inside (0, 1)".into()));
        }
        if let InitKind::Sparse { count: 0, .. } = self.init {
            return Err(Error::EmptyScene("sparse init needs at least one point".into()));
        }
        Ok(())
    }
}

/// Cameras looking at the origin from a ring of radius `radius`. Elevation
/// alternates between `±elevation` radians; `phase` rotates the ring by a
/// fraction of one step.
pub fn ring_cameras<T: Real>(
    count: usize,
    radius: f64,
    elevation: f64,
    phase: f64,
    size: usize,
    focal: f64,
) -> Result<Vec<Camera<T>>> {
    (0..count)
        .map(|k| {
            let theta = std::f64::consts::TAU * (k as f64 + phase) / count as f64;
            let phi = if k % 2 == 0 { elevation } else { -elevation };
            let eye = [
                radius * phi.cos() * theta.cos(),
                radius * phi.sin(),
                radius * phi.cos() * theta.sin(),
            ];
            Camera::look_at(
                eye.map(lit),
                [T::zero(); 3],
                [T::zero(), T::one(), T::zero()],
                lit(focal),
                lit(focal),
                size,
                size,
                lit(0.01),
            )
        })
        .collect()
}

fn uniform(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..hi)
    }
}

/// Ground-truth Gaussians for `spec`.
pub fn ground_truth<T: Real>(spec: &SyntheticSpec) -> Result<GaussianSet<T>> {
    spec.validate()?;
    let mut r = CounterRng::new(spec.seed, Domain::Synthetic).stream(0, 0);
    let mut g = GaussianSet::new(spec.sh_degree)?;
    let s = spec.spread;
    for _ in 0..spec.gaussians {
        let pos = [
            uniform(&mut r, (-s, s)),
            uniform(&mut r, (-s, s)),
            uniform(&mut r, (-s, s)),
        ];
        let q = [
            r.random_range(0.2..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        ];
        let ls = [
            uniform(&mut r, spec.log_scale_range),
            uniform(&mut r, spec.log_scale_range),
            uniform(&mut r, spec.log_scale_range),
        ];
        let alpha = uniform(&mut r, spec.opacity_range);
        let mut colour: Vec<f64> = (0..3).map(|_| r.random_range(0.1..0.9)).collect();
        if spec.sh_degree == 1 {
            colour.extend((0..9).map(|_| r.random_range(-0.1..0.1)));
        }
        let colour: Vec<T> = colour.into_iter().map(lit).collect();
        g.push(pos.map(lit), q.map(lit), ls.map(lit), logit(lit::<T>(alpha)), &colour);
    }
    Ok(g)
}

fn initial<T: Real>(spec: &SyntheticSpec, truth: &GaussianSet<T>) -> Result<GaussianSet<T>> {
    let mut r = CounterRng::new(spec.seed, Domain::Synthetic).stream(1, 0);
    let grey = [lit::<T>(0.5); 3];
    let ident = [T::one(), T::zero(), T::zero(), T::zero()];
    match spec.init {
        InitKind::Exact => Ok(truth.clone()),
        InitKind::Perturbed {
            position_noise,
            log_scale,
        } => {
            let mut g = GaussianSet::new(spec.sh_degree)?;
            let n = position_noise;
            for p in &truth.positions {
                let jitter: [f64; 3] = std::array::from_fn(|_| uniform(&mut r, (-n, n)));
                let pos = [p[0] + lit(jitter[0]), p[1] + lit(jitter[1]), p[2] + lit(jitter[2])];
                g.push(pos, ident, [lit(log_scale); 3], T::zero(), &grey);
            }
            Ok(g)
        }
        InitKind::Sparse { count, log_scale } => {
            let mut g = GaussianSet::new(spec.sh_degree)?;
            let s = spec.spread;
            for _ in 0..count {
                let pos: [f64; 3] = std::array::from_fn(|_| uniform(&mut r, (-s, s)));
                g.push(pos.map(lit), ident, [lit(log_scale); 3], T::zero(), &grey);
            }
            Ok(g)
        }
    }
}

/// Renders `truth` from every camera with the brute-force blend.
pub fn render_views<T: Real>(
    truth: &GaussianSet<T>,
    cameras: Vec<Camera<T>>,
    background: [f64; 3],
) -> Result<Vec<View<T>>> {
    let cfg = RasterConfig {
        background: background.map(lit),
        ..RasterConfig::default()
    };
    let opacity: Vec<T> = (0..truth.len()).map(|i| truth.opacity(i)).collect();
    cameras
        .into_iter()
        .map(|cam| {
            let (image, _) = render_reference(truth, &cam, &opacity, &cfg)?;
            View::new(cam, image)
        })
        .collect()
}

/// A generated scene together with the parameters that produced its images.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic<T> {
    pub scene: Scene<T>,
    pub truth: GaussianSet<T>,
}

pub fn generate<T: Real>(spec: &SyntheticSpec) -> Result<Synthetic<T>> {
    let truth = ground_truth::<T>(spec)?;
    let train = ring_cameras(spec.train_views, spec.radius, 0.35, 0.0, spec.size, spec.focal)?;
    // held-out cameras sit between the train azimuths at a different height
    let test = ring_cameras(spec.test_views, spec.radius, 0.15, 0.5, spec.size, spec.focal)?;
    let train_views = render_views(&truth, train, spec.background)?;
    let test_views = render_views(&truth, test, spec.background)?;
    let gaussians = initial(spec, &truth)?;
    let s = lit::<T>(spec.spread);
    let bounds = Aabb::new([-s; 3], [s; 3]).padded(lit(0.1), lit(0.05));
    let meta = SceneMeta {
        name: spec.name.clone(),
        bounds,
    };
    Ok(Synthetic {
        scene: Scene::new(gaussians, train_views, test_views, meta)?,
        truth,
    })
}
