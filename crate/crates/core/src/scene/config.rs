//! TOML scene description: point cloud, posed images and the train/test split.
//!
//! ```toml
//! name = "toy"
//! points_path = "points.ply"
//! sh_degree = 0
//! bounding_box = { min = [-2, -2, -2], max = [2, 2, 2] }
//!
//! [split]
//! train = [0, 1]
//! test = [2]
//!
//! [[views]]
//! image = "view_000.png"
//! width = 32
//! height = 32
//! fx = 40.0
//! fy = 40.0
//! cx = 16.0
//! cy = 16.0
//! world_to_camera = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 4], [0, 0, 0, 1]]
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};
use crate::scene::ply::{gaussians_from_points, read_ply_points};
use crate::scene::{Aabb, Camera, ImageBuffer, Scene, SceneMeta, View};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfigFile {
    #[serde(default)]
    pub name: Option<String>,
    pub points_path: PathBuf,
    #[serde(default)]
    pub sh_degree: usize,
    #[serde(default)]
    pub bounding_box: Option<BoxSpec>,
    /// Colour for points without RGB, default mid grey.
    #[serde(default)]
    pub colour_default: Option<[f64; 3]>,
    pub views: Vec<ViewSpec>,
    pub split: SplitSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub image: PathBuf,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: [[f64; 4]; 4],
    #[serde(default = "default_near")]
    pub near_clip: f64,
}

fn default_near() -> f64 {
    0.01
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    #[serde(default)]
    pub test: Vec<usize>,
}

impl ViewSpec {
    pub fn camera<T: Real>(&self) -> Result<Camera<T>> {
        let m = self.world_to_camera.map(|row| row.map(lit::<T>));
        Camera::new(
            lit(self.fx),
            lit(self.fy),
            lit(self.cx),
            lit(self.cy),
            self.width,
            self.height,
            m,
            lit(self.near_clip),
        )
    }
}

pub fn load_scene<T: Real>(config_path: impl AsRef<Path>) -> Result<Scene<T>> {
    let config_path = config_path.as_ref();
    let text = std::fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
    let cfg: SceneConfigFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let points = read_ply_points::<T>(resolve(&cfg.points_path))?;
    if points.positions.is_empty() {
        return Err(Error::EmptyScene(format!(
            "{} contains no points",
            cfg.points_path.display()
        )));
    }
    let grey = cfg.colour_default.unwrap_or([0.5; 3]).map(lit::<T>);
    let gaussians = gaussians_from_points(&points, grey, cfg.sh_degree)?;

    let bounds = match &cfg.bounding_box {
        Some(b) => {
            if (0..3).any(|k| !(b.min[k] < b.max[k])) {
                return Err(Error::Config("bounding_box min must be below max".into()));
            }
            Aabb::new(b.min.map(lit::<T>), b.max.map(lit::<T>))
        }
        None => Aabb::from_points(&points.positions)
            .expect("non-empty")
            .padded(lit(0.05), lit(1e-3)),
    };

    let load_view = |idx: usize| -> Result<View<T>> {
        let spec = cfg.views.get(idx).ok_or_else(|| {
            Error::Config(format!(
                "split references view {idx} but only {} views are listed",
                cfg.views.len()
            ))
        })?;
        let camera = spec.camera::<T>()?;
        let image = ImageBuffer::load_png(resolve(&spec.image))?;
        View::new(camera, image)
    };
    let train_views = cfg
        .split
        .train
        .iter()
        .map(|&i| load_view(i))
        .collect::<Result<Vec<_>>>()?;
    let test_views = cfg
        .split
        .test
        .iter()
        .map(|&i| load_view(i))
        .collect::<Result<Vec<_>>>()?;

    let name = cfg.name.clone().unwrap_or_else(|| {
        config_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into())
    });
    Scene::new(gaussians, train_views, test_views, SceneMeta { name, bounds })
}
