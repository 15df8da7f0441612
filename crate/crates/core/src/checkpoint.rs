//! Versioned binary checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian `u32` version, a `u64` header
//! length, the JSON header, then every tensor section listed in the header
//! as little-endian `f64` values in header order. `f32` values widen to
//! `f64` exactly, so a round trip is bit-exact for either scalar type.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamGroup;
use crate::pipeline::UncertaintyModel;
use crate::scalar::{lit, Real};
use crate::scene::{Aabb, Camera, GaussianSet, ImageBuffer, Scene, SceneMeta, View};
use crate::trainer::{FreezeState, MetricRow, Moments, TrainConfig, Trainer, TrainingState};

pub const MAGIC: &[u8; 8] = b"UGSPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    world_to_camera: [[f64; 4]; 4],
    near_clip: f64,
}

impl CameraRecord {
    fn from_camera<T: Real>(c: &Camera<T>) -> Self {
        Self {
            fx: c.fx.to_f64_lossy(),
            fy: c.fy.to_f64_lossy(),
            cx: c.cx.to_f64_lossy(),
            cy: c.cy.to_f64_lossy(),
            width: c.width,
            height: c.height,
            world_to_camera: c.world_to_camera.map(|r| r.map(|v| v.to_f64_lossy())),
            near_clip: c.near_clip.to_f64_lossy(),
        }
    }

    fn to_camera<T: Real>(&self) -> Result<Camera<T>> {
        Camera::new(
            lit(self.fx),
            lit(self.fy),
            lit(self.cx),
            lit(self.cy),
            self.width,
            self.height,
            self.world_to_camera.map(|r| r.map(lit)),
            lit(self.near_clip),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    scalar: String,
    config: TrainConfig,
    config_hash: u64,
    scene_name: String,
    bounds: [[f64; 3]; 2],
    sh_degree: usize,
    n_gaussians: usize,
    train_cameras: Vec<CameraRecord>,
    test_cameras: Vec<CameraRecord>,
    net_widths: Vec<usize>,
    frozen: bool,
    iteration: u64,
    freeze: FreezeState,
    pruned_total: usize,
    /// Adam step counters keyed like the moment sections.
    adam_steps: Vec<(String, u64)>,
    log: Vec<MetricRow>,
    sections: Vec<Section>,
}

struct Writer {
    sections: Vec<Section>,
    data: Vec<u8>,
}

impl Writer {
    fn put<T: Real>(&mut self, name: impl Into<String>, values: &[T]) {
        self.sections.push(Section {
            name: name.into(),
            len: values.len(),
        });
        self.data.reserve(8 * values.len());
        for v in values {
            self.data.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
}

fn moment_groups<T>(m: &Moments<T>) -> Vec<(&'static str, &AdamGroup<T>)> {
    let mut v = vec![
        ("positions", &m.positions),
        ("rotations", &m.rotations),
        ("log_scales", &m.log_scales),
        ("opacity_logits", &m.opacity_logits),
        ("colours", &m.colours),
        ("net", &m.net),
    ];
    for (name, g) in ["table.position", "table.scale", "table.rotation", "table.view"]
        .into_iter()
        .zip(&m.tables)
    {
        v.push((name, g));
    }
    v
}

fn moment_groups_mut<T>(m: &mut Moments<T>) -> Vec<(&'static str, &mut AdamGroup<T>)> {
    let [t0, t1, t2, t3] = &mut m.tables;
    vec![
        ("positions", &mut m.positions),
        ("rotations", &mut m.rotations),
        ("log_scales", &mut m.log_scales),
        ("opacity_logits", &mut m.opacity_logits),
        ("colours", &mut m.colours),
        ("net", &mut m.net),
        ("table.position", t0),
        ("table.scale", t1),
        ("table.rotation", t2),
        ("table.view", t3),
    ]
}

const TABLE_NAMES: [&str; 4] = ["position", "scale", "rotation", "view"];

/// Serialises the whole training run.
pub fn to_bytes<T: Real>(t: &Trainer<T>) -> Result<Vec<u8>> {
    let g = &t.scene.gaussians;
    let mut w = Writer {
        sections: Vec::new(),
        data: Vec::new(),
    };
    w.put("gaussians.positions", g.positions.as_flattened());
    w.put("gaussians.rotations", g.rotations.as_flattened());
    w.put("gaussians.log_scales", g.log_scales.as_flattened());
    w.put("gaussians.opacity_logits", &g.opacity_logits);
    w.put("gaussians.colours", &g.colours);
    for (k, v) in t.scene.train_views.iter().enumerate() {
        w.put(format!("image.train.{k}"), v.image.pixels());
    }
    for (k, v) in t.scene.test_views.iter().enumerate() {
        w.put(format!("image.test.{k}"), v.image.pixels());
    }
    for (name, table) in TABLE_NAMES.iter().zip(t.model.encoder.tables()) {
        if let Some(table) = table {
            w.put(format!("grid.{name}"), table);
        }
    }
    w.put("net.params", &t.model.net.params);
    let mut adam_steps = Vec::new();
    for (name, group) in moment_groups(&t.state.moments) {
        w.put(format!("adam.{name}.m"), &group.m);
        w.put(format!("adam.{name}.v"), &group.v);
        adam_steps.push((name.to_string(), group.step));
    }
    let b = t.scene.meta.bounds;
    let header = Header {
        scalar: std::any::type_name::<T>().to_string(),
        config: t.config.clone(),
        config_hash: t.config.hash(),
        scene_name: t.scene.meta.name.clone(),
        bounds: [b.min.map(|v| v.to_f64_lossy()), b.max.map(|v| v.to_f64_lossy())],
        sh_degree: g.sh_degree(),
        n_gaussians: g.len(),
        train_cameras: t
            .scene
            .train_views
            .iter()
            .map(|v| CameraRecord::from_camera(&v.camera))
            .collect(),
        test_cameras: t
            .scene
            .test_views
            .iter()
            .map(|v| CameraRecord::from_camera(&v.camera))
            .collect(),
        net_widths: t.model.net.widths().to_vec(),
        frozen: t.model.is_frozen(),
        iteration: t.state.iteration,
        freeze: t.state.freeze.clone(),
        pruned_total: t.state.pruned_total,
        adam_steps,
        log: t.state.log.clone(),
        sections: w.sections,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + w.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.data);
    Ok(out)
}

struct Reader<'a> {
    sections: std::vec::IntoIter<Section>,
    data: &'a [u8],
}

impl Reader<'_> {
    fn take<T: Real>(&mut self, name: &str) -> Result<Vec<T>> {
        let s = self
            .sections
            .next()
            .ok_or_else(|| Error::Format(format!("missing section {name}")))?;
        if s.name != name {
            return Err(Error::Format(format!("expected section {name}, found {}", s.name)));
        }
        let bytes = s.len * 8;
        if self.data.len() < bytes {
            return Err(Error::Format(format!("truncated in section {name}")));
        }
        let (head, rest) = self.data.split_at(bytes);
        self.data = rest;
        Ok(head
            .chunks_exact(8)
            .map(|c| lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn take_into<T: Real>(&mut self, name: &str, dst: &mut [T]) -> Result<()> {
        let v = self.take(name)?;
        if v.len() != dst.len() {
            return Err(Error::Format(format!(
                "section {name} holds {} values, expected {}",
                v.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&v);
        Ok(())
    }
}

fn chunks<const N: usize, T: Copy>(v: Vec<T>, name: &str) -> Result<Vec<[T; N]>> {
    if !v.len().is_multiple_of(N) {
        return Err(Error::Format(format!("section {name} is not a multiple of {N}")));
    }
    Ok(v.chunks_exact(N).map(|c| c.try_into().unwrap()).collect())
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Trainer<T>> {
    if bytes.len() < 20 {
        return Err(Error::Format(format!(
            "truncated: {} bytes is shorter than the preamble",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic bytes; not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(Error::Format("truncated inside the header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.config.hash() != header.config_hash {
        return Err(Error::Format("config hash does not match the stored config".into()));
    }
    let expected: usize = header.sections.iter().map(|s| 8 * s.len).sum();
    let data = &body[hlen..];
    if data.len() != expected {
        return Err(Error::Format(format!(
            "truncated or padded: {} data bytes, header lists {expected}",
            data.len()
        )));
    }
    let mut r = Reader {
        sections: header.sections.clone().into_iter(),
        data,
    };

    let mut g = GaussianSet::<T>::new(header.sh_degree)?;
    g.positions = chunks(r.take("gaussians.positions")?, "positions")?;
    g.rotations = chunks(r.take("gaussians.rotations")?, "rotations")?;
    g.log_scales = chunks(r.take("gaussians.log_scales")?, "log_scales")?;
    g.opacity_logits = r.take("gaussians.opacity_logits")?;
    g.colours = r.take("gaussians.colours")?;
    g.validate()?;
    if g.len() != header.n_gaussians {
        return Err(Error::Format(format!(
            "header lists {} gaussians, sections hold {}",
            header.n_gaussians,
            g.len()
        )));
    }
    let mut views = |split: &str, cams: &[CameraRecord]| -> Result<Vec<View<T>>> {
        cams.iter()
            .enumerate()
            .map(|(k, c)| {
                let cam = c.to_camera::<T>()?;
                let px = r.take(&format!("image.{split}.{k}"))?;
                View::new(cam, ImageBuffer::from_pixels(c.width, c.height, px)?)
            })
            .collect()
    };
    let train_views = views("train", &header.train_cameras)?;
    let test_views = views("test", &header.test_cameras)?;
    let bounds = Aabb::new(header.bounds[0].map(lit), header.bounds[1].map(lit));
    // positions may have drifted outside the box during training, so skip
    // the construction-time containment check
    let scene = Scene {
        gaussians: g,
        train_views,
        test_views,
        meta: SceneMeta {
            name: header.scene_name.clone(),
            bounds,
        },
    };

    let cfg = header.config.clone();
    let mut model = UncertaintyModel::<T>::new(cfg.encoding, bounds, &cfg.hidden, cfg.seed)?;
    if model.net.widths() != header.net_widths.as_slice() {
        return Err(Error::Format(format!(
            "network widths {:?} do not match the config ({:?})",
            header.net_widths,
            model.net.widths()
        )));
    }
    for (name, table) in TABLE_NAMES.iter().zip(model.encoder.tables_mut()) {
        if let Some(table) = table {
            r.take_into(&format!("grid.{name}"), table)?;
        }
    }
    r.take_into("net.params", &mut model.net.params)?;
    model.net.set_frozen(header.frozen);

    let mut moments = Moments::new(&scene.gaussians, &model);
    for ((name, group), (step_name, step)) in moment_groups_mut(&mut moments).into_iter().zip(&header.adam_steps) {
        if name != step_name {
            return Err(Error::Format(format!("moment group {step_name} out of order")));
        }
        r.take_into(&format!("adam.{name}.m"), &mut group.m)?;
        r.take_into(&format!("adam.{name}.v"), &mut group.v)?;
        group.step = *step;
    }
    if let Some(s) = r.sections.next() {
        return Err(Error::Format(format!("unexpected section {}", s.name)));
    }
    Ok(Trainer {
        config: cfg,
        scene,
        model,
        state: TrainingState {
            iteration: header.iteration,
            moments,
            freeze: header.freeze,
            log: header.log,
            pruned_total: header.pruned_total,
        },
    })
}

/// Writes atomically: a temporary file in the same directory, then a rename.
pub fn save<T: Real>(t: &Trainer<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(t)?;
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Trainer<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    from_bytes(&bytes)
}
