use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use ugsplat::checkpoint;
use ugsplat::metrics::uncertainty_stats;
use ugsplat::scene::{
    load_scene, write_ply, BoxSpec, Camera, PlyFormat, Scene, SceneConfigFile, Split, SplitSpec, ViewSpec,
};
use ugsplat::softdrop::omega_curve;
use ugsplat::synthetic::{generate, SyntheticSpec};
use ugsplat::trainer::{metrics_csv, TrainConfig, Trainer};

use crate::manifest::RunManifest;
use crate::{Cli, Command, EvalArgs, InitArgs, RenderArgs, StatsArgs, SynthArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Init(a) => init(a, &cli.out),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::UncertaintyStats(a) => stats(a),
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| ugsplat::Error::Config(format!("{}: {e}", path.display())).into())
}

fn load(path: &Path) -> Result<Trainer<f64>> {
    checkpoint::load::<f64>(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synthetic_spec(path: Option<&Path>, fixture: bool) -> Result<SyntheticSpec> {
    Ok(match (path, fixture) {
        (Some(p), _) => read_toml(p)?,
        (None, true) => SyntheticSpec::fixture(),
        (None, false) => SyntheticSpec::default(),
    })
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = synthetic_spec(a.spec.as_deref(), a.fixture)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let syn = generate::<f64>(&spec)?;
    let scene = &syn.scene;
    create_dir(&a.dir)?;
    write_ply(&scene.gaussians, a.dir.join("points.ply"), PlyFormat::Ascii)?;
    write_ply(&syn.truth, a.dir.join("truth.ply"), PlyFormat::Ascii)?;
    let mut views = Vec::new();
    for (k, v) in scene.train_views.iter().chain(&scene.test_views).enumerate() {
        let name = format!("view_{k:03}.png");
        v.image.save_png(a.dir.join(&name))?;
        let c = &v.camera;
        views.push(ViewSpec {
            image: name.into(),
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_camera: c.world_to_camera,
            near_clip: c.near_clip,
        });
    }
    let n_train = scene.train_views.len();
    let file = SceneConfigFile {
        name: Some(scene.meta.name.clone()),
        points_path: "points.ply".into(),
        sh_degree: scene.gaussians.sh_degree(),
        bounding_box: Some(BoxSpec {
            min: scene.meta.bounds.min,
            max: scene.meta.bounds.max,
        }),
        colour_default: None,
        views,
        split: SplitSpec {
            train: (0..n_train).collect(),
            test: (n_train..n_train + scene.test_views.len()).collect(),
        },
    };
    let path = a.dir.join("scene.toml");
    std::fs::write(&path, toml::to_string(&file)?).with_context(|| format!("writing {}", path.display()))?;
    std::fs::write(a.dir.join("synthetic.toml"), toml::to_string(&spec)?)?;
    println!("{}", path.display());
    Ok(())
}

fn init(a: &InitArgs, out_root: &Path) -> Result<()> {
    let (scene, input): (Scene<f64>, Option<&Path>) = match (&a.source.scene, &a.source.synthetic) {
        (Some(p), _) => (load_scene(p)?, Some(p)),
        (None, Some(p)) => (generate(&synthetic_spec(Some(p), false)?)?.scene, Some(p)),
        (None, None) => (generate(&SyntheticSpec::fixture())?.scene, None),
    };
    let mut config: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    let dir = a.run_dir.clone().unwrap_or_else(|| out_root.join(&scene.meta.name));
    let trainer = Trainer::new(scene, config)?;
    create_dir(&dir)?;
    let mut m = RunManifest::new("init", &trainer.config, &trainer.scene.meta.name, 0)
        .output("checkpoint", "checkpoint-0.ckpt");
    if let Some(p) = input {
        m = m.input("scene", p);
    }
    if let Some(p) = &a.config {
        m = m.input("config", p);
    }
    m.write(&dir, "manifest.json")?;
    let path = dir.join("checkpoint-0.ckpt");
    checkpoint::save(&trainer, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut t = load(&a.checkpoint)?;
    if let Some(p) = &a.config {
        let cfg: TrainConfig = read_toml(p)?;
        if cfg.encoding != t.config.encoding || cfg.hidden != t.config.hidden {
            return Err(ugsplat::Error::Config(
                "the encoding and hidden widths are fixed once a checkpoint exists".into(),
            )
            .into());
        }
        t.config = cfg;
    }
    if let Some(n) = a.iterations {
        t.config.iterations = n;
    }
    if let Some(s) = a.seed {
        t.config.seed = s;
    }
    let mech = &mut t.config.mechanism;
    mech.uncertainty &= !a.ablation.no_uncertainty;
    mech.dropout &= !a.ablation.no_dropout;
    mech.modulation &= !a.ablation.no_modulation;
    t.config.validate()?;

    let start = t.state.iteration;
    let target = a.until.map_or(t.config.iterations, |u| u.min(t.config.iterations));
    if target < start {
        bail!("checkpoint is already at iteration {start}, past the requested {target}");
    }
    let dir = a.run_dir.clone().unwrap_or_else(|| parent_dir(&a.checkpoint));
    create_dir(&dir)?;
    RunManifest::new("train", &t.config, &t.scene.meta.name, start)
        .input("checkpoint", &a.checkpoint)
        .output("checkpoint", "checkpoint-<iteration>.ckpt")
        .output("metrics", "metrics.csv")
        .write(&dir, &format!("train-from-{start}.json"))?;

    let save = |t: &Trainer<f64>| -> Result<PathBuf> {
        let path = dir.join(format!("checkpoint-{}.ckpt", t.state.iteration));
        checkpoint::save(t, &path)?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, metrics_csv(&t.state.log)).with_context(|| format!("writing {}", csv.display()))?;
        Ok(path)
    };
    let clock = Instant::now();
    while t.state.iteration < target {
        let rep = match t.step() {
            Ok(r) => r,
            Err(e) => {
                let csv = dir.join("metrics.csv");
                let _ = std::fs::write(&csv, metrics_csv(&t.state.log));
                return Err(anyhow::Error::new(e).context("training aborted"));
            }
        };
        if a.log_every > 0 && rep.iteration % a.log_every == 0 {
            eprintln!(
                "iter {:6}  loss {:.5}  gaussians {}  frozen {}  {:.1?}",
                rep.iteration,
                rep.loss,
                t.scene.gaussians.len(),
                t.model.is_frozen(),
                clock.elapsed()
            );
        }
        if a.checkpoint_every > 0 && rep.iteration % a.checkpoint_every == 0 && rep.iteration < target {
            save(&t)?;
        }
    }
    let path = save(&t)?;
    println!("{}", path.display());
    Ok(())
}

/// Camera file for `render --camera`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    world_to_camera: [[f64; 4]; 4],
    #[serde(default = "default_near")]
    near_clip: f64,
}

fn default_near() -> f64 {
    0.01
}

fn stored_camera(t: &Trainer<f64>, split: Split, view: usize) -> Result<(Camera<f64>, usize)> {
    let views = t.scene.views(split);
    let Some(v) = views.get(view) else {
        return Err(ugsplat::Error::InvalidInput(format!(
            "view {view} does not exist; the {split:?} split has {} views",
            views.len()
        ))
        .into());
    };
    Ok((v.camera.clone(), t.view_index(split, view)))
}

fn render(a: &RenderArgs) -> Result<()> {
    let mut t = load(&a.checkpoint)?;
    t.config.softdrop.eval_mode = a.eval_mode.into();
    let split: Split = a.split.into();
    let (camera, tag, label) = match &a.camera {
        Some(p) => {
            let c: CameraFile = read_toml(p)?;
            let cam = Camera::new(
                c.fx,
                c.fy,
                c.cx,
                c.cy,
                c.width,
                c.height,
                c.world_to_camera,
                c.near_clip,
            )
            .with_context(|| format!("camera {}", p.display()))?;
            (cam, 0, "camera".to_string())
        }
        None => {
            let v = a.view.unwrap_or(0);
            let (cam, tag) = stored_camera(&t, split, v)?;
            (cam, tag, format!("{split:?}-{v}").to_lowercase())
        }
    };
    let out = t.render_eval(&camera, tag)?;
    let png = a
        .output
        .clone()
        .unwrap_or_else(|| parent_dir(&a.checkpoint).join(format!("render-{label}.png")));
    out.image.save_png(&png)?;
    if let Some(raw) = &a.raw {
        out.write_raw(raw)?;
    }
    println!("{}", png.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let t = load(&a.checkpoint)?;
    let report = t.evaluate(a.split.into())?;
    let csv = report.to_csv();
    match &a.output {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<()> {
    let t = load(&a.checkpoint)?;
    let split: Split = a.split.into();
    let (camera, tag) = stored_camera(&t, split, a.view)?;
    let hist = uncertainty_stats(&t.model, &t.scene.gaussians, &camera, tag, t.state.iteration)?;
    let dir = a.dir.clone().unwrap_or_else(|| parent_dir(&a.checkpoint));
    create_dir(&dir)?;
    let stem = format!("{split:?}-{}", a.view).to_lowercase();
    std::fs::write(dir.join(format!("histogram-{stem}.csv")), hist.to_csv())?;
    std::fs::write(dir.join(format!("histogram-{stem}.dat")), hist.to_plot())?;

    let n = a.points.max(2);
    let us: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let curve = omega_curve(&us, &t.config.softdrop, a.samples, t.config.seed);
    let mut csv = String::from("u,omega_q_half,omega_q_half_clamped,omega_mean,omega_mean_clamped\n");
    for p in &curve {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            p.u, p.omega_q_half, p.omega_q_half_clamped, p.omega_mean, p.omega_mean_clamped
        );
    }
    std::fs::write(dir.join("omega-curve.csv"), csv)?;
    println!(
        "iteration {} view {stem}: {} gaussians, mean u {:.4}, median u {:.4}, band fraction {:.4}",
        hist.iteration,
        hist.total(),
        hist.mean,
        hist.median,
        hist.band_fraction
    );
    Ok(())
}
