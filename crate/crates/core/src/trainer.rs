//! Optimisation loop: opacity chain, render, loss, backward, Adam, plus the
//! PSNR-plateau freeze and opacity pruning.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashgrid::EncodingConfig;
use crate::loss::colour_loss;
use crate::metrics::{psnr, ssim, MetricReport, ViewMetric};
use crate::optim::AdamGroup;
use crate::pipeline::{opacity_backward, opacity_pass, QSource, UncertaintyModel};
use crate::raster::{render, render_backward, RasterConfig, RenderOutput, Support};
use crate::rng::{CounterRng, Domain};
use crate::scalar::{lit, Real};
use crate::scene::{Camera, GaussianSet, Scene, Split};
use crate::softdrop::{Mechanism, SoftDropConfig};
use crate::uncertainty::DEFAULT_HIDDEN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the largest scene extent.
    pub positions: f64,
    /// Position rate at the last iteration; decay is exponential in between.
    pub positions_final: f64,
    pub rotations: f64,
    pub log_scales: f64,
    pub opacity_logits: f64,
    pub colours_dc: f64,
    pub colours_rest: f64,
    pub mlp: f64,
    pub tables: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            positions: 1.6e-4,
            positions_final: 1.6e-6,
            rotations: 1e-3,
            log_scales: 5e-3,
            opacity_logits: 5e-2,
            colours_dc: 2.5e-3,
            colours_rest: 1.25e-4,
            mlp: 1e-3,
            tables: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            positions: 0.0,
            positions_final: 0.0,
            rotations: 0.0,
            log_scales: 0.0,
            opacity_logits: 0.0,
            colours_dc: 0.0,
            colours_rest: 0.0,
            mlp: 0.0,
            tables: 0.0,
        }
    }

    fn all(&self) -> [f64; 9] {
        [
            self.positions,
            self.positions_final,
            self.rotations,
            self.log_scales,
            self.opacity_logits,
            self.colours_dc,
            self.colours_rest,
            self.mlp,
            self.tables,
        ]
    }

    /// Position rate at `iteration` of `total`.
    pub fn position_at(&self, iteration: u64, total: u64) -> f64 {
        if self.positions == 0.0 || self.positions_final == 0.0 || total == 0 {
            return self.positions;
        }
        let t = (iteration as f64 / total as f64).clamp(0.0, 1.0);
        (self.positions.ln() * (1.0 - t) + self.positions_final.ln() * t).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    /// D-SSIM weight.
    pub lambda: f64,
    /// Freeze when the train-PSNR gain between checks drops below this (dB).
    pub freeze_epsilon: f64,
    pub freeze_check_interval: u64,
    pub lr: LearningRates,
    pub prune_opacity_threshold: f64,
    pub prune_interval: u64,
    /// Pruning stops after this fraction of `iterations`.
    pub prune_stop_fraction: f64,
    pub seed: u64,
    pub softdrop: SoftDropConfig,
    pub mechanism: Mechanism,
    pub encoding: EncodingConfig,
    pub hidden: Vec<usize>,
    pub background: [f64; 3],
    /// Extra train/test PSNR evaluations; 0 logs PSNR only at freeze checks.
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            lambda: 0.2,
            freeze_epsilon: 0.2,
            freeze_check_interval: 500,
            lr: LearningRates::default(),
            prune_opacity_threshold: 0.005,
            prune_interval: 500,
            prune_stop_fraction: 0.8,
            seed: 0,
            softdrop: SoftDropConfig::default(),
            mechanism: Mechanism::default(),
            encoding: EncodingConfig::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            background: [0.0; 3],
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        if !(self.freeze_epsilon > 0.0) {
            return Err(Error::Config("freeze_epsilon must be positive".into()));
        }
        if self.lr.all().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(self.prune_opacity_threshold > 0.0 && self.prune_opacity_threshold <= 1.0) {
            return Err(Error::Config("prune threshold must be in (0, 1]".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background must be in [0, 1]".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.softdrop.validate()
    }

    /// FNV-1a over the canonical JSON form, used to tag checkpoints.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serialises");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub train_psnr: Option<f64>,
    pub test_psnr: Option<f64>,
    pub n_gaussians: usize,
    pub frozen: bool,
}

pub const METRIC_HEADER: &str = "iteration,loss,l1,dssim,train_psnr,test_psnr,n_gaussians,frozen";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{:?},{:?},{:?},{},{},{},{}",
            self.iteration,
            self.loss,
            self.l1,
            self.dssim,
            opt(self.train_psnr),
            opt(self.test_psnr),
            self.n_gaussians,
            self.frozen as u8
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(METRIC_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Plateau tracker for the uncertainty-network freeze.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeState {
    /// Best train PSNR seen at a check; `None` before the first check.
    pub best: Option<f64>,
    pub frozen: bool,
    /// Iteration at which the freeze happened.
    pub frozen_at: Option<u64>,
    pub checks: u32,
}

/// Applies one plateau check. The first check only records a baseline; each
/// later one compares against the best PSNR so far and freezes once the gain
/// is below `epsilon`. Freezing is one-way. Returns the gain, if any.
pub fn check_freeze(state: &mut FreezeState, current: f64, epsilon: f64, iteration: u64) -> Option<f64> {
    state.checks += 1;
    let delta = state.best.map(|b| current - b);
    state.best = Some(state.best.map_or(current, |b| b.max(current)));
    if let Some(d) = delta {
        if !state.frozen && d < epsilon {
            state.frozen = true;
            state.frozen_at = Some(iteration);
        }
    }
    delta
}

/// Adam moments for every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub positions: AdamGroup<T>,
    pub rotations: AdamGroup<T>,
    pub log_scales: AdamGroup<T>,
    pub opacity_logits: AdamGroup<T>,
    pub colours: AdamGroup<T>,
    pub net: AdamGroup<T>,
    /// Position, scale, rotation, view grid tables.
    pub tables: [AdamGroup<T>; 4],
}

impl<T: Real> Moments<T> {
    pub fn new(gaussians: &GaussianSet<T>, model: &UncertaintyModel<T>) -> Self {
        let n = gaussians.len();
        Self {
            positions: AdamGroup::new(3 * n),
            rotations: AdamGroup::new(4 * n),
            log_scales: AdamGroup::new(3 * n),
            opacity_logits: AdamGroup::new(n),
            colours: AdamGroup::new(gaussians.colours.len()),
            net: AdamGroup::new(model.net.params.len()),
            tables: model.encoder.tables().map(|t| AdamGroup::new(t.map_or(0, |v| v.len()))),
        }
    }

    fn retain(&mut self, keep: &[bool], colour_stride: usize) {
        self.positions.retain_rows(keep, 3);
        self.rotations.retain_rows(keep, 4);
        self.log_scales.retain_rows(keep, 3);
        self.opacity_logits.retain_rows(keep, 1);
        self.colours.retain_rows(keep, colour_stride);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState<T> {
    /// Completed steps.
    pub iteration: u64,
    pub moments: Moments<T>,
    pub freeze: FreezeState,
    pub log: Vec<MetricRow>,
    pub pruned_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneReport {
    pub removed: Vec<usize>,
    pub remaining: usize,
}

/// Removes Gaussians with opacity below `threshold` along with their moment rows.
pub fn prune<T: Real>(gaussians: &mut GaussianSet<T>, moments: &mut Moments<T>, threshold: f64) -> Result<PruneReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "prune threshold {threshold} not in (0, 1]"
        )));
    }
    let th = lit::<T>(threshold);
    let keep: Vec<bool> = (0..gaussians.len()).map(|i| !(gaussians.opacity(i) < th)).collect();
    let removed: Vec<usize> = keep.iter().enumerate().filter(|(_, k)| !**k).map(|(i, _)| i).collect();
    if removed.len() == gaussians.len() {
        return Err(Error::EmptyScene(format!(
            "pruning at threshold {threshold} would remove all {} gaussians",
            gaussians.len()
        )));
    }
    if !removed.is_empty() {
        let stride = gaussians.colour_stride();
        gaussians.retain_mask(&keep);
        moments.retain(&keep, stride);
    }
    Ok(PruneReport {
        removed,
        remaining: gaussians.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub view: usize,
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub visible: usize,
}

/// Scene, uncertainty model and optimiser state for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub scene: Scene<T>,
    pub model: UncertaintyModel<T>,
    pub state: TrainingState<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(scene: Scene<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = UncertaintyModel::new(config.encoding, scene.meta.bounds, &config.hidden, config.seed)?;
        let moments = Moments::new(&scene.gaussians, &model);
        Ok(Self {
            config,
            scene,
            model,
            state: TrainingState {
                iteration: 0,
                moments,
                freeze: FreezeState::default(),
                log: Vec::new(),
                pruned_total: 0,
            },
        })
    }

    pub fn raster_config(&self) -> RasterConfig<T> {
        RasterConfig {
            background: self.config.background.map(lit),
            ..RasterConfig::default()
        }
    }

    /// Global view tag of the `i`-th view of `split`.
    pub fn view_index(&self, split: Split, i: usize) -> usize {
        match split {
            Split::Train => i,
            Split::Test => self.scene.train_views.len() + i,
        }
    }

    /// Renders `camera` with the configured evaluation mode.
    pub fn render_eval(&self, camera: &Camera<T>, view: usize) -> Result<RenderOutput<T>> {
        let q = QSource::for_eval(
            self.config.softdrop.eval_mode,
            self.config.seed ^ EVAL_SEED_MIX,
            self.state.iteration,
        );
        let pass = opacity_pass(
            &self.model,
            &self.scene.gaussians,
            camera,
            view,
            &self.config.softdrop,
            self.config.mechanism,
            q,
            Support::Bounded,
        )?;
        let mut out = render(&self.scene.gaussians, camera, &pass.alpha_eff, &self.raster_config())?;
        out.discard_state();
        Ok(out)
    }

    /// Mean PSNR over a split, `None` when the split is empty.
    pub fn mean_psnr(&self, split: Split) -> Result<Option<f64>> {
        let views = self.scene.views(split);
        if views.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for (i, v) in views.iter().enumerate() {
            let out = self.render_eval(&v.camera, self.view_index(split, i))?;
            total += psnr(&out.image, &v.image)?;
        }
        Ok(Some(total / views.len() as f64))
    }

    pub fn evaluate(&self, split: Split) -> Result<MetricReport> {
        let name = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let mut rows = Vec::new();
        for (i, v) in self.scene.views(split).iter().enumerate() {
            let out = self.render_eval(&v.camera, self.view_index(split, i))?;
            rows.push(ViewMetric {
                view: i,
                psnr: psnr(&out.image, &v.image)?,
                ssim: ssim(&out.image, &v.image)?,
            });
        }
        MetricReport::from_views(name, rows)
    }

    /// One optimisation step on a randomly chosen train view.
    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.state.iteration;
        let cfg = &self.config;
        let n_train = self.scene.train_views.len();
        let v = CounterRng::new(cfg.seed, Domain::ViewChoice).index_below(it, 0, n_train);
        let view = &self.scene.train_views[v];
        let g = &self.scene.gaussians;

        let pass = opacity_pass(
            &self.model,
            g,
            &view.camera,
            v,
            &cfg.softdrop,
            cfg.mechanism,
            QSource::Random {
                seed: cfg.seed,
                iteration: it,
            },
            Support::Bounded,
        )?;
        let out = render(g, &view.camera, &pass.alpha_eff, &self.raster_config())?;
        let lo = colour_loss(&out.image, &view.image, lit(cfg.lambda))?;
        if !lo.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                indices: g.non_finite_indices(),
            });
        }
        let rg = render_backward(g, &view.camera, &out, &lo.grad)?;
        let (d_logit, model_grad) = opacity_backward(&self.model, &pass, &cfg.softdrop, &rg.opacities)?;

        let lr = cfg.lr.clone();
        let extent = {
            let e = self.scene.meta.bounds.extent();
            e[0].max(e[1]).max(e[2]).to_f64_lossy()
        };
        let pos_lr = lr.position_at(it, cfg.iterations) * extent;
        let m = &mut self.state.moments;
        let g = &mut self.scene.gaussians;
        m.positions
            .update(g.positions.as_flattened_mut(), rg.positions.as_flattened(), pos_lr);
        let rotated = m.rotations.update(
            g.rotations.as_flattened_mut(),
            rg.rotations.as_flattened(),
            lr.rotations,
        );
        m.log_scales.update(
            g.log_scales.as_flattened_mut(),
            rg.log_scales.as_flattened(),
            lr.log_scales,
        );
        m.opacity_logits
            .update(&mut g.opacity_logits, &d_logit, lr.opacity_logits);
        update_colours(&mut m.colours, g, &rg.colours, lr.colours_dc, lr.colours_rest);
        if rotated {
            g.renormalize_rotations();
        }
        for i in 0..g.len() {
            for c in &mut g.colour_mut(i)[..3] {
                *c = c.max(T::zero()).min(T::one());
            }
        }
        if let Some(mg) = model_grad {
            if !self.model.is_frozen() {
                m.net.update(&mut self.model.net.params, &mg.net, lr.mlp);
                for ((group, table), grad) in m.tables.iter_mut().zip(self.model.encoder.tables_mut()).zip(&mg.tables) {
                    if let Some(table) = table {
                        group.update(table, grad, lr.tables);
                    }
                }
            }
        }

        self.state.iteration += 1;
        let report = StepReport {
            iteration: self.state.iteration,
            view: v,
            loss: lo.loss.to_f64_lossy(),
            l1: lo.l1.to_f64_lossy(),
            dssim: lo.dssim.to_f64_lossy(),
            visible: pass.visible.len(),
        };
        self.after_step(&report)?;
        Ok(report)
    }

    fn after_step(&mut self, report: &StepReport) -> Result<()> {
        let t = self.state.iteration;
        let cfg = self.config.clone();
        let mut row = MetricRow {
            iteration: t,
            loss: report.loss,
            l1: report.l1,
            dssim: report.dssim,
            train_psnr: None,
            test_psnr: None,
            n_gaussians: 0,
            frozen: self.model.is_frozen(),
        };
        let freeze_due = cfg.freeze_check_interval > 0 && t.is_multiple_of(cfg.freeze_check_interval);
        let eval_due = cfg.eval_interval > 0 && t.is_multiple_of(cfg.eval_interval);
        if freeze_due || eval_due {
            row.train_psnr = self.mean_psnr(Split::Train)?;
            row.test_psnr = self.mean_psnr(Split::Test)?;
        }
        if freeze_due && cfg.mechanism.uncertainty {
            let current = row.train_psnr.expect("train split is never empty");
            let delta = check_freeze(&mut self.state.freeze, current, cfg.freeze_epsilon, t);
            if self.state.freeze.frozen && !self.model.is_frozen() {
                log::info!(
                    "iteration {t}: freezing the uncertainty network (gain {:.3} dB < {})",
                    delta.unwrap_or(f64::NAN),
                    cfg.freeze_epsilon
                );
                self.model.freeze();
            }
            row.frozen = self.model.is_frozen();
        }
        let prune_due = cfg.prune_interval > 0
            && t.is_multiple_of(cfg.prune_interval)
            && (t as f64) < cfg.prune_stop_fraction * cfg.iterations as f64;
        if prune_due {
            match prune(
                &mut self.scene.gaussians,
                &mut self.state.moments,
                cfg.prune_opacity_threshold,
            ) {
                Ok(rep) => {
                    if !rep.removed.is_empty() {
                        log::debug!("iteration {t}: pruned {} gaussians", rep.removed.len());
                    }
                    self.state.pruned_total += rep.removed.len();
                }
                Err(Error::EmptyScene(msg)) => log::warn!("iteration {t}: skipped pruning: {msg}"),
                Err(e) => return Err(e),
            }
        }
        row.n_gaussians = self.scene.gaussians.len();
        self.state.log.push(row);
        Ok(())
    }

    /// Steps until `target` iterations are complete, calling `on_step` after each.
    pub fn run_until(&mut self, target: u64, mut on_step: impl FnMut(&Self, &StepReport)) -> Result<()> {
        while self.state.iteration < target {
            let rep = self.step()?;
            on_step(self, &rep);
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        let n = self.config.iterations;
        self.run_until(n, |_, _| {})
    }

    /// Uncertainty of every visible Gaussian in train view `v` (eval has no dropout here).
    pub fn uncertainties(&self, camera: &Camera<T>, view: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let visible = crate::pipeline::visible_indices(&self.scene.gaussians, camera, Support::Bounded);
        let batch = self.model.encode(&self.scene.gaussians, camera, &visible)?;
        let u = self.model.predict(&batch, view)?;
        Ok((visible, u.iter().map(|v| v.to_f64_lossy()).collect()))
    }
}

/// Keeps stochastic evaluation draws separate from the training draws.
const EVAL_SEED_MIX: u64 = 0x5eed_e7a1;

fn update_colours<T: Real>(group: &mut AdamGroup<T>, g: &mut GaussianSet<T>, grad: &[T], lr_dc: f64, lr_rest: f64) {
    let stride = g.colour_stride();
    if stride == 3 || lr_dc == lr_rest {
        group.update(&mut g.colours, grad, lr_dc);
        return;
    }
    // per-entry rates: scale the gradient step by splitting into two passes
    // would double-count the moments, so scale the update instead
    let before = g.colours.clone();
    if !group.update(&mut g.colours, grad, lr_dc.max(lr_rest)) {
        return;
    }
    let top = lr_dc.max(lr_rest);
    for (k, (c, b)) in g.colours.iter_mut().zip(&before).enumerate() {
        let lr = if k % stride < 3 { lr_dc } else { lr_rest };
        if lr != top {
            *c = *b + (*c - *b) * lit::<T>(lr / top);
        }
    }
}
