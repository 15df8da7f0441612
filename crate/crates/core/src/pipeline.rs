//! Glue between the Gaussians, the uncertainty model and the rasterizer:
//! encoding, per-view uncertainty, effective opacities and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashgrid::{EncodingConfig, InputEncoder};
use crate::math::{quat_normalize, Quat, Vec3};
use crate::raster::{project, Support};
use crate::rng::{CounterRng, Domain};
use crate::scalar::{lit, sigmoid, Real};
use crate::scene::{view_direction, Aabb, Camera, GaussianSet};
use crate::softdrop::{self, draw_q, EvalMode, Mechanism, SoftDropConfig};
use crate::uncertainty::UncertaintyNet;

/// Hash-grid encoder plus MLP predicting per-Gaussian uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyModel<T: Real> {
    pub encoder: InputEncoder<T>,
    pub net: UncertaintyNet<T>,
}

/// Position, view direction, rotation and scale that fed one batch row.
type RowAttrs<T> = (Vec3<T>, Vec3<T>, Quat<T>, Vec3<T>);

/// Assembled network inputs for a set of Gaussians seen from one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch<T> {
    pub indices: Vec<usize>,
    pub rows: Vec<T>,
    attrs: Vec<RowAttrs<T>>,
}

/// Gradients for the model parameters. Table vectors are empty for absent grids.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad<T> {
    pub net: Vec<T>,
    /// Position, scale, rotation, view order.
    pub tables: [Vec<T>; 4],
}

impl<T: Real> UncertaintyModel<T> {
    /// Tables drawn uniformly in a small range, MLP hidden layers He-uniform
    /// and a zero output layer, all from `seed`.
    pub fn new(encoding: EncodingConfig, bounds: Aabb<T>, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = CounterRng::new(seed, Domain::Init).stream(0, 0);
        let mut encoder = InputEncoder::new(encoding, bounds)?;
        encoder.init_tables(&mut rng);
        let net = UncertaintyNet::with_hidden(encoder.input_dim(), hidden, &mut rng)?;
        Ok(Self { encoder, net })
    }

    pub fn is_frozen(&self) -> bool {
        self.net.is_frozen()
    }

    /// Stops updates of the MLP and the hash tables.
    pub fn freeze(&mut self) {
        self.net.freeze();
    }

    pub fn encode(&self, gaussians: &GaussianSet<T>, camera: &Camera<T>, indices: &[usize]) -> Result<EncodedBatch<T>> {
        let d = self.encoder.input_dim();
        let mut rows = vec![T::zero(); d * indices.len()];
        let mut attrs = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            let pos = gaussians.positions[i];
            let dir = view_direction(camera, pos)?;
            let rot = quat_normalize(gaussians.rotations[i]);
            let scale = gaussians.scale(i);
            self.encoder
                .assemble(pos, dir, rot, scale, &mut rows[r * d..(r + 1) * d])?;
            attrs.push((pos, dir, rot, scale));
        }
        Ok(EncodedBatch {
            indices: indices.to_vec(),
            rows,
            attrs,
        })
    }

    pub fn predict(&self, batch: &EncodedBatch<T>, view: usize) -> Result<Vec<T>> {
        Ok(self.net.predict(&batch.rows, view)?.values)
    }

    /// Gradients for `du = dL/du` per batch row. Gaussian attributes are
    /// treated as constants here; only the model parameters receive gradient.
    pub fn backward(&self, batch: &EncodedBatch<T>, du: &[T]) -> Result<ModelGrad<T>> {
        let ng = self.net.predict_backward(&batch.rows, du)?;
        let sizes = self.encoder.tables().map(|t| t.map_or(0, |v| v.len()));
        let mut tables: [Vec<T>; 4] = sizes.map(|n| vec![T::zero(); n]);
        if !self.is_frozen() && sizes.iter().any(|n| *n > 0) {
            let d = self.encoder.input_dim();
            for (r, (pos, dir, rot, scale)) in batch.attrs.iter().enumerate() {
                let g = &ng.inputs[r * d..(r + 1) * d];
                if g.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                let ig = self.encoder.assemble_backward(*pos, *dir, *rot, *scale, g)?;
                for (dense, tg) in tables.iter_mut().zip([
                    &ig.position_tables,
                    &ig.scale_tables,
                    &ig.rotation_tables,
                    &ig.view_tables,
                ]) {
                    tg.accumulate_into(dense);
                }
            }
        }
        Ok(ModelGrad { net: ng.params, tables })
    }
}

/// Where the soft-dropout `q` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QSource {
    /// Counter-based draw keyed by `(seed, iteration, gaussian index)`.
    Random {
        seed: u64,
        iteration: u64,
    },
    Half,
    /// Dropout off for this pass.
    Off,
}

impl QSource {
    pub fn for_eval(mode: EvalMode, seed: u64, iteration: u64) -> Self {
        match mode {
            EvalMode::Stochastic => Self::Random { seed, iteration },
            EvalMode::DeterministicQHalf => Self::Half,
            EvalMode::Off => Self::Off,
        }
    }

    fn q<T: Real>(&self, index: usize) -> Option<T> {
        match *self {
            Self::Random { seed, iteration } => Some(draw_q(seed, iteration, index as u64)),
            Self::Half => Some(lit(0.5)),
            Self::Off => None,
        }
    }
}

/// Forward state of the opacity chain for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct OpacityPass<T> {
    /// Gaussians that survive culling in this view.
    pub visible: Vec<usize>,
    pub batch: Option<EncodedBatch<T>>,
    /// Uncertainty per visible Gaussian.
    pub u: Vec<T>,
    pub q: Vec<Option<T>>,
    /// Base opacity per Gaussian.
    pub alpha: Vec<T>,
    /// Effective opacity per Gaussian; culled ones keep their base opacity.
    pub alpha_eff: Vec<T>,
    pub mechanism: Mechanism,
}

pub fn visible_indices<T: Real>(gaussians: &GaussianSet<T>, camera: &Camera<T>, support: Support) -> Vec<usize> {
    (0..gaussians.len())
        .filter(|&i| project(gaussians, i, camera, T::one(), support == Support::Bounded).is_ok())
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn opacity_pass<T: Real>(
    model: &UncertaintyModel<T>,
    gaussians: &GaussianSet<T>,
    camera: &Camera<T>,
    view: usize,
    cfg: &SoftDropConfig,
    mechanism: Mechanism,
    q_source: QSource,
    support: Support,
) -> Result<OpacityPass<T>> {
    let alpha: Vec<T> = gaussians.opacity_logits.iter().map(|l| sigmoid(*l)).collect();
    let mut alpha_eff = alpha.clone();
    if !mechanism.uncertainty {
        return Ok(OpacityPass {
            visible: Vec::new(),
            batch: None,
            u: Vec::new(),
            q: Vec::new(),
            alpha,
            alpha_eff,
            mechanism,
        });
    }
    let visible = visible_indices(gaussians, camera, support);
    let batch = model.encode(gaussians, camera, &visible)?;
    let u = model.predict(&batch, view)?;
    let mut q = Vec::with_capacity(visible.len());
    for (k, &i) in visible.iter().enumerate() {
        let qi = q_source.q::<T>(i);
        let out = softdrop::softdrop_forward(alpha[i], u[k], qi, cfg, mechanism);
        alpha_eff[i] = out.alpha_eff;
        q.push(qi);
    }
    Ok(OpacityPass {
        visible,
        batch: Some(batch),
        u,
        q,
        alpha,
        alpha_eff,
        mechanism,
    })
}

/// Pulls `dL/d alpha_eff` back to the opacity logits and the model.
pub fn opacity_backward<T: Real>(
    model: &UncertaintyModel<T>,
    pass: &OpacityPass<T>,
    cfg: &SoftDropConfig,
    d_alpha_eff: &[T],
) -> Result<(Vec<T>, Option<ModelGrad<T>>)> {
    let n = pass.alpha.len();
    if d_alpha_eff.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: d_alpha_eff.len(),
        });
    }
    let mut d_alpha = d_alpha_eff.to_vec();
    let Some(batch) = &pass.batch else {
        let d_logit = d_alpha
            .iter()
            .zip(&pass.alpha)
            .map(|(g, a)| *g * *a * (T::one() - *a))
            .collect();
        return Ok((d_logit, None));
    };
    let mut du = vec![T::zero(); pass.visible.len()];
    for (k, &i) in pass.visible.iter().enumerate() {
        let (da, dui) =
            softdrop::softdrop_backward(pass.alpha[i], pass.u[k], pass.q[k], cfg, pass.mechanism, d_alpha_eff[i]);
        d_alpha[i] = da;
        du[k] = dui;
    }
    let d_logit = d_alpha
        .iter()
        .zip(&pass.alpha)
        .map(|(g, a)| *g * *a * (T::one() - *a))
        .collect();
    let mg = model.backward(batch, &du)?;
    Ok((d_logit, Some(mg)))
}
