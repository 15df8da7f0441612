//! Per-Gaussian uncertainty network: a small ReLU MLP with a sigmoid head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{lit, sigmoid, Real};

/// Hidden widths used when none are configured.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyBatch<T> {
    pub values: Vec<T>,
    /// Index of the view the batch was computed for.
    pub view: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetGrad<T> {
    /// Same layout as [`UncertaintyNet::params`].
    pub params: Vec<T>,
    /// Row-major, one row per input.
    pub inputs: Vec<T>,
}

/// Fully connected layers `widths[0] -> ... -> 1`, ReLU between, sigmoid at the end.
///
/// Parameters are stored flat; each layer contributes its `out x in`
/// row-major weight matrix followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyNet<T> {
    widths: Vec<usize>,
    pub params: Vec<T>,
    frozen: bool,
}

#[derive(Clone, Copy, Debug)]
struct LayerSpan {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Real> UncertaintyNet<T> {
    /// All weights and biases zero, so every output is exactly 0.5.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("bad layer widths {widths:?}")));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::Config("the output layer must have width 1".into()));
        }
        let n = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![T::zero(); n],
            frozen: false,
        })
    }

    /// He-uniform hidden layers; the output layer starts at zero so the
    /// initial uncertainty is 0.5 everywhere.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let spans = net.spans();
        for span in &spans[..spans.len() - 1] {
            let bound = (6.0 / span.fan_in as f64).sqrt();
            for v in &mut net.params[span.w..span.b] {
                *v = lit(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    /// `input -> hidden... -> 1`
    pub fn with_hidden(input: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self::new(&widths, rng)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops parameter updates for good. Calling it again changes nothing.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn spans(&self) -> Vec<LayerSpan> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let span = LayerSpan {
                    w: off,
                    b: off + w[0] * w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                };
                off = span.b + w[1];
                span
            })
            .collect()
    }

    /// Offset of the output bias inside [`UncertaintyNet::params`].
    pub fn output_bias_index(&self) -> usize {
        self.params.len() - 1
    }

    fn check_inputs(&self, inputs: &[T]) -> Result<usize> {
        let d = self.input_dim();
        if !inputs.len().is_multiple_of(d) {
            return Err(Error::Shape {
                expected: d,
                got: inputs.len() % d,
            });
        }
        Ok(inputs.len() / d)
    }

    /// Pre-activations and activations of every layer for one row.
    fn forward_row(&self, spans: &[LayerSpan], x: &[T], acts: &mut Vec<Vec<T>>) -> T {
        acts.clear();
        acts.push(x.to_vec());
        let mut out = T::zero();
        for (li, s) in spans.iter().enumerate() {
            let prev = acts.last().unwrap();
            let last = li + 1 == spans.len();
            let mut z = vec![T::zero(); s.fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &self.params[s.w + o * s.fan_in..s.w + (o + 1) * s.fan_in];
                let mut acc = self.params[s.b + o];
                for (w, h) in row.iter().zip(prev) {
                    acc += *w * *h;
                }
                *zo = acc;
            }
            if last {
                out = z[0];
                acts.push(z);
            } else {
                acts.push(z.into_iter().map(|v| v.max(T::zero())).collect());
            }
        }
        out
    }

    fn squash(z: T) -> (T, bool) {
        let eps = T::epsilon();
        let u = sigmoid(z);
        if u < eps {
            (eps, false)
        } else if u > T::one() - eps {
            (T::one() - eps, false)
        } else {
            (u, true)
        }
    }

    /// Uncertainty for each row of `inputs` (row-major, `input_dim` wide).
    /// Values are kept inside `[eps, 1 - eps]` so they never reach 0 or 1.
    pub fn predict(&self, inputs: &[T], view: usize) -> Result<UncertaintyBatch<T>> {
        let n = self.check_inputs(inputs)?;
        let d = self.input_dim();
        let spans = self.spans();
        let mut acts = Vec::new();
        let values = (0..n)
            .map(|i| Self::squash(self.forward_row(&spans, &inputs[i * d..(i + 1) * d], &mut acts)).0)
            .collect();
        Ok(UncertaintyBatch { values, view })
    }

    /// Reverse pass for `upstream[i] = dL/du_i`. A frozen net reports zero
    /// parameter gradients but still propagates input gradients.
    pub fn predict_backward(&self, inputs: &[T], upstream: &[T]) -> Result<NetGrad<T>> {
        let n = self.check_inputs(inputs)?;
        if upstream.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: upstream.len(),
            });
        }
        let d = self.input_dim();
        let spans = self.spans();
        let mut grad_params = vec![T::zero(); self.params.len()];
        let mut grad_inputs = vec![T::zero(); inputs.len()];
        let mut acts = Vec::new();
        for i in 0..n {
            if upstream[i] == T::zero() {
                continue;
            }
            let x = &inputs[i * d..(i + 1) * d];
            let z = self.forward_row(&spans, x, &mut acts);
            let (u, live) = Self::squash(z);
            if !live {
                continue;
            }
            // acts[k] is the input to layer k; acts[last] holds the output pre-activation
            let mut delta = vec![upstream[i] * u * (T::one() - u)];
            for (li, s) in spans.iter().enumerate().rev() {
                let h = &acts[li];
                for o in 0..s.fan_out {
                    let g = delta[o];
                    if g == T::zero() {
                        continue;
                    }
                    grad_params[s.b + o] += g;
                    let wrow = s.w + o * s.fan_in;
                    for (k, hk) in h.iter().enumerate() {
                        grad_params[wrow + k] += g * *hk;
                    }
                }
                let mut prev = vec![T::zero(); s.fan_in];
                for o in 0..s.fan_out {
                    let g = delta[o];
                    if g == T::zero() {
                        continue;
                    }
                    let row = &self.params[s.w + o * s.fan_in..s.w + (o + 1) * s.fan_in];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += g * *w;
                    }
                }
                if li > 0 {
                    // relu gate: activation > 0 iff pre-activation > 0
                    for (p, a) in prev.iter_mut().zip(&acts[li]) {
                        if *a <= T::zero() {
                            *p = T::zero();
                        }
                    }
                }
                delta = prev;
            }
            grad_inputs[i * d..(i + 1) * d].copy_from_slice(&delta);
        }
        if self.frozen {
            grad_params.iter_mut().for_each(|g| *g = T::zero());
        }
        Ok(NetGrad {
            params: grad_params,
            inputs: grad_inputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_half() {
        let net = UncertaintyNet::<f64>::zeros(&[34, 64, 64, 1]).unwrap();
        let b = net.predict(&vec![0.7; 34 * 5], 3).unwrap();
        assert_eq!(b.values, vec![0.5; 5]);
        assert_eq!(b.view, 3);
    }

    #[test]
    fn output_bias_ten() {
        let mut net = UncertaintyNet::<f64>::zeros(&[34, 8, 1]).unwrap();
        let i = net.output_bias_index();
        net.params[i] = 10.0;
        let u = net.predict(&[0.3; 34], 0).unwrap().values[0];
        let oracle = 1.0 / (1.0 + (-10.0f64).exp());
        assert_eq!(u, oracle);
        assert!((u - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let net = UncertaintyNet::<f64>::zeros(&[34, 8, 1]).unwrap();
        assert!(matches!(net.predict(&[0.0; 33], 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn initial_uncertainty_is_half() {
        let net = UncertaintyNet::<f64>::with_hidden(34, &DEFAULT_HIDDEN, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = net.predict(&[0.4; 68], 0).unwrap();
        assert_eq!(b.values, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_derived_two_layer_gradient() {
        // 1 input -> 1 hidden -> 1 output; u = s(w2 * relu(w1 x + b1) + b2)
        let mut net = UncertaintyNet::<f64>::zeros(&[1, 1, 1]).unwrap();
        let (w1, b1, w2, b2, x) = (0.8, 0.1, -1.5, 0.3, 2.0);
        net.params.copy_from_slice(&[w1, b1, w2, b2]);
        let h = w1 * x + b1;
        let z = w2 * h + b2;
        let u = 1.0 / (1.0 + (-z).exp());
        let s = u * (1.0 - u);
        let g = net.predict_backward(&[x], &[1.0]).unwrap();
        let expected = [s * w2 * x, s * w2, s * h, s];
        for k in 0..4 {
            assert!((g.params[k] - expected[k]).abs() < 1e-15, "{k}");
        }
        assert!((g.inputs[0] - s * w2 * w1).abs() < 1e-15);
    }

    #[test]
    fn frozen_net_has_zero_param_grad_same_input_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = UncertaintyNet::<f64>::new(&[6, 5, 1], &mut rng).unwrap();
        for v in &mut net.params {
            *v = rng.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let live = net.predict_backward(&x, &[0.7, -1.1]).unwrap();
        let mut frozen = net.clone();
        frozen.freeze();
        frozen.freeze();
        let g = frozen.predict_backward(&x, &[0.7, -1.1]).unwrap();
        assert!(g.params.iter().all(|v| *v == 0.0));
        assert_eq!(g.inputs, live.inputs);
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let net = UncertaintyNet::<f64>::new(&[4, 3, 1], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let g = net.predict_backward(&[0.1, 0.2, 0.3, 0.4], &[0.0]).unwrap();
        assert!(g.params.iter().chain(&g.inputs).all(|v| *v == 0.0));
    }
}
