//! Adam with per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-15;

/// First and second moments for one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamGroup<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamGroup<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of `params` in place. Returns `false` (and leaves
    /// everything untouched) when `lr` is zero.
    pub fn update(&mut self, params: &mut [T], grad: &[T], lr: f64) -> bool {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        if lr == 0.0 {
            return false;
        }
        self.step += 1;
        let (b1, b2) = (lit::<T>(BETA1), lit::<T>(BETA2));
        let one = T::one();
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        let lr = lit::<T>(lr);
        let eps = lit::<T>(EPS);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
        true
    }

    /// Keeps rows of `width` entries whose flag is set.
    pub fn retain_rows(&mut self, keep: &[bool], width: usize) {
        assert_eq!(keep.len() * width, self.m.len());
        let filter = |v: &mut Vec<T>| {
            let mut i = 0;
            v.retain(|_| {
                let k = keep[i / width];
                i += 1;
                k
            });
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }
}
