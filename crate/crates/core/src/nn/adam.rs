//! Adam with f64 moment accumulators, slot-addressed so models pair each
//! parameter tensor with a stable slot index.

use ndarray::{Array, Dimension};

use crate::num::{cast, Scalar};

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam optimizer. Call [`Adam::begin_step`] once per batch, then
/// [`Adam::update`] for every parameter tensor with its gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    slots: Vec<Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, slots: Vec::new() }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to `param` in place. `slot` must be unique
    /// per parameter tensor and stable across steps.
    pub fn update<S: Scalar, D: Dimension>(
        &mut self,
        slot: usize,
        param: &mut Array<S, D>,
        grad: &Array<S, D>,
    ) {
        debug_assert!(self.t > 0, "begin_step before update");
        debug_assert_eq!(param.len(), grad.len(), "param/grad length mismatch");
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Moments::default);
        }
        let moments = &mut self.slots[slot];
        if moments.m.is_empty() {
            moments.m = vec![0.0; param.len()];
            moments.v = vec![0.0; param.len()];
        }
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, &g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
        {
            let g = g.to_f64().unwrap_or(0.0);
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let step = self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            *p = *p - cast::<S>(step);
        }
    }
}
