//! Deterministic neural-network building blocks.
//!
//! Everything is written against [`crate::num::Scalar`] with explicit
//! forward and backward functions instead of a tape: callers keep the
//! activations they need and hand them back to the matching `*_backward`.
//! All randomness flows through caller-provided RNGs, and all reductions
//! run in a fixed order, so training is bit-reproducible for a given seed.

mod adam;
mod layers;
mod warp_ops;

pub use adam::Adam;
pub use layers::{
    leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, upsample2, upsample2_backward,
    Conv2d, Conv2dGrad, Linear, LinearGrad, LEAKY_SLOPE,
};
pub use warp_ops::{
    compose_fields, compose_fields_backward, expmap, expmap_backward, expmap_with_cache,
    warp_image, warp_image_backward,
};

use rand::Rng;

use crate::error::{Error, Result};

/// Biases batch sampling toward recently hard examples.
///
/// With mining ratio `rho`, each batch draws `round(rho * batch)` items
/// uniformly from the highest-loss quantile of recorded per-item losses
/// and the rest uniformly from all items; `rho = 0` is plain uniform
/// sampling. Items with no recorded loss yet count as maximally hard, so
/// every item is visited early.
#[derive(Clone, Debug)]
pub struct HardExampleSampler {
    ratio: f64,
    quantile: f64,
    losses: Vec<f64>,
}

impl HardExampleSampler {
    pub fn new(items: usize, ratio: f64) -> Result<Self> {
        if items == 0 {
            return Err(Error::argument("sampler needs at least one item".to_string()));
        }
        if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
            return Err(Error::argument(format!("mining ratio {ratio} outside [0, 1]")));
        }
        Ok(HardExampleSampler { ratio, quantile: 0.25, losses: vec![f64::INFINITY; items] })
    }

    pub fn items(&self) -> usize {
        self.losses.len()
    }

    /// Records the most recent loss observed for `item`.
    pub fn record(&mut self, item: usize, loss: f64) {
        if let Some(slot) = self.losses.get_mut(item) {
            *slot = loss;
        }
    }

    /// Indices of the current hard set: the top quantile by recent loss,
    /// ties broken by index.
    fn hard_set(&self) -> Vec<usize> {
        let n = self.losses.len();
        let take = ((self.quantile * n as f64).ceil() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.losses[b].total_cmp(&self.losses[a]).then(a.cmp(&b))
        });
        order.truncate(take);
        order
    }

    /// Draws a batch of item indices (with replacement).
    pub fn sample_batch<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        let n = self.losses.len();
        let hard_draws = ((self.ratio * batch as f64).round() as usize).min(batch);
        let mut out = Vec::with_capacity(batch);
        if hard_draws > 0 {
            let hard = self.hard_set();
            for _ in 0..hard_draws {
                out.push(hard[rng.gen_range(0..hard.len())]);
            }
        }
        for _ in hard_draws..batch {
            out.push(rng.gen_range(0..n));
        }
        out
    }
}
