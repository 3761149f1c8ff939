//! Pairwise dense registration: predicts mutually inverse forward and
//! inverse warping fields between a fixed and a moving patch, so labels
//! painted on one can be carried onto the other.
//!
//! Four predictor variants share one training loop: a plain
//! encoder-decoder, a skip-connected displacement regressor, a stationary
//! velocity field integrated by scaling and squaring (the default; its
//! two fields are inverse by construction), and a multi-scale correlation
//! head. A direct-optimization oracle registers pairs without any learned
//! weights and anchors the learned variants in tests.
//!
//! Field layout follows the nn module: `(2, H, W)` with plane 0 the x
//! displacement. Conversions to the `(H, W, 2)` [`WarpField`] container
//! sit at the registration boundary.

use ndarray::{concatenate, s, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::CellBank;
use crate::error::{Error, Result};
use crate::nn::{
    expmap_backward, expmap_with_cache, leaky_relu, leaky_relu_backward, upsample2,
    upsample2_backward, warp_image, warp_image_backward, Adam, Conv2d, Conv2dGrad,
    HardExampleSampler,
};
use crate::num::{cast, Scalar};
use crate::patch::{CellPatch, LabelStack};
use crate::rng::{derive, substream};
use crate::tensor_io;
use crate::warp::{
    apply_warp_labels, apply_warp_patch, invert, make_warp, sample_diffeo, save_field,
    AugmentationConfig, FieldMeta, InterpPolicy, WarpField,
};

/// Scaling-and-squaring steps for velocity integration.
pub const DEFAULT_INTEGRATION_STEPS: usize = 7;

/// Default number of registration oracle iterations per pyramid level.
pub const DEFAULT_ORACLE_ITERATIONS: usize = 200;

/// Default weight of the oracle's field-smoothness penalty.
pub const DEFAULT_ORACLE_SMOOTHNESS: f64 = 0.1;

const CHECKPOINT_VERSION: u32 = 1;

/// Which field predictor a [`MapperModel`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapperKind {
    /// Encoder-decoder without skip connections, two independent heads.
    PlainEncoderDecoder,
    /// Skip-connected regressor with two independent heads.
    DisplacementRegressor,
    /// One velocity head; forward/inverse are `exp(+v)` and `exp(-v)`.
    StationaryVelocity,
    /// Correlation volume between per-image features drives the decoder.
    MultiScaleCorrelation,
}

/// Hyperparameters for [`train_mapping`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingTrainConfig {
    pub kind: MapperKind,
    /// Optimization steps; each draws one batch of (archetype, warp) pairs.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Velocity integration depth (stationary-velocity variant only).
    pub integration_steps: usize,
    /// Fraction of each batch drawn from the highest-loss archetypes.
    pub mining_ratio: f64,
    /// Field-head weights start at `scale` times the standard draw.
    /// Zero (the default) starts both fields at the exact identity.
    pub head_init_scale: f64,
    /// Distribution of deformations the mapper learns to undo.
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl Default for MappingTrainConfig {
    fn default() -> Self {
        MappingTrainConfig::for_patch(32)
    }
}

impl MappingTrainConfig {
    pub fn for_patch(size: usize) -> Self {
        MappingTrainConfig {
            kind: MapperKind::StationaryVelocity,
            epochs: 400,
            batch_size: 4,
            learning_rate: 1e-3,
            integration_steps: DEFAULT_INTEGRATION_STEPS,
            mining_ratio: 0.0,
            head_init_scale: 0.0,
            augmentation: AugmentationConfig::small_residual(size),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.kind == MapperKind::StationaryVelocity && self.integration_steps == 0 {
            return Err(Error::Config("integration_steps must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.mining_ratio) {
            return Err(Error::Config(format!("mining ratio {} outside [0, 1]", self.mining_ratio)));
        }
        if !self.head_init_scale.is_finite() || self.head_init_scale < 0.0 {
            return Err(Error::Config(format!("bad head init scale {}", self.head_init_scale)));
        }
        self.augmentation.validate()
    }
}

/// Shared encoder-decoder trunk: two stride-2 levels down, two up, with
/// optional skip connections, feeding zero-initialized field heads.
struct TrunkParams<S: Scalar> {
    c1: Conv2d<S>,
    d1: Conv2d<S>,
    d2: Conv2d<S>,
    bott: Conv2d<S>,
    u1: Conv2d<S>,
    u2: Conv2d<S>,
    head_fwd: Conv2d<S>,
    head_inv: Option<Conv2d<S>>,
    skips: bool,
}

/// Siamese feature net, correlation volume, and upsampling decoder.
struct CorrParams<S: Scalar> {
    f1: Conv2d<S>,
    f2: Conv2d<S>,
    f3: Conv2d<S>,
    m1: Conv2d<S>,
    m2: Conv2d<S>,
    u1: Conv2d<S>,
    u2: Conv2d<S>,
    head_fwd: Conv2d<S>,
    head_inv: Conv2d<S>,
}

enum Params<S: Scalar> {
    Trunk(TrunkParams<S>),
    Corr(CorrParams<S>),
}

/// Matching-cost window radius for the correlation variant.
const CORR_RADIUS: usize = 2;
const CORR_CHANNELS: usize = (2 * CORR_RADIUS + 1) * (2 * CORR_RADIUS + 1);
const FEAT_CHANNELS: usize = 16;

/// Learned pairwise registrator. See [`MapperKind`] for the variants.
pub struct MapperModel<S: Scalar> {
    pub kind: MapperKind,
    pub input_size: usize,
    pub integration_steps: usize,
    params: Params<S>,
    pub fingerprint: crate::invariant::TrainingFingerprint,
    /// Per-epoch mean of the cycle term, recorded during training.
    pub cycle_history: Vec<f64>,
}

struct TrunkCache<S: Scalar> {
    x: Array3<S>,
    a1: Array3<S>,
    e1: Array3<S>,
    a2: Array3<S>,
    e2: Array3<S>,
    a3: Array3<S>,
    e3: Array3<S>,
    a4: Array3<S>,
    cat1: Array3<S>,
    a5: Array3<S>,
    cat2: Array3<S>,
    a6: Array3<S>,
    e6: Array3<S>,
    /// expmap squaring caches for +v and -v (stationary velocity only).
    exp_pos: Option<Vec<Array3<S>>>,
    exp_neg: Option<Vec<Array3<S>>>,
}

struct FeatCache<S: Scalar> {
    x: Array3<S>,
    a1: Array3<S>,
    e1: Array3<S>,
    a2: Array3<S>,
    e2: Array3<S>,
    a3: Array3<S>,
    e3: Array3<S>,
}

struct CorrCache<S: Scalar> {
    fixed: FeatCache<S>,
    moving: FeatCache<S>,
    cat: Array3<S>,
    a_m1: Array3<S>,
    e_m1: Array3<S>,
    a_m2: Array3<S>,
    up1_in: Array3<S>,
    a_u1: Array3<S>,
    up2_in: Array3<S>,
    a_u2: Array3<S>,
    e_u2: Array3<S>,
}

/// Forward activations needed by [`MapperModel::backward`].
pub struct MapperCache<S: Scalar>(CacheInner<S>);

enum CacheInner<S: Scalar> {
    Trunk(TrunkCache<S>),
    Corr(CorrCache<S>),
}

struct TrunkGrads<S: Scalar> {
    c1: Conv2dGrad<S>,
    d1: Conv2dGrad<S>,
    d2: Conv2dGrad<S>,
    bott: Conv2dGrad<S>,
    u1: Conv2dGrad<S>,
    u2: Conv2dGrad<S>,
    head_fwd: Conv2dGrad<S>,
    head_inv: Option<Conv2dGrad<S>>,
}

struct CorrGrads<S: Scalar> {
    f1: Conv2dGrad<S>,
    f2: Conv2dGrad<S>,
    f3: Conv2dGrad<S>,
    m1: Conv2dGrad<S>,
    m2: Conv2dGrad<S>,
    u1: Conv2dGrad<S>,
    u2: Conv2dGrad<S>,
    head_fwd: Conv2dGrad<S>,
    head_inv: Conv2dGrad<S>,
}

/// Parameter gradients for one [`MapperModel`] forward/backward pass.
pub struct MapperGrads<S: Scalar>(GradsInner<S>);

enum GradsInner<S: Scalar> {
    Trunk(TrunkGrads<S>),
    Corr(CorrGrads<S>),
}

impl<S: Scalar> MapperGrads<S> {
    pub fn accumulate(&mut self, other: &MapperGrads<S>) {
        match (&mut self.0, &other.0) {
            (GradsInner::Trunk(a), GradsInner::Trunk(b)) => {
                a.c1.accumulate(&b.c1);
                a.d1.accumulate(&b.d1);
                a.d2.accumulate(&b.d2);
                a.bott.accumulate(&b.bott);
                a.u1.accumulate(&b.u1);
                a.u2.accumulate(&b.u2);
                a.head_fwd.accumulate(&b.head_fwd);
                if let (Some(x), Some(y)) = (a.head_inv.as_mut(), b.head_inv.as_ref()) {
                    x.accumulate(y);
                }
            }
            (GradsInner::Corr(a), GradsInner::Corr(b)) => {
                a.f1.accumulate(&b.f1);
                a.f2.accumulate(&b.f2);
                a.f3.accumulate(&b.f3);
                a.m1.accumulate(&b.m1);
                a.m2.accumulate(&b.m2);
                a.u1.accumulate(&b.u1);
                a.u2.accumulate(&b.u2);
                a.head_fwd.accumulate(&b.head_fwd);
                a.head_inv.accumulate(&b.head_inv);
            }
            _ => unreachable!("gradient variants cannot mix"),
        }
    }

    pub fn scale(&mut self, factor: S) {
        match &mut self.0 {
            GradsInner::Trunk(g) => {
                g.c1.scale(factor);
                g.d1.scale(factor);
                g.d2.scale(factor);
                g.bott.scale(factor);
                g.u1.scale(factor);
                g.u2.scale(factor);
                g.head_fwd.scale(factor);
                if let Some(h) = g.head_inv.as_mut() {
                    h.scale(factor);
                }
            }
            GradsInner::Corr(g) => {
                g.f1.scale(factor);
                g.f2.scale(factor);
                g.f3.scale(factor);
                g.m1.scale(factor);
                g.m2.scale(factor);
                g.u1.scale(factor);
                g.u2.scale(factor);
                g.head_fwd.scale(factor);
                g.head_inv.scale(factor);
            }
        }
    }
}

impl<S: Scalar> MapperModel<S> {
    /// Fresh model with zero-initialized heads, so both predicted fields
    /// start at the identity regardless of trunk weights.
    pub fn init(
        kind: MapperKind,
        input_size: usize,
        integration_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        MapperModel::init_with_head_scale(kind, input_size, integration_steps, 0.0, seed)
    }

    /// Like [`MapperModel::init`], but draws head weights at `head_scale`
    /// times the standard magnitude instead of starting at the identity.
    pub fn init_with_head_scale(
        kind: MapperKind,
        input_size: usize,
        integration_steps: usize,
        head_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if !head_scale.is_finite() || head_scale < 0.0 {
            return Err(Error::Config(format!("bad head init scale {head_scale}")));
        }
        if input_size < 8 || input_size % 4 != 0 {
            return Err(Error::Config(format!(
                "mapper input size must be >= 8 and divisible by 4, got {input_size}"
            )));
        }
        if kind == MapperKind::StationaryVelocity && integration_steps == 0 {
            return Err(Error::Config("integration_steps must be >= 1".to_string()));
        }
        let root = derive(seed, "mapper-init");
        let stream = |name: &str| substream(root, name);
        let params = match kind {
            MapperKind::MultiScaleCorrelation => Params::Corr(CorrParams {
                f1: Conv2d::new(1, 8, 3, 1, 1, &mut stream("f1")),
                f2: Conv2d::new(8, FEAT_CHANNELS, 3, 2, 1, &mut stream("f2")),
                f3: Conv2d::new(FEAT_CHANNELS, FEAT_CHANNELS, 3, 2, 1, &mut stream("f3")),
                m1: Conv2d::new(CORR_CHANNELS + FEAT_CHANNELS, 32, 1, 1, 0, &mut stream("m1")),
                m2: Conv2d::new(32, 32, 1, 1, 0, &mut stream("m2")),
                u1: Conv2d::new(32, 16, 3, 1, 1, &mut stream("u1")),
                u2: Conv2d::new(16, 16, 3, 1, 1, &mut stream("u2")),
                head_fwd: Conv2d::zeros(16, 2, 3, 1, 1),
                head_inv: Conv2d::zeros(16, 2, 3, 1, 1),
            }),
            _ => {
                let skips = kind != MapperKind::PlainEncoderDecoder;
                let u1_in = if skips { 64 } else { 32 };
                let u2_in = if skips { 48 } else { 32 };
                Params::Trunk(TrunkParams {
                    c1: Conv2d::new(2, 16, 3, 1, 1, &mut stream("c1")),
                    d1: Conv2d::new(16, 32, 3, 2, 1, &mut stream("d1")),
                    d2: Conv2d::new(32, 32, 3, 2, 1, &mut stream("d2")),
                    bott: Conv2d::new(32, 32, 3, 1, 1, &mut stream("bott")),
                    u1: Conv2d::new(u1_in, 32, 3, 1, 1, &mut stream("u1")),
                    u2: Conv2d::new(u2_in, 16, 3, 1, 1, &mut stream("u2")),
                    head_fwd: Conv2d::zeros(16, 2, 3, 1, 1),
                    head_inv: if kind == MapperKind::StationaryVelocity {
                        None
                    } else {
                        Some(Conv2d::zeros(16, 2, 3, 1, 1))
                    },
                    skips,
                })
            }
        };
        let mut params = params;
        if head_scale > 0.0 {
            let factor = cast::<S>(head_scale);
            let scaled_head = |name: &str| {
                let mut c = Conv2d::<S>::new(16, 2, 3, 1, 1, &mut stream(name));
                c.weight.mapv_inplace(|v| v * factor);
                c.bias.mapv_inplace(|v| v * factor);
                c
            };
            match &mut params {
                Params::Trunk(p) => {
                    p.head_fwd = scaled_head("head_fwd");
                    if p.head_inv.is_some() {
                        p.head_inv = Some(scaled_head("head_inv"));
                    }
                }
                Params::Corr(p) => {
                    p.head_fwd = scaled_head("head_fwd");
                    p.head_inv = scaled_head("head_inv");
                }
            }
        }
        Ok(MapperModel {
            kind,
            input_size,
            integration_steps,
            params,
            fingerprint: crate::invariant::TrainingFingerprint {
                seed,
                epochs: 0,
                loss_history: Vec::new(),
            },
            cycle_history: Vec::new(),
        })
    }

    fn check_input(&self, gray: &Array3<S>) -> Result<()> {
        let n = self.input_size;
        if gray.dim() != (1, n, n) {
            return Err(Error::dimension(format!(
                "mapper expects (1, {n}, {n}) grayscale input, got {:?}",
                gray.dim()
            )));
        }
        Ok(())
    }

    /// Predicts the forward and inverse displacement fields `(2, n, n)`
    /// mapping `moving` onto `fixed` and back.
    pub fn forward(
        &self,
        fixed_gray: &Array3<S>,
        moving_gray: &Array3<S>,
    ) -> Result<(Array3<S>, Array3<S>, MapperCache<S>)> {
        self.check_input(fixed_gray)?;
        self.check_input(moving_gray)?;
        match &self.params {
            Params::Trunk(p) => {
                let x = concatenate(Axis(0), &[fixed_gray.view(), moving_gray.view()])
                    .expect("matching shapes");
                let a1 = p.c1.forward(&x);
                let e1 = leaky_relu(&a1);
                let a2 = p.d1.forward(&e1);
                let e2 = leaky_relu(&a2);
                let a3 = p.d2.forward(&e2);
                let e3 = leaky_relu(&a3);
                let a4 = p.bott.forward(&e3);
                let e4 = leaky_relu(&a4);
                let up1 = upsample2(&e4);
                let cat1 = if p.skips {
                    concatenate(Axis(0), &[up1.view(), e2.view()]).expect("matching shapes")
                } else {
                    up1
                };
                let a5 = p.u1.forward(&cat1);
                let e5 = leaky_relu(&a5);
                let up2 = upsample2(&e5);
                let cat2 = if p.skips {
                    concatenate(Axis(0), &[up2.view(), e1.view()]).expect("matching shapes")
                } else {
                    up2
                };
                let a6 = p.u2.forward(&cat2);
                let e6 = leaky_relu(&a6);
                let head = p.head_fwd.forward(&e6);
                let (w_fwd, w_inv, exp_pos, exp_neg) = match &p.head_inv {
                    None => {
                        let neg = head.mapv(|v| -v);
                        let (w_fwd, cache_pos) =
                            expmap_with_cache(&head, self.integration_steps);
                        let (w_inv, cache_neg) = expmap_with_cache(&neg, self.integration_steps);
                        (w_fwd, w_inv, Some(cache_pos), Some(cache_neg))
                    }
                    Some(inv_head) => {
                        let w_inv = inv_head.forward(&e6);
                        (head, w_inv, None, None)
                    }
                };
                let cache = TrunkCache {
                    x,
                    a1,
                    e1,
                    a2,
                    e2,
                    a3,
                    e3,
                    a4,
                    cat1,
                    a5,
                    cat2,
                    a6,
                    e6,
                    exp_pos,
                    exp_neg,
                };
                Ok((w_fwd, w_inv, MapperCache(CacheInner::Trunk(cache))))
            }
            Params::Corr(p) => {
                let feat = |x: &Array3<S>| -> FeatCache<S> {
                    let a1 = p.f1.forward(x);
                    let e1 = leaky_relu(&a1);
                    let a2 = p.f2.forward(&e1);
                    let e2 = leaky_relu(&a2);
                    let a3 = p.f3.forward(&e2);
                    let e3 = leaky_relu(&a3);
                    FeatCache { x: x.clone(), a1, e1, a2, e2, a3, e3 }
                };
                let ff = feat(fixed_gray);
                let fm = feat(moving_gray);
                let corr = correlate(&ff.e3, &fm.e3, CORR_RADIUS);
                let cat = concatenate(Axis(0), &[corr.view(), ff.e3.view()])
                    .expect("matching shapes");
                let a_m1 = p.m1.forward(&cat);
                let e_m1 = leaky_relu(&a_m1);
                let a_m2 = p.m2.forward(&e_m1);
                let e_m2 = leaky_relu(&a_m2);
                let up1_in = upsample2(&e_m2);
                let a_u1 = p.u1.forward(&up1_in);
                let e_u1 = leaky_relu(&a_u1);
                let up2_in = upsample2(&e_u1);
                let a_u2 = p.u2.forward(&up2_in);
                let e_u2 = leaky_relu(&a_u2);
                let w_fwd = p.head_fwd.forward(&e_u2);
                let w_inv = p.head_inv.forward(&e_u2);
                let cache = CorrCache {
                    fixed: ff,
                    moving: fm,
                    cat,
                    a_m1,
                    e_m1,
                    a_m2,
                    up1_in,
                    a_u1,
                    up2_in,
                    a_u2,
                    e_u2,
                };
                Ok((w_fwd, w_inv, MapperCache(CacheInner::Corr(cache))))
            }
        }
    }

    /// Parameter gradients for upstream field gradients `grad_fwd` and
    /// `grad_inv`, both `(2, n, n)`.
    pub fn backward(
        &self,
        cache: &MapperCache<S>,
        grad_fwd: &Array3<S>,
        grad_inv: &Array3<S>,
    ) -> MapperGrads<S> {
        match (&self.params, &cache.0) {
            (Params::Trunk(p), CacheInner::Trunk(c)) => {
                let (g_e6_heads, g_head_fwd, g_head_inv) = match (&p.head_inv, &c.exp_pos) {
                    (None, Some(exp_pos)) => {
                        let exp_neg = c.exp_neg.as_ref().expect("paired expmap cache");
                        let g_pos = expmap_backward(exp_pos, grad_fwd);
                        let g_neg = expmap_backward(exp_neg, grad_inv);
                        let g_v = &g_pos - &g_neg;
                        let (g_e6, g_head) = p.head_fwd.backward(&c.e6, &g_v);
                        (g_e6, g_head, None)
                    }
                    (Some(inv_head), _) => {
                        let (g_e6_f, g_head_f) = p.head_fwd.backward(&c.e6, grad_fwd);
                        let (g_e6_i, g_head_i) = inv_head.backward(&c.e6, grad_inv);
                        (&g_e6_f + &g_e6_i, g_head_f, Some(g_head_i))
                    }
                    _ => unreachable!("stationary velocity caches expmap state"),
                };
                let g_a6 = leaky_relu_backward(&c.a6, &g_e6_heads);
                let (g_cat2, g_u2) = p.u2.backward(&c.cat2, &g_a6);
                let (g_up2, mut g_e1_skip) = if p.skips {
                    let g_up2 = g_cat2.slice(s![..32, .., ..]).to_owned();
                    let g_e1 = g_cat2.slice(s![32.., .., ..]).to_owned();
                    (g_up2, Some(g_e1))
                } else {
                    (g_cat2, None)
                };
                let g_e5 = upsample2_backward(&g_up2);
                let g_a5 = leaky_relu_backward(&c.a5, &g_e5);
                let (g_cat1, g_u1) = p.u1.backward(&c.cat1, &g_a5);
                let (g_up1, mut g_e2_skip) = if p.skips {
                    let g_up1 = g_cat1.slice(s![..32, .., ..]).to_owned();
                    let g_e2 = g_cat1.slice(s![32.., .., ..]).to_owned();
                    (g_up1, Some(g_e2))
                } else {
                    (g_cat1, None)
                };
                let g_e4 = upsample2_backward(&g_up1);
                let g_a4 = leaky_relu_backward(&c.a4, &g_e4);
                let (g_e3, g_bott) = p.bott.backward(&c.e3, &g_a4);
                let g_a3 = leaky_relu_backward(&c.a3, &g_e3);
                let (mut g_e2, g_d2) = p.d2.backward(&c.e2, &g_a3);
                if let Some(skip) = g_e2_skip.take() {
                    g_e2 += &skip;
                }
                let g_a2 = leaky_relu_backward(&c.a2, &g_e2);
                let (mut g_e1, g_d1) = p.d1.backward(&c.e1, &g_a2);
                if let Some(skip) = g_e1_skip.take() {
                    g_e1 += &skip;
                }
                let g_a1 = leaky_relu_backward(&c.a1, &g_e1);
                let (_, g_c1) = p.c1.backward(&c.x, &g_a1);
                MapperGrads(GradsInner::Trunk(TrunkGrads {
                    c1: g_c1,
                    d1: g_d1,
                    d2: g_d2,
                    bott: g_bott,
                    u1: g_u1,
                    u2: g_u2,
                    head_fwd: g_head_fwd,
                    head_inv: g_head_inv,
                }))
            }
            (Params::Corr(p), CacheInner::Corr(c)) => {
                let (g_eu2_f, g_head_f) = p.head_fwd.backward(&c.e_u2, grad_fwd);
                let (g_eu2_i, g_head_i) = p.head_inv.backward(&c.e_u2, grad_inv);
                let g_eu2 = &g_eu2_f + &g_eu2_i;
                let g_au2 = leaky_relu_backward(&c.a_u2, &g_eu2);
                let (g_up2_in, g_u2) = p.u2.backward(&c.up2_in, &g_au2);
                let g_eu1 = upsample2_backward(&g_up2_in);
                let g_au1 = leaky_relu_backward(&c.a_u1, &g_eu1);
                let (g_up1_in, g_u1) = p.u1.backward(&c.up1_in, &g_au1);
                let g_em2 = upsample2_backward(&g_up1_in);
                let g_am2 = leaky_relu_backward(&c.a_m2, &g_em2);
                let (g_em1, g_m2) = p.m2.backward(&c.e_m1, &g_am2);
                let g_am1 = leaky_relu_backward(&c.a_m1, &g_em1);
                let (g_cat, g_m1) = p.m1.backward(&c.cat, &g_am1);
                let g_corr = g_cat.slice(s![..CORR_CHANNELS, .., ..]).to_owned();
                let g_ff_cat = g_cat.slice(s![CORR_CHANNELS.., .., ..]).to_owned();
                let (mut g_ff, g_fm) =
                    correlate_backward(&c.fixed.e3, &c.moving.e3, CORR_RADIUS, &g_corr);
                g_ff += &g_ff_cat;
                let feat_back = |cache: &FeatCache<S>, g_e3: &Array3<S>| {
                    let g_a3 = leaky_relu_backward(&cache.a3, g_e3);
                    let (g_e2, g_f3) = p.f3.backward(&cache.e2, &g_a3);
                    let g_a2 = leaky_relu_backward(&cache.a2, &g_e2);
                    let (g_e1, g_f2) = p.f2.backward(&cache.e1, &g_a2);
                    let g_a1 = leaky_relu_backward(&cache.a1, &g_e1);
                    let (_, g_f1) = p.f1.backward(&cache.x, &g_a1);
                    (g_f1, g_f2, g_f3)
                };
                let (mut g_f1, mut g_f2, mut g_f3) = feat_back(&c.fixed, &g_ff);
                let (g_f1_m, g_f2_m, g_f3_m) = feat_back(&c.moving, &g_fm);
                g_f1.accumulate(&g_f1_m);
                g_f2.accumulate(&g_f2_m);
                g_f3.accumulate(&g_f3_m);
                MapperGrads(GradsInner::Corr(CorrGrads {
                    f1: g_f1,
                    f2: g_f2,
                    f3: g_f3,
                    m1: g_m1,
                    m2: g_m2,
                    u1: g_u1,
                    u2: g_u2,
                    head_fwd: g_head_f,
                    head_inv: g_head_i,
                }))
            }
            _ => unreachable!("cache variant matches params variant"),
        }
    }

    /// Applies one Adam step. Slot numbering is fixed per variant so the
    /// optimizer state stays aligned across steps.
    pub fn apply_update(&mut self, opt: &mut Adam, grads: &MapperGrads<S>) {
        match (&mut self.params, &grads.0) {
            (Params::Trunk(p), GradsInner::Trunk(g)) => {
                let mut slot = 0;
                let mut conv = |layer: &mut Conv2d<S>, grad: &Conv2dGrad<S>| {
                    opt.update(slot, &mut layer.weight, &grad.weight);
                    opt.update(slot + 1, &mut layer.bias, &grad.bias);
                    slot += 2;
                };
                conv(&mut p.c1, &g.c1);
                conv(&mut p.d1, &g.d1);
                conv(&mut p.d2, &g.d2);
                conv(&mut p.bott, &g.bott);
                conv(&mut p.u1, &g.u1);
                conv(&mut p.u2, &g.u2);
                conv(&mut p.head_fwd, &g.head_fwd);
                if let (Some(h), Some(gh)) = (p.head_inv.as_mut(), g.head_inv.as_ref()) {
                    conv(h, gh);
                }
            }
            (Params::Corr(p), GradsInner::Corr(g)) => {
                let mut slot = 0;
                let mut conv = |layer: &mut Conv2d<S>, grad: &Conv2dGrad<S>| {
                    opt.update(slot, &mut layer.weight, &grad.weight);
                    opt.update(slot + 1, &mut layer.bias, &grad.bias);
                    slot += 2;
                };
                conv(&mut p.f1, &g.f1);
                conv(&mut p.f2, &g.f2);
                conv(&mut p.f3, &g.f3);
                conv(&mut p.m1, &g.m1);
                conv(&mut p.m2, &g.m2);
                conv(&mut p.u1, &g.u1);
                conv(&mut p.u2, &g.u2);
                conv(&mut p.head_fwd, &g.head_fwd);
                conv(&mut p.head_inv, &g.head_inv);
            }
            _ => unreachable!("gradient variant matches params variant"),
        }
    }
}

/// Local correlation volume between two `(C, H, W)` feature maps.
///
/// Channel `(dy + r) * (2r + 1) + (dx + r)` holds the mean over feature
/// channels of `a(y, x) . b(y + dy, x + dx)`, zero outside the map.
fn correlate<S: Scalar>(a: &Array3<S>, b: &Array3<S>, radius: usize) -> Array3<S> {
    let (c, h, w) = a.dim();
    let side = 2 * radius + 1;
    let norm = cast::<S>(1.0 / c as f64);
    let r = radius as isize;
    let mut out = Array3::<S>::zeros((side * side, h, w));
    for dy in -r..=r {
        for dx in -r..=r {
            let plane = ((dy + r) as usize) * side + (dx + r) as usize;
            for y in 0..h as isize {
                let yb = y + dy;
                if yb < 0 || yb >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let xb = x + dx;
                    if xb < 0 || xb >= w as isize {
                        continue;
                    }
                    let mut acc = S::zero();
                    for ch in 0..c {
                        acc = acc
                            + a[[ch, y as usize, x as usize]]
                                * b[[ch, yb as usize, xb as usize]];
                    }
                    out[[plane, y as usize, x as usize]] = acc * norm;
                }
            }
        }
    }
    out
}

fn correlate_backward<S: Scalar>(
    a: &Array3<S>,
    b: &Array3<S>,
    radius: usize,
    grad_out: &Array3<S>,
) -> (Array3<S>, Array3<S>) {
    let (c, h, w) = a.dim();
    let side = 2 * radius + 1;
    let norm = cast::<S>(1.0 / c as f64);
    let r = radius as isize;
    let mut ga = Array3::<S>::zeros((c, h, w));
    let mut gb = Array3::<S>::zeros((c, h, w));
    for dy in -r..=r {
        for dx in -r..=r {
            let plane = ((dy + r) as usize) * side + (dx + r) as usize;
            for y in 0..h as isize {
                let yb = y + dy;
                if yb < 0 || yb >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let xb = x + dx;
                    if xb < 0 || xb >= w as isize {
                        continue;
                    }
                    let g = grad_out[[plane, y as usize, x as usize]] * norm;
                    for ch in 0..c {
                        ga[[ch, y as usize, x as usize]] =
                            ga[[ch, y as usize, x as usize]] + g * b[[ch, yb as usize, xb as usize]];
                        gb[[ch, yb as usize, xb as usize]] =
                            gb[[ch, yb as usize, xb as usize]] + g * a[[ch, y as usize, x as usize]];
                    }
                }
            }
        }
    }
    (ga, gb)
}

/// Value and field gradients of the registration objective.
pub struct MappingLoss<S: Scalar> {
    /// alignment + cycle, summed over pixels.
    pub loss: f64,
    /// `sum (fixed - W o moving)^2`.
    pub alignment: f64,
    /// `sum (moving - W_inv o (W o moving))^2`.
    pub cycle: f64,
    pub grad_forward: Array3<S>,
    pub grad_inverse: Array3<S>,
}

/// Alignment-plus-cycle objective on one pair.
///
/// `forward` warps the moving image onto the fixed one; `inverse` must
/// carry the warped image back. Both images are `(C, H, W)` and both
/// fields `(2, H, W)`.
pub fn mapping_loss<S: Scalar>(
    fixed: &Array3<S>,
    moving: &Array3<S>,
    forward: &Array3<S>,
    inverse: &Array3<S>,
) -> Result<MappingLoss<S>> {
    let (c, h, w) = fixed.dim();
    if moving.dim() != (c, h, w) {
        return Err(Error::dimension(format!(
            "fixed {:?} and moving {:?} shapes differ",
            fixed.dim(),
            moving.dim()
        )));
    }
    for (name, f) in [("forward", forward), ("inverse", inverse)] {
        if f.dim() != (2, h, w) {
            return Err(Error::dimension(format!(
                "{name} field must be (2, {h}, {w}), got {:?}",
                f.dim()
            )));
        }
    }
    let warped = warp_image(moving, forward);
    let cycled = warp_image(&warped, inverse);
    let mut alignment = 0.0;
    let mut g_warped_align = Array3::<S>::zeros((c, h, w));
    let mut cycle = 0.0;
    let mut g_cycled = Array3::<S>::zeros((c, h, w));
    let two = cast::<S>(2.0);
    for (i, (&wv, &fv)) in warped.iter().zip(fixed.iter()).enumerate() {
        let r = wv - fv;
        alignment += (r * r).to_f64().unwrap_or(f64::NAN);
        g_warped_align.as_slice_mut().expect("contiguous")[i] = two * r;
    }
    for (i, (&cv, &mv)) in cycled.iter().zip(moving.iter()).enumerate() {
        let r = cv - mv;
        cycle += (r * r).to_f64().unwrap_or(f64::NAN);
        g_cycled.as_slice_mut().expect("contiguous")[i] = two * r;
    }
    let (g_warped_cycle, grad_inverse) = warp_image_backward(&warped, inverse, &g_cycled);
    let g_warped = &g_warped_align + &g_warped_cycle;
    let (_, grad_forward) = warp_image_backward(moving, forward, &g_warped);
    Ok(MappingLoss {
        loss: alignment + cycle,
        alignment,
        cycle,
        grad_forward,
        grad_inverse,
    })
}

/// Paired warping fields with per-pixel residual diagnostics.
pub struct RegistrationResult<S: Scalar> {
    /// Maps the moving image onto the fixed one (pull-back convention).
    pub forward: WarpField<S>,
    /// Maps the fixed image (and labels painted on it) onto the moving one.
    pub inverse: WarpField<S>,
    /// Mean squared intensity error after applying `forward` to moving.
    pub alignment_residual: f64,
    /// Mean squared error after the forward-then-inverse round trip.
    pub cycle_residual: f64,
    /// True when direct optimization hit non-finite loss and fell back to
    /// its best iterate. Learned models always report false.
    pub diverged: bool,
}

/// Converts an nn-layout `(2, H, W)` field into a [`WarpField`].
pub fn field_chw_to_warp<S: Scalar>(field: &Array3<S>) -> Result<WarpField<S>> {
    let (c, h, w) = field.dim();
    if c != 2 {
        return Err(Error::dimension(format!("expected 2 planes, got {c}")));
    }
    let mut out = Array3::<S>::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            out[[y, x, 0]] = field[[0, y, x]];
            out[[y, x, 1]] = field[[1, y, x]];
        }
    }
    WarpField::new(out)
}

/// Converts a [`WarpField`] to the nn layout `(2, H, W)`.
pub fn warp_to_field_chw<S: Scalar>(field: &WarpField<S>) -> Array3<S> {
    let (h, w) = (field.height(), field.width());
    let d = field.displacement();
    let mut out = Array3::<S>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            out[[0, y, x]] = d[[y, x, 0]];
            out[[1, y, x]] = d[[y, x, 1]];
        }
    }
    out
}

fn residuals<S: Scalar>(
    fixed: &Array3<S>,
    moving: &Array3<S>,
    forward: &Array3<S>,
    inverse: &Array3<S>,
) -> (f64, f64) {
    let warped = warp_image(moving, forward);
    let cycled = warp_image(&warped, inverse);
    let count = fixed.len() as f64;
    let mut align = 0.0;
    for (&wv, &fv) in warped.iter().zip(fixed.iter()) {
        let r = (wv - fv).to_f64().unwrap_or(f64::NAN);
        align += r * r;
    }
    let mut cycle = 0.0;
    for (&cv, &mv) in cycled.iter().zip(moving.iter()) {
        let r = (cv - mv).to_f64().unwrap_or(f64::NAN);
        cycle += r * r;
    }
    (align / count, cycle / count)
}

/// Registers `moving` onto `fixed` with a trained mapper.
pub fn register<S: Scalar>(
    model: &MapperModel<S>,
    fixed: &CellPatch<S>,
    moving: &CellPatch<S>,
) -> Result<RegistrationResult<S>> {
    let fixed_gray = fixed.to_gray_chw();
    let moving_gray = moving.to_gray_chw();
    let (w_fwd, w_inv, _) = model.forward(&fixed_gray, &moving_gray)?;
    let (alignment_residual, cycle_residual) = residuals(&fixed_gray, &moving_gray, &w_fwd, &w_inv);
    Ok(RegistrationResult {
        forward: field_chw_to_warp(&w_fwd)?,
        inverse: field_chw_to_warp(&w_inv)?,
        alignment_residual,
        cycle_residual,
        diverged: false,
    })
}

fn avg_pool2<S: Scalar>(x: &Array3<S>) -> Array3<S> {
    let (c, h, w) = x.dim();
    let quarter = cast::<S>(0.25);
    let mut out = Array3::<S>::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h / 2 {
            for x_ in 0..w / 2 {
                let s = x[[ch, 2 * y, 2 * x_]]
                    + x[[ch, 2 * y, 2 * x_ + 1]]
                    + x[[ch, 2 * y + 1, 2 * x_]]
                    + x[[ch, 2 * y + 1, 2 * x_ + 1]];
                out[[ch, y, x_]] = s * quarter;
            }
        }
    }
    out
}

/// Adds `2 * beta * d penalty / d field` for the forward-difference
/// smoothness penalty `sum |grad W|^2`, and returns the penalty value.
fn smoothness_grad<S: Scalar>(field: &Array3<S>, beta: f64, grad: &mut Array3<S>) -> f64 {
    let (c, h, w) = field.dim();
    let two_beta = cast::<S>(2.0 * beta);
    let mut pen = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let d = field[[ch, y, x + 1]] - field[[ch, y, x]];
                    pen += (d * d).to_f64().unwrap_or(f64::NAN);
                    grad[[ch, y, x + 1]] = grad[[ch, y, x + 1]] + two_beta * d;
                    grad[[ch, y, x]] = grad[[ch, y, x]] - two_beta * d;
                }
                if y + 1 < h {
                    let d = field[[ch, y + 1, x]] - field[[ch, y, x]];
                    pen += (d * d).to_f64().unwrap_or(f64::NAN);
                    grad[[ch, y + 1, x]] = grad[[ch, y + 1, x]] + two_beta * d;
                    grad[[ch, y, x]] = grad[[ch, y, x]] - two_beta * d;
                }
            }
        }
    }
    beta * pen
}

/// Registers a pair by direct gradient descent on a free displacement
/// field over an image pyramid. No learned weights; used as a reference
/// the trained variants are compared against.
///
/// Minimizes `sum (fixed - W o moving)^2 + beta sum |grad W|^2` per level
/// with Adam, tracking the best iterate. A non-finite loss aborts the
/// level, keeps the best iterate seen, and sets `diverged`.
pub fn oracle_register<S: Scalar>(
    fixed: &CellPatch<S>,
    moving: &CellPatch<S>,
    smoothness: f64,
    iterations: usize,
) -> Result<RegistrationResult<S>> {
    if fixed.intensities.dim() != moving.intensities.dim() {
        return Err(Error::dimension(format!(
            "fixed {:?} and moving {:?} shapes differ",
            fixed.intensities.dim(),
            moving.intensities.dim()
        )));
    }
    if !(smoothness >= 0.0) || !smoothness.is_finite() {
        return Err(Error::argument(format!("bad smoothness weight {smoothness}")));
    }
    let fixed_gray = fixed.to_gray_chw();
    let moving_gray = moving.to_gray_chw();
    let (_, h, w) = fixed_gray.dim();
    if h < 4 || w < 4 {
        return Err(Error::dimension(format!("images too small to register: {h}x{w}")));
    }

    // Coarse-to-fine pyramid; level 0 is the coarsest.
    let mut fixed_levels = vec![fixed_gray.clone()];
    let mut moving_levels = vec![moving_gray.clone()];
    while fixed_levels.len() < 3 {
        let last = fixed_levels.last().expect("non-empty");
        let (_, lh, lw) = last.dim();
        if lh % 2 != 0 || lw % 2 != 0 || lh.min(lw) < 16 {
            break;
        }
        fixed_levels.push(avg_pool2(fixed_levels.last().expect("non-empty")));
        moving_levels.push(avg_pool2(moving_levels.last().expect("non-empty")));
    }
    fixed_levels.reverse();
    moving_levels.reverse();

    let (_, h0, w0) = fixed_levels[0].dim();
    let mut field = Array3::<S>::zeros((2, h0, w0));
    let mut diverged = false;
    let levels = fixed_levels.len();
    for (level, (fx, mv)) in fixed_levels.iter().zip(moving_levels.iter()).enumerate() {
        let mut opt = Adam::new(0.3);
        let mut best = field.clone();
        let mut best_loss = f64::INFINITY;
        for _ in 0..iterations {
            let warped = warp_image(mv, &field);
            let mut data = 0.0;
            let mut g_warped = Array3::<S>::zeros(warped.dim());
            let two = cast::<S>(2.0);
            for (i, (&wv, &fv)) in warped.iter().zip(fx.iter()).enumerate() {
                let r = wv - fv;
                data += (r * r).to_f64().unwrap_or(f64::NAN);
                g_warped.as_slice_mut().expect("contiguous")[i] = two * r;
            }
            let (_, mut g_field) = warp_image_backward(mv, &field, &g_warped);
            let pen = smoothness_grad(&field, smoothness, &mut g_field);
            let loss = data + pen;
            if !loss.is_finite() {
                diverged = true;
                field = best.clone();
                break;
            }
            if loss < best_loss {
                best_loss = loss;
                best = field.clone();
            }
            opt.begin_step();
            opt.update(0, &mut field, &g_field);
        }
        if !diverged && best_loss.is_finite() {
            // Keep the best iterate rather than the last.
            let warped = warp_image(mv, &field);
            let mut last_loss = 0.0;
            for (&wv, &fv) in warped.iter().zip(fx.iter()) {
                let r = (wv - fv).to_f64().unwrap_or(f64::NAN);
                last_loss += r * r;
            }
            let mut g_unused = Array3::<S>::zeros(field.dim());
            last_loss += smoothness_grad(&field, smoothness, &mut g_unused);
            if !(last_loss <= best_loss) {
                field = best;
            }
        }
        if level + 1 < levels {
            // Displacements are in pixels of the current level; doubling
            // the grid doubles their magnitude.
            field = upsample2(&field).mapv(|v| v * cast::<S>(2.0));
        }
    }

    let forward = field_chw_to_warp(&field)?;
    let (inverse, _) = invert(&forward, 60, 1e-3);
    let inv_chw = warp_to_field_chw(&inverse);
    let (alignment_residual, cycle_residual) =
        residuals(&fixed_gray, &moving_gray, &field, &inv_chw);
    Ok(RegistrationResult { forward, inverse, alignment_residual, cycle_residual, diverged })
}

/// Carries labels painted on the fixed patch onto the moving one by
/// resampling through the inverse field. Under
/// [`crate::bank::augmentation_label_policy`] masks are re-binarized and
/// orientation vectors co-rotate with the warp.
pub fn transfer_label<S: Scalar>(
    result: &RegistrationResult<S>,
    fixed_labels: &LabelStack<S>,
    policy: &InterpPolicy,
) -> Result<LabelStack<S>> {
    apply_warp_labels(&result.inverse, fixed_labels, policy)
}

/// Writes `<name>.fwd.cwt`, `<name>.inv.cwt`, and `<name>.json` with the
/// residual record into `dir`.
pub fn save_registration<S: Scalar>(
    dir: &std::path::Path,
    name: &str,
    result: &RegistrationResult<S>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = FieldMeta::new(None, None);
    save_field(&dir.join(format!("{name}.fwd.cwt")), &result.forward, &meta)?;
    save_field(&dir.join(format!("{name}.inv.cwt")), &result.inverse, &meta)?;
    #[derive(Serialize)]
    struct ResidualRecord {
        alignment_residual: f64,
        cycle_residual: f64,
        diverged: bool,
    }
    let record = ResidualRecord {
        alignment_residual: result.alignment_residual,
        cycle_residual: result.cycle_residual,
        diverged: result.diverged,
    };
    let text = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::format(format!("cannot encode residual record: {e}")))?;
    std::fs::write(dir.join(format!("{name}.json")), text)?;
    Ok(())
}

/// Trains a mapper self-supervised on (archetype, warped archetype)
/// pairs: each pair draws a deformation from `config.augmentation`, warps
/// the archetype into the moving image, and asks the model to undo it.
pub fn train_mapping<S: Scalar>(
    bank: &CellBank<S>,
    config: &MappingTrainConfig,
) -> Result<MapperModel<S>> {
    config.validate()?;
    bank.validate()?;
    if bank.entries.is_empty() {
        return Err(Error::argument("mapping training needs a non-empty bank".to_string()));
    }
    let n = bank.patch_size().expect("non-empty bank");
    let mut model = MapperModel::<S>::init_with_head_scale(
        config.kind,
        n,
        config.integration_steps,
        config.head_init_scale,
        config.seed,
    )?;
    let mut opt = Adam::new(config.learning_rate);
    let mut sampler = HardExampleSampler::new(bank.entries.len(), config.mining_ratio)?;
    let mut batch_rng = substream(config.seed, "mapping-batches");
    let aug_root = derive(config.seed, "mapping-aug");
    let policy = InterpPolicy::for_images();

    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut cycle_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let chosen = sampler.sample_batch(config.batch_size, &mut batch_rng);
        let results: Vec<Result<(f64, f64, MapperGrads<S>, usize)>> = chosen
            .par_iter()
            .enumerate()
            .map(|(slot, &entry_index)| {
                let mut rng: ChaCha8Rng = substream(aug_root, &format!("{epoch}/{slot}"));
                let entry = &bank.entries[entry_index];
                let spec = sample_diffeo(&config.augmentation, &mut rng)?;
                let gt = make_warp::<S>(&spec, n, n)?;
                let moving = apply_warp_patch(&gt, &entry.patch, &policy)?;
                let fixed_gray = entry.patch.to_gray_chw();
                let moving_gray = moving.to_gray_chw();
                let (w_fwd, w_inv, cache) = model.forward(&fixed_gray, &moving_gray)?;
                let loss = mapping_loss(&fixed_gray, &moving_gray, &w_fwd, &w_inv)?;
                let grads = model.backward(&cache, &loss.grad_forward, &loss.grad_inverse);
                Ok((loss.loss, loss.cycle, grads, entry_index))
            })
            .collect();

        let mut total = 0.0;
        let mut cycle_total = 0.0;
        let mut accum: Option<MapperGrads<S>> = None;
        for r in results {
            let (loss, cycle, grads, entry_index) = r?;
            total += loss;
            cycle_total += cycle;
            sampler.record(entry_index, loss);
            match accum.as_mut() {
                None => accum = Some(grads),
                Some(acc) => acc.accumulate(&grads),
            }
        }
        let mean = total / config.batch_size as f64;
        let mean_cycle = cycle_total / config.batch_size as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite mapping loss {mean}"),
            });
        }
        let mut grads = accum.expect("batch_size >= 1");
        grads.scale(cast::<S>(1.0 / config.batch_size as f64));
        opt.begin_step();
        model.apply_update(&mut opt, &grads);
        loss_history.push(mean);
        cycle_history.push(mean_cycle);
    }

    model.fingerprint = crate::invariant::TrainingFingerprint {
        seed: config.seed,
        epochs: config.epochs,
        loss_history,
    };
    model.cycle_history = cycle_history;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct MapperSidecar {
    version: u32,
    kind: String,
    variant: MapperKind,
    input_size: usize,
    integration_steps: usize,
    fingerprint: crate::invariant::TrainingFingerprint,
    cycle_history: Vec<f64>,
}

fn conv_entries<S: Scalar>(
    name: &str,
    c: &Conv2d<S>,
    out: &mut Vec<(String, Vec<usize>, Vec<f32>)>,
) {
    out.push((
        format!("{name}.weight"),
        c.weight.shape().to_vec(),
        c.weight.iter().map(|v| v.to_f32().unwrap_or(0.0)).collect(),
    ));
    out.push((
        format!("{name}.bias"),
        c.bias.shape().to_vec(),
        c.bias.iter().map(|v| v.to_f32().unwrap_or(0.0)).collect(),
    ));
}

fn layer_list<S: Scalar>(params: &Params<S>) -> Vec<(&'static str, &Conv2d<S>)> {
    match params {
        Params::Trunk(p) => {
            let mut v = vec![
                ("c1", &p.c1),
                ("d1", &p.d1),
                ("d2", &p.d2),
                ("bott", &p.bott),
                ("u1", &p.u1),
                ("u2", &p.u2),
                ("head_fwd", &p.head_fwd),
            ];
            if let Some(h) = &p.head_inv {
                v.push(("head_inv", h));
            }
            v
        }
        Params::Corr(p) => vec![
            ("f1", &p.f1),
            ("f2", &p.f2),
            ("f3", &p.f3),
            ("m1", &p.m1),
            ("m2", &p.m2),
            ("u1", &p.u1),
            ("u2", &p.u2),
            ("head_fwd", &p.head_fwd),
            ("head_inv", &p.head_inv),
        ],
    }
}

fn layer_list_mut<S: Scalar>(params: &mut Params<S>) -> Vec<(&'static str, &mut Conv2d<S>)> {
    match params {
        Params::Trunk(p) => {
            let mut v = vec![
                ("c1", &mut p.c1),
                ("d1", &mut p.d1),
                ("d2", &mut p.d2),
                ("bott", &mut p.bott),
                ("u1", &mut p.u1),
                ("u2", &mut p.u2),
                ("head_fwd", &mut p.head_fwd),
            ];
            if let Some(h) = p.head_inv.as_mut() {
                v.push(("head_inv", h));
            }
            v
        }
        Params::Corr(p) => vec![
            ("f1", &mut p.f1),
            ("f2", &mut p.f2),
            ("f3", &mut p.f3),
            ("m1", &mut p.m1),
            ("m2", &mut p.m2),
            ("u1", &mut p.u1),
            ("u2", &mut p.u2),
            ("head_fwd", &mut p.head_fwd),
            ("head_inv", &mut p.head_inv),
        ],
    }
}

/// Saves weights as an f32 tensor pack plus a TOML sidecar.
pub fn save_mapper<S: Scalar>(path: &std::path::Path, model: &MapperModel<S>) -> Result<()> {
    let mut entries = Vec::new();
    for (name, layer) in layer_list(&model.params) {
        conv_entries(name, layer, &mut entries);
    }
    tensor_io::write_tensor_pack(path, &entries)?;
    let sidecar = MapperSidecar {
        version: CHECKPOINT_VERSION,
        kind: "mapper".to_string(),
        variant: model.kind,
        input_size: model.input_size,
        integration_steps: model.integration_steps,
        fingerprint: model.fingerprint.clone(),
        cycle_history: model.cycle_history.clone(),
    };
    let text = toml::to_string_pretty(&sidecar)
        .map_err(|e| Error::format(format!("cannot encode mapper sidecar: {e}")))?;
    std::fs::write(crate::invariant::sidecar_path(path), text)?;
    Ok(())
}

/// Loads a model saved by [`save_mapper`].
pub fn load_mapper<S: Scalar>(path: &std::path::Path) -> Result<MapperModel<S>> {
    let text = std::fs::read_to_string(crate::invariant::sidecar_path(path))
        .map_err(|e| Error::format(format!("cannot read mapper sidecar: {e}")))?;
    let sidecar: MapperSidecar =
        toml::from_str(&text).map_err(|e| Error::format(format!("bad mapper sidecar: {e}")))?;
    if sidecar.version != CHECKPOINT_VERSION || sidecar.kind != "mapper" {
        return Err(Error::format(format!(
            "checkpoint kind/version mismatch: {} v{}",
            sidecar.kind, sidecar.version
        )));
    }
    let mut model = MapperModel::<S>::init(
        sidecar.variant,
        sidecar.input_size,
        sidecar.integration_steps,
        0,
    )?;
    model.fingerprint = sidecar.fingerprint;
    model.cycle_history = sidecar.cycle_history;
    let entries = tensor_io::read_tensor_pack(path)?;
    let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        entries.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
    for (name, layer) in layer_list_mut(&mut model.params) {
        let (wshape, wdata) = by_name
            .remove(&format!("{name}.weight"))
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}.weight")))?;
        if wshape != layer.weight.shape() {
            return Err(Error::format(format!(
                "tensor {name}.weight has shape {wshape:?}, expected {:?}",
                layer.weight.shape()
            )));
        }
        for (dst, src) in layer.weight.iter_mut().zip(wdata.iter()) {
            *dst = cast::<S>(*src as f64);
        }
        let (bshape, bdata) = by_name
            .remove(&format!("{name}.bias"))
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}.bias")))?;
        if bshape != layer.bias.shape() {
            return Err(Error::format(format!(
                "tensor {name}.bias has shape {bshape:?}, expected {:?}",
                layer.bias.shape()
            )));
        }
        for (dst, src) in layer.bias.iter_mut().zip(bdata.iter()) {
            *dst = cast::<S>(*src as f64);
        }
    }
    if !by_name.is_empty() {
        let mut names: Vec<_> = by_name.keys().cloned().collect();
        names.sort();
        return Err(Error::format(format!("checkpoint has unexpected tensors: {names:?}")));
    }
    Ok(model)
}

/// Convenience: predicts fields for two grayscale arrays, without the
/// patch container.
pub fn predict_fields<S: Scalar>(
    model: &MapperModel<S>,
    fixed_gray: &Array3<S>,
    moving_gray: &Array3<S>,
) -> Result<(Array3<S>, Array3<S>)> {
    let (f, i, _) = model.forward(fixed_gray, moving_gray)?;
    Ok((f, i))
}

/// Mean displacement magnitude of a `(2, H, W)` field, in pixels.
pub fn mean_field_magnitude<S: Scalar>(field: &Array3<S>) -> f64 {
    let (_, h, w) = field.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let dx = field[[0, y, x]].to_f64().unwrap_or(f64::NAN);
            let dy = field[[1, y, x]].to_f64().unwrap_or(f64::NAN);
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    total / (h * w) as f64
}
