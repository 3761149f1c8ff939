//! The invariant encoder: a convolutional autoencoder trained so
//! diffeomorphic variants of a cell embed close together, plus matching
//! against the bank in that latent space and retrieval-quality metrics.
//!
//! Training minimizes `reconstruction + lambda * contrastive` where the
//! contrastive positives are (patch, fresh augmentation of the same patch)
//! and the negatives are the other patches in the batch.

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::CellBank;
use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, upsample2, upsample2_backward,
    Adam, Conv2d, Conv2dGrad, HardExampleSampler, Linear, LinearGrad,
};
use crate::num::{cast, Scalar};
use crate::patch::CellPatch;
use crate::rng::{derive, substream};
use crate::tensor_io;
use crate::warp::{apply_warp_patch, make_warp, sample_diffeo, AugmentationConfig, InterpPolicy};

/// Norm floor applied before cosine similarity.
pub const EMBEDDING_NORM_FLOOR: f64 = 1e-8;

/// Training settings for the invariant encoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvariantTrainConfig {
    pub latent_dim: usize,
    /// Softmax temperature of the contrastive term.
    pub temperature: f64,
    /// Patches per batch (each contributes two views).
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the contrastive term against reconstruction.
    pub lambda: f64,
    /// Hard-example mining ratio; 0 disables mining.
    pub mining_ratio: f64,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl Default for InvariantTrainConfig {
    fn default() -> Self {
        InvariantTrainConfig {
            latent_dim: 128,
            temperature: 0.5,
            batch_size: 8,
            epochs: 200,
            learning_rate: 1e-3,
            lambda: 1.0,
            mining_ratio: 0.0,
            augmentation: AugmentationConfig::for_patch(32),
            seed: 0,
        }
    }
}

impl InvariantTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".to_string()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 for the contrastive term".to_string(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.mining_ratio) {
            return Err(Error::Config(format!(
                "mining_ratio {} outside [0, 1]",
                self.mining_ratio
            )));
        }
        self.augmentation.validate()
    }
}

/// Provenance of a trained model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingFingerprint {
    pub seed: u64,
    pub epochs: usize,
    pub loss_history: Vec<f64>,
}

/// Convolutional autoencoder with a D-dimensional bottleneck.
///
/// Encoder: four stride-2 convolutions (widths 16, 32, 64, 64) and a
/// linear bottleneck; decoder mirrors with nearest upsampling and ends in
/// a sigmoid. Input is `(1, n, n)` with `n` divisible by 16.
#[derive(Clone, Debug)]
pub struct EncoderModel<S: Scalar> {
    pub input_size: usize,
    pub latent_dim: usize,
    conv1: Conv2d<S>,
    conv2: Conv2d<S>,
    conv3: Conv2d<S>,
    conv4: Conv2d<S>,
    fc_enc: Linear<S>,
    fc_dec: Linear<S>,
    dconv1: Conv2d<S>,
    dconv2: Conv2d<S>,
    dconv3: Conv2d<S>,
    dconv4: Conv2d<S>,
    out_conv: Conv2d<S>,
    pub fingerprint: TrainingFingerprint,
}

const ENC_WIDTHS: [usize; 4] = [16, 32, 64, 64];

/// Activations retained for one backward pass.
pub struct EncoderCache<S: Scalar> {
    x: Array3<S>,
    pre: [Array3<S>; 4],
    post: [Array3<S>; 4],
    flat: Array1<S>,
    z: Array1<S>,
    dec_pre: Array1<S>,
    dec_in: [Array3<S>; 4],
    dec_conv_pre: [Array3<S>; 4],
    dec_post: [Array3<S>; 4],
    recon: Array3<S>,
}

/// Parameter gradients of the full autoencoder.
pub struct EncoderGrads<S: Scalar> {
    conv: [Conv2dGrad<S>; 4],
    fc_enc: LinearGrad<S>,
    fc_dec: LinearGrad<S>,
    dconv: [Conv2dGrad<S>; 4],
    out_conv: Conv2dGrad<S>,
}

impl<S: Scalar> EncoderGrads<S> {
    fn zeros_like(model: &EncoderModel<S>) -> Self {
        EncoderGrads {
            conv: [
                Conv2dGrad::zeros_like(&model.conv1),
                Conv2dGrad::zeros_like(&model.conv2),
                Conv2dGrad::zeros_like(&model.conv3),
                Conv2dGrad::zeros_like(&model.conv4),
            ],
            fc_enc: LinearGrad::zeros_like(&model.fc_enc),
            fc_dec: LinearGrad::zeros_like(&model.fc_dec),
            dconv: [
                Conv2dGrad::zeros_like(&model.dconv1),
                Conv2dGrad::zeros_like(&model.dconv2),
                Conv2dGrad::zeros_like(&model.dconv3),
                Conv2dGrad::zeros_like(&model.dconv4),
            ],
            out_conv: Conv2dGrad::zeros_like(&model.out_conv),
        }
    }

    fn accumulate(&mut self, other: &EncoderGrads<S>) {
        for (a, b) in self.conv.iter_mut().zip(other.conv.iter()) {
            a.accumulate(b);
        }
        self.fc_enc.accumulate(&other.fc_enc);
        self.fc_dec.accumulate(&other.fc_dec);
        for (a, b) in self.dconv.iter_mut().zip(other.dconv.iter()) {
            a.accumulate(b);
        }
        self.out_conv.accumulate(&other.out_conv);
    }
}

impl<S: Scalar> EncoderModel<S> {
    /// Fresh model with He-uniform weights drawn from per-layer substreams
    /// of `seed`.
    pub fn init(input_size: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if input_size % 16 != 0 || input_size == 0 {
            return Err(Error::Config(format!(
                "encoder input size {input_size} must be a positive multiple of 16"
            )));
        }
        if latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".to_string()));
        }
        let root = derive(seed, "encoder-init");
        let stream = |name: &str| substream(root, name);
        let bottleneck = input_size / 16;
        let flat = ENC_WIDTHS[3] * bottleneck * bottleneck;
        Ok(EncoderModel {
            input_size,
            latent_dim,
            conv1: Conv2d::new(1, ENC_WIDTHS[0], 3, 2, 1, &mut stream("conv1")),
            conv2: Conv2d::new(ENC_WIDTHS[0], ENC_WIDTHS[1], 3, 2, 1, &mut stream("conv2")),
            conv3: Conv2d::new(ENC_WIDTHS[1], ENC_WIDTHS[2], 3, 2, 1, &mut stream("conv3")),
            conv4: Conv2d::new(ENC_WIDTHS[2], ENC_WIDTHS[3], 3, 2, 1, &mut stream("conv4")),
            fc_enc: Linear::new(flat, latent_dim, &mut stream("fc_enc")),
            fc_dec: Linear::new(latent_dim, flat, &mut stream("fc_dec")),
            dconv1: Conv2d::new(ENC_WIDTHS[3], ENC_WIDTHS[2], 3, 1, 1, &mut stream("dconv1")),
            dconv2: Conv2d::new(ENC_WIDTHS[2], ENC_WIDTHS[1], 3, 1, 1, &mut stream("dconv2")),
            dconv3: Conv2d::new(ENC_WIDTHS[1], ENC_WIDTHS[0], 3, 1, 1, &mut stream("dconv3")),
            dconv4: Conv2d::new(ENC_WIDTHS[0], ENC_WIDTHS[0], 3, 1, 1, &mut stream("dconv4")),
            out_conv: Conv2d::new(ENC_WIDTHS[0], 1, 3, 1, 1, &mut stream("out_conv")),
            fingerprint: TrainingFingerprint { seed, epochs: 0, loss_history: Vec::new() },
        })
    }

    fn check_input(&self, x: &Array3<S>) -> Result<()> {
        if x.dim() != (1, self.input_size, self.input_size) {
            return Err(Error::dimension(format!(
                "encoder expects (1, {n}, {n}) input, got {:?}",
                x.dim(),
                n = self.input_size
            )));
        }
        Ok(())
    }

    /// Encoder half only: input to latent vector.
    pub fn encode(&self, x: &Array3<S>) -> Result<Array1<S>> {
        self.check_input(x)?;
        let e1 = leaky_relu(&self.conv1.forward(x));
        let e2 = leaky_relu(&self.conv2.forward(&e1));
        let e3 = leaky_relu(&self.conv3.forward(&e2));
        let e4 = leaky_relu(&self.conv4.forward(&e3));
        let flat = Array1::from_iter(e4.iter().copied());
        Ok(self.fc_enc.forward(&flat))
    }

    /// Full forward pass retaining every activation for backward.
    pub fn forward(&self, x: &Array3<S>) -> Result<(Array1<S>, Array3<S>, EncoderCache<S>)> {
        self.check_input(x)?;
        let convs = [&self.conv1, &self.conv2, &self.conv3, &self.conv4];
        let mut pre: Vec<Array3<S>> = Vec::with_capacity(4);
        let mut post: Vec<Array3<S>> = Vec::with_capacity(4);
        let mut cur = x.clone();
        for conv in convs {
            let a = conv.forward(&cur);
            let e = leaky_relu(&a);
            pre.push(a);
            cur = e.clone();
            post.push(e);
        }
        let flat = Array1::from_iter(cur.iter().copied());
        let z = self.fc_enc.forward(&flat);

        let dec_pre = self.fc_dec.forward(&z);
        let b = self.input_size / 16;
        let h = leaky_relu(&dec_pre)
            .into_shape_with_order((ENC_WIDTHS[3], b, b))
            .expect("bottleneck reshape");
        let dconvs = [&self.dconv1, &self.dconv2, &self.dconv3, &self.dconv4];
        let mut dec_in: Vec<Array3<S>> = Vec::with_capacity(4);
        let mut dec_conv_pre: Vec<Array3<S>> = Vec::with_capacity(4);
        let mut dec_post: Vec<Array3<S>> = Vec::with_capacity(4);
        let mut cur = h;
        for conv in dconvs {
            let up = upsample2(&cur);
            let a = conv.forward(&up);
            let e = leaky_relu(&a);
            dec_in.push(up);
            dec_conv_pre.push(a);
            cur = e.clone();
            dec_post.push(e);
        }
        let out_pre = self.out_conv.forward(&cur);
        let recon = sigmoid(&out_pre);
        let into4 = |v: Vec<Array3<S>>| -> [Array3<S>; 4] {
            v.try_into().map_err(|_| ()).expect("four stages")
        };
        let cache = EncoderCache {
            x: x.clone(),
            pre: into4(pre),
            post: into4(post),
            flat,
            z: z.clone(),
            dec_pre,
            dec_in: into4(dec_in),
            dec_conv_pre: into4(dec_conv_pre),
            dec_post: into4(dec_post),
            recon: recon.clone(),
        };
        Ok((z, recon, cache))
    }

    /// Backward through decoder and encoder, combining the gradient on the
    /// latent vector with the gradient on the reconstruction.
    pub fn backward(
        &self,
        cache: &EncoderCache<S>,
        grad_z: &Array1<S>,
        grad_recon: &Array3<S>,
    ) -> EncoderGrads<S> {
        let mut grads = EncoderGrads::zeros_like(self);

        // Output stage.
        let g = sigmoid_backward(&cache.recon, grad_recon);
        let (g, out_g) = self.out_conv.backward(&cache.dec_post[3], &g);
        grads.out_conv = out_g;

        // Decoder stack, reversed.
        let dconvs = [&self.dconv1, &self.dconv2, &self.dconv3, &self.dconv4];
        let mut g = g;
        for idx in (0..4).rev() {
            let g_pre = leaky_relu_backward(&cache.dec_conv_pre[idx], &g);
            let (g_up, conv_g) = dconvs[idx].backward(&cache.dec_in[idx], &g_pre);
            grads.dconv[idx] = conv_g;
            g = upsample2_backward(&g_up);
        }

        // Bottleneck: g is (64, b, b) on the reshaped post-activation.
        let g_flat = Array1::from_iter(g.iter().copied());
        let g_dec_pre = leaky_relu_backward(&cache.dec_pre, &g_flat);
        let (g_z_from_dec, fc_dec_g) = self.fc_dec.backward(&cache.z, &g_dec_pre);
        grads.fc_dec = fc_dec_g;

        let g_z_total = grad_z + &g_z_from_dec;
        let (g_flat_enc, fc_enc_g) = self.fc_enc.backward(&cache.flat, &g_z_total);
        grads.fc_enc = fc_enc_g;

        // Encoder stack, reversed.
        let convs = [&self.conv1, &self.conv2, &self.conv3, &self.conv4];
        let e4_dim = cache.post[3].dim();
        let mut g = g_flat_enc.into_shape_with_order(e4_dim).expect("conv4 grad reshape");
        for idx in (0..4).rev() {
            let g_pre = leaky_relu_backward(&cache.pre[idx], &g);
            let input = if idx == 0 { &cache.x } else { &cache.post[idx - 1] };
            let (g_in, conv_g) = convs[idx].backward(input, &g_pre);
            grads.conv[idx] = conv_g;
            g = g_in;
        }
        grads
    }

    /// Embeds an annotated patch; channel-averaged input.
    pub fn embed(&self, patch: &CellPatch<S>) -> Result<Array1<S>> {
        let z = self.encode(&patch.to_gray_chw())?;
        let norm = z.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric("embedding has non-finite entries".to_string()));
        }
        Ok(z)
    }

    /// Runs the autoencoder and returns the reconstruction.
    pub fn reconstruct(&self, patch: &CellPatch<S>) -> Result<Array3<S>> {
        let (_, recon, _) = self.forward(&patch.to_gray_chw())?;
        Ok(recon)
    }

    fn apply_update(&mut self, opt: &mut Adam, grads: &EncoderGrads<S>) {
        let convs = [&mut self.conv1, &mut self.conv2, &mut self.conv3, &mut self.conv4];
        let mut slot = 0;
        for (layer, grad) in convs.into_iter().zip(grads.conv.iter()) {
            opt.update(slot, &mut layer.weight, &grad.weight);
            opt.update(slot + 1, &mut layer.bias, &grad.bias);
            slot += 2;
        }
        opt.update(slot, &mut self.fc_enc.weight, &grads.fc_enc.weight);
        opt.update(slot + 1, &mut self.fc_enc.bias, &grads.fc_enc.bias);
        opt.update(slot + 2, &mut self.fc_dec.weight, &grads.fc_dec.weight);
        opt.update(slot + 3, &mut self.fc_dec.bias, &grads.fc_dec.bias);
        slot += 4;
        let dconvs = [&mut self.dconv1, &mut self.dconv2, &mut self.dconv3, &mut self.dconv4];
        for (layer, grad) in dconvs.into_iter().zip(grads.dconv.iter()) {
            opt.update(slot, &mut layer.weight, &grad.weight);
            opt.update(slot + 1, &mut layer.bias, &grad.bias);
            slot += 2;
        }
        opt.update(slot, &mut self.out_conv.weight, &grads.out_conv.weight);
        opt.update(slot + 1, &mut self.out_conv.bias, &grads.out_conv.bias);
    }

    /// Casts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> EncoderModel<T> {
        let conv = |c: &Conv2d<S>| Conv2d {
            weight: c.weight.mapv(|v| cast::<T>(v.to_f64().unwrap_or(0.0))),
            bias: c.bias.mapv(|v| cast::<T>(v.to_f64().unwrap_or(0.0))),
            stride: c.stride,
            padding: c.padding,
        };
        let lin = |l: &Linear<S>| Linear {
            weight: l.weight.mapv(|v| cast::<T>(v.to_f64().unwrap_or(0.0))),
            bias: l.bias.mapv(|v| cast::<T>(v.to_f64().unwrap_or(0.0))),
        };
        EncoderModel {
            input_size: self.input_size,
            latent_dim: self.latent_dim,
            conv1: conv(&self.conv1),
            conv2: conv(&self.conv2),
            conv3: conv(&self.conv3),
            conv4: conv(&self.conv4),
            fc_enc: lin(&self.fc_enc),
            fc_dec: lin(&self.fc_dec),
            dconv1: conv(&self.dconv1),
            dconv2: conv(&self.dconv2),
            dconv3: conv(&self.dconv3),
            dconv4: conv(&self.dconv4),
            out_conv: conv(&self.out_conv),
            fingerprint: self.fingerprint.clone(),
        }
    }

    /// Gradient of `loss = grad_z . encode(x)` with respect to the input
    /// image: the encoder's vector-Jacobian product, used by the Lipschitz
    /// probes.
    pub fn encode_vjp(&self, x: &Array3<S>, grad_z: &Array1<S>) -> Result<Array3<S>> {
        let (_, _, cache) = self.forward(x)?;
        let (g_flat_enc, _) = self.fc_enc.backward(&cache.flat, grad_z);
        let convs = [&self.conv1, &self.conv2, &self.conv3, &self.conv4];
        let mut g = g_flat_enc
            .into_shape_with_order(cache.post[3].dim())
            .expect("conv4 grad reshape");
        for idx in (0..4).rev() {
            let g_pre = leaky_relu_backward(&cache.pre[idx], &g);
            let input = if idx == 0 { &cache.x } else { &cache.post[idx - 1] };
            let (g_in, _) = convs[idx].backward(input, &g_pre);
            g = g_in;
        }
        Ok(g)
    }
}

/// Contrastive loss output: value, gradient, and per-anchor terms.
pub struct NtXent<S: Scalar> {
    pub loss: S,
    pub grad: Array2<S>,
    pub per_anchor: Vec<f64>,
}

/// Normalized-temperature cross entropy over `2N` embeddings arranged as
/// `N` adjacent positive pairs `(2k, 2k+1)`.
pub fn nt_xent_loss<S: Scalar>(embeddings: &Array2<S>, temperature: f64) -> Result<NtXent<S>> {
    let (rows, dim) = embeddings.dim();
    if rows < 2 || rows % 2 != 0 {
        return Err(Error::argument(format!(
            "need 2N >= 2 embeddings in positive pairs, got {rows}"
        )));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::argument(format!("temperature {temperature} must be > 0")));
    }
    let mut norms = vec![0.0f64; rows];
    for (i, row) in embeddings.axis_iter(Axis(0)).enumerate() {
        let sq: f64 = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum();
        if !sq.is_finite() {
            return Err(Error::numeric(format!("embedding {i} is not finite")));
        }
        if sq == 0.0 {
            return Err(Error::numeric(format!("embedding {i} has zero norm")));
        }
        norms[i] = sq.sqrt().max(EMBEDDING_NORM_FLOOR);
    }
    // Unit rows in f64 for a stable softmax.
    let unit = Array2::from_shape_fn((rows, dim), |(i, d)| {
        embeddings[[i, d]].to_f64().unwrap_or(0.0) / norms[i]
    });
    let sim = unit.dot(&unit.t());
    let inv_t = 1.0 / temperature;
    let scale = 1.0 / rows as f64;

    let mut per_anchor = vec![0.0f64; rows];
    // dL/d sim, accumulated for both occurrences of each ordered pair.
    let mut grad_sim = Array2::<f64>::zeros((rows, rows));
    for i in 0..rows {
        let pos = i ^ 1;
        let mut max_logit = f64::NEG_INFINITY;
        for k in 0..rows {
            if k != i {
                max_logit = max_logit.max(sim[[i, k]] * inv_t);
            }
        }
        let mut den = 0.0;
        for k in 0..rows {
            if k != i {
                den += ((sim[[i, k]] * inv_t) - max_logit).exp();
            }
        }
        let log_den = max_logit + den.ln();
        per_anchor[i] = log_den - sim[[i, pos]] * inv_t;
        for k in 0..rows {
            if k == i {
                continue;
            }
            let p = ((sim[[i, k]] * inv_t) - log_den).exp();
            let delta = if k == pos { 1.0 } else { 0.0 };
            grad_sim[[i, k]] += scale * inv_t * (p - delta);
        }
    }
    let loss = per_anchor.iter().sum::<f64>() * scale;

    // Chain through sim = u u^T and the normalization u = z / r.
    let grad_unit = {
        let mut g = Array2::<f64>::zeros((rows, dim));
        for i in 0..rows {
            for k in 0..rows {
                let a = grad_sim[[i, k]];
                if a != 0.0 {
                    for d in 0..dim {
                        g[[i, d]] += a * unit[[k, d]];
                        g[[k, d]] += a * unit[[i, d]];
                    }
                }
            }
        }
        g
    };
    let mut grad = Array2::<S>::zeros((rows, dim));
    for i in 0..rows {
        let raw_norm: f64 = (0..dim)
            .map(|d| embeddings[[i, d]].to_f64().unwrap_or(0.0).powi(2))
            .sum::<f64>()
            .sqrt();
        if raw_norm > EMBEDDING_NORM_FLOOR {
            let dot: f64 = (0..dim).map(|d| unit[[i, d]] * grad_unit[[i, d]]).sum();
            for d in 0..dim {
                grad[[i, d]] = cast::<S>((grad_unit[[i, d]] - unit[[i, d]] * dot) / norms[i]);
            }
        } else {
            // Below the floor the normalization is linear: u = z / floor.
            for d in 0..dim {
                grad[[i, d]] = cast::<S>(grad_unit[[i, d]] / EMBEDDING_NORM_FLOOR);
            }
        }
    }
    Ok(NtXent { loss: cast::<S>(loss), grad, per_anchor })
}

/// Reconstruction loss output: value, per-sample gradients, per-sample
/// errors.
pub struct ReconLoss<S: Scalar> {
    pub loss: S,
    pub grads: Vec<Array3<S>>,
    pub per_sample: Vec<f64>,
}

/// Mean over the batch of the summed squared pixel error.
pub fn reconstruction_loss<S: Scalar>(
    inputs: &[Array3<S>],
    reconstructions: &[Array3<S>],
) -> Result<ReconLoss<S>> {
    if inputs.len() != reconstructions.len() || inputs.is_empty() {
        return Err(Error::dimension(format!(
            "got {} inputs and {} reconstructions",
            inputs.len(),
            reconstructions.len()
        )));
    }
    let n = inputs.len() as f64;
    let mut per_sample = Vec::with_capacity(inputs.len());
    let mut grads = Vec::with_capacity(inputs.len());
    for (x, xhat) in inputs.iter().zip(reconstructions.iter()) {
        if x.dim() != xhat.dim() {
            return Err(Error::dimension(format!(
                "input {:?} vs reconstruction {:?}",
                x.dim(),
                xhat.dim()
            )));
        }
        let mut err = 0.0f64;
        let mut grad = Array3::<S>::zeros(x.dim());
        ndarray::Zip::from(&mut grad).and(x).and(xhat).for_each(|g, &xv, &rv| {
            let d = rv - xv;
            err += d.to_f64().unwrap_or(0.0).powi(2);
            *g = (d + d) * cast::<S>(1.0 / n);
        });
        per_sample.push(err);
        grads.push(grad);
    }
    let loss = per_sample.iter().sum::<f64>() / n;
    Ok(ReconLoss { loss: cast::<S>(loss), grads, per_sample })
}

/// Trains the invariant encoder on the bank's archetypes.
pub fn train_invariant<S: Scalar>(
    bank: &CellBank<S>,
    cfg: &InvariantTrainConfig,
) -> Result<EncoderModel<S>> {
    cfg.validate()?;
    if bank.entries.len() < 2 {
        return Err(Error::argument(
            "contrastive training needs at least 2 archetypes".to_string(),
        ));
    }
    let size = bank.patch_size().expect("non-empty bank");
    let mut model = EncoderModel::<S>::init(size, cfg.latent_dim, cfg.seed)?;
    let n = bank.entries.len();
    let batch = cfg.batch_size.min(n).max(2);
    let gray: Vec<Array3<S>> =
        bank.entries.iter().map(|e| e.patch.to_gray_chw()).collect();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut sampler = HardExampleSampler::new(n, cfg.mining_ratio)?;
    let aug_root = derive(cfg.seed, "invariant-aug");
    let pick_root = derive(cfg.seed, "invariant-batch");
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let chosen = select_batch(&sampler, n, batch, &mut substream(pick_root, &epoch.to_string()));
        // Two views per entry: the patch itself and a fresh augmentation.
        let views: Vec<(usize, Array3<S>)> = chosen
            .par_iter()
            .map(|&j| -> Result<Vec<(usize, Array3<S>)>> {
                let mut rng = substream(aug_root, &format!("{epoch}/{j}"));
                let spec = sample_diffeo(&cfg.augmentation, &mut rng)?;
                let field = make_warp::<S>(&spec, size, size)?;
                let augmented = apply_warp_patch(
                    &field,
                    &bank.entries[j].patch,
                    &InterpPolicy::for_images(),
                )?;
                Ok(vec![(j, gray[j].clone()), (j, augmented.to_gray_chw())])
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();

        let passes: Vec<(Array1<S>, EncoderCache<S>)> = views
            .par_iter()
            .map(|(_, x)| {
                let (z, _, cache) = model.forward(x)?;
                Ok((z, cache))
            })
            .collect::<Result<Vec<_>>>()?;

        let dim = cfg.latent_dim;
        let mut z_matrix = Array2::<S>::zeros((passes.len(), dim));
        for (row, (z, _)) in passes.iter().enumerate() {
            z_matrix.row_mut(row).assign(z);
        }
        let contrastive = nt_xent_loss(&z_matrix, cfg.temperature)?;
        let inputs: Vec<Array3<S>> = views.iter().map(|(_, x)| x.clone()).collect();
        let recons: Vec<Array3<S>> = passes.iter().map(|(_, c)| c.recon.clone()).collect();
        let recon = reconstruction_loss(&inputs, &recons)?;
        let total = recon.loss.to_f64().unwrap_or(f64::NAN)
            + cfg.lambda * contrastive.loss.to_f64().unwrap_or(f64::NAN);
        if !total.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("loss became non-finite ({total})"),
            });
        }

        let lambda = cast::<S>(cfg.lambda);
        let per_view: Vec<EncoderGrads<S>> = passes
            .par_iter()
            .enumerate()
            .map(|(row, (_, cache))| {
                let gz = contrastive.grad.row(row).mapv(|v| v * lambda);
                model.backward(cache, &gz.to_owned(), &recon.grads[row])
            })
            .collect();
        let mut grads = EncoderGrads::zeros_like(&model);
        for g in &per_view {
            grads.accumulate(g);
        }
        opt.begin_step();
        model.apply_update(&mut opt, &grads);

        for (slot, &j) in chosen.iter().enumerate() {
            let a = 2 * slot;
            let entry_loss = recon.per_sample[a]
                + recon.per_sample[a + 1]
                + cfg.lambda * (contrastive.per_anchor[a] + contrastive.per_anchor[a + 1]);
            sampler.record(j, entry_loss);
        }
        history.push(total);
    }
    model.fingerprint =
        TrainingFingerprint { seed: cfg.seed, epochs: cfg.epochs, loss_history: history };
    Ok(model)
}

/// Draws `batch` distinct entry indices, honoring the mining bias.
fn select_batch(
    sampler: &HardExampleSampler,
    n: usize,
    batch: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let want = batch.min(n);
    let mut chosen: Vec<usize> = Vec::with_capacity(want);
    for candidate in sampler.sample_batch(4 * want, rng) {
        if !chosen.contains(&candidate) {
            chosen.push(candidate);
            if chosen.len() == want {
                return chosen;
            }
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|j| !chosen.contains(j)).collect();
    rest.shuffle(rng);
    chosen.extend(rest.into_iter().take(want - chosen.len()));
    chosen
}

/// Embeds a list of patches into a row-per-patch matrix, fanning out
/// across workers and merging by index.
pub fn embed_patches<S: Scalar>(
    model: &EncoderModel<S>,
    patches: &[&CellPatch<S>],
) -> Result<Array2<S>> {
    if patches.is_empty() {
        return Ok(Array2::zeros((0, model.latent_dim)));
    }
    let rows: Vec<Array1<S>> =
        patches.par_iter().map(|p| model.embed(p)).collect::<Result<Vec<_>>>()?;
    let mut out = Array2::<S>::zeros((rows.len(), model.latent_dim));
    for (i, row) in rows.iter().enumerate() {
        out.row_mut(i).assign(row);
    }
    Ok(out)
}

/// Computes and caches embeddings for the bank's augmented records and
/// background patches.
pub fn embed_bank<S: Scalar>(model: &EncoderModel<S>, bank: &mut CellBank<S>) -> Result<()> {
    let records: Vec<&CellPatch<S>> = bank.augmented.iter().map(|r| &r.patch).collect();
    bank.embeddings = Some(embed_patches(model, &records)?);
    if !bank.background.is_empty() {
        let bg: Vec<&CellPatch<S>> = bank.background.iter().collect();
        bank.background_embeddings = Some(embed_patches(model, &bg)?);
    }
    Ok(())
}

/// Outcome of matching a query against the bank.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// Archetype index j.
    pub entry_index: usize,
    /// Augmentation index i.
    pub augmentation_index: usize,
    /// Flat record index j*m + i.
    pub record_index: usize,
    pub latent_distance: f64,
    pub cosine_distance: f64,
}

fn l2_f64<S: Scalar>(a: ndarray::ArrayView1<S>, b: ndarray::ArrayView1<S>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x.to_f64().unwrap_or(0.0) - y.to_f64().unwrap_or(0.0)).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn cosine_distance_f64<S: Scalar>(a: ndarray::ArrayView1<S>, b: ndarray::ArrayView1<S>) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.to_f64().unwrap_or(0.0), y.to_f64().unwrap_or(0.0));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt().max(EMBEDDING_NORM_FLOOR) * nb.sqrt().max(EMBEDDING_NORM_FLOOR))
}

/// Matches a query patch to the closest augmented record by latent L2;
/// ties resolve to the smallest (j, i).
pub fn match_patch<S: Scalar>(
    model: &EncoderModel<S>,
    query: &CellPatch<S>,
    bank: &CellBank<S>,
) -> Result<MatchOutcome> {
    if bank.augmented.is_empty() {
        return Err(Error::argument("cannot match against an empty bank".to_string()));
    }
    let query_z = model.embed(query)?;
    let owned;
    let embeddings = match &bank.embeddings {
        Some(e) => e,
        None => {
            let records: Vec<&CellPatch<S>> = bank.augmented.iter().map(|r| &r.patch).collect();
            owned = embed_patches(model, &records)?;
            &owned
        }
    };
    if embeddings.dim().0 != bank.augmented.len() {
        return Err(Error::dimension(
            "cached embeddings do not cover the augmented records".to_string(),
        ));
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (idx, row) in embeddings.axis_iter(Axis(0)).enumerate() {
        // Records are stored j-major, so strict < realizes the (j, i)
        // lexicographic tie-break.
        let d = l2_f64(query_z.view(), row);
        if d < best_dist {
            best_dist = d;
            best = idx;
        }
    }
    let m = bank.augmentations_per_entry.max(1);
    Ok(MatchOutcome {
        entry_index: bank.augmented[best].entry_index,
        augmentation_index: best % m,
        record_index: best,
        latent_distance: best_dist,
        cosine_distance: cosine_distance_f64(query_z.view(), embeddings.row(best)),
    })
}

/// Mean average precision of same-label retrieval under leave-one-out
/// latent L2 ranking. Empty `cutoffs` scores the full ranking; otherwise
/// the AP is truncated at each cutoff and averaged.
pub fn map_metric<S: Scalar>(
    embeddings: &Array2<S>,
    labels: &[usize],
    cutoffs: &[usize],
) -> Result<f64> {
    let rows = embeddings.dim().0;
    if rows != labels.len() || rows < 2 {
        return Err(Error::argument(format!(
            "need >= 2 embeddings with labels, got {rows} embeddings and {} labels",
            labels.len()
        )));
    }
    let distinct = {
        let mut sorted: Vec<usize> = labels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        sorted.len()
    };
    if distinct < 2 {
        log::warn!("map_metric: single class present, score degenerates to 1");
        return Ok(1.0);
    }
    let full = [rows - 1];
    let cutoffs: &[usize] = if cutoffs.is_empty() { &full } else { cutoffs };
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for q in 0..rows {
        let mut order: Vec<usize> = (0..rows).filter(|&i| i != q).collect();
        order.sort_by(|&a, &b| {
            l2_f64(embeddings.row(q), embeddings.row(a))
                .total_cmp(&l2_f64(embeddings.row(q), embeddings.row(b)))
                .then(a.cmp(&b))
        });
        let relevant_total = order.iter().filter(|&&i| labels[i] == labels[q]).count();
        if relevant_total == 0 {
            continue;
        }
        for &cutoff in cutoffs {
            let cutoff = cutoff.min(order.len()).max(1);
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            for (rank, &i) in order.iter().take(cutoff).enumerate() {
                if labels[i] == labels[q] {
                    hits += 1;
                    precision_sum += hits as f64 / (rank + 1) as f64;
                }
            }
            let denom = relevant_total.min(cutoff) as f64;
            ap_sum += precision_sum / denom;
            ap_count += 1;
        }
    }
    if ap_count == 0 {
        return Err(Error::argument("no query has a relevant neighbor".to_string()));
    }
    Ok(ap_sum / ap_count as f64)
}

/// Fraction of queries whose majority label among the k nearest bank
/// records matches the ground truth; vote ties resolve to the class of
/// the nearest tied member.
pub fn knn_match_accuracy<S: Scalar>(
    model: &EncoderModel<S>,
    bank: &CellBank<S>,
    queries: &[(CellPatch<S>, usize)],
    k: usize,
) -> Result<f64> {
    if k == 0 || k > bank.augmented.len() {
        return Err(Error::argument(format!(
            "k = {k} outside 1..={} bank records",
            bank.augmented.len()
        )));
    }
    if queries.is_empty() {
        return Err(Error::argument("no queries given".to_string()));
    }
    let owned;
    let embeddings = match &bank.embeddings {
        Some(e) => e,
        None => {
            let records: Vec<&CellPatch<S>> = bank.augmented.iter().map(|r| &r.patch).collect();
            owned = embed_patches(model, &records)?;
            &owned
        }
    };
    let mut correct = 0usize;
    for (patch, truth) in queries {
        let z = model.embed(patch)?;
        let mut order: Vec<usize> = (0..bank.augmented.len()).collect();
        order.sort_by(|&a, &b| {
            l2_f64(z.view(), embeddings.row(a))
                .total_cmp(&l2_f64(z.view(), embeddings.row(b)))
                .then(a.cmp(&b))
        });
        let neighbors = &order[..k];
        let mut votes: Vec<(usize, usize, usize)> = Vec::new(); // (label, count, best_rank)
        for (rank, &idx) in neighbors.iter().enumerate() {
            let label = bank.augmented[idx].entry_index;
            match votes.iter_mut().find(|(l, _, _)| *l == label) {
                Some((_, count, _)) => *count += 1,
                None => votes.push((label, 1, rank)),
            }
        }
        votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        if votes[0].0 == *truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EncoderSidecar {
    version: u32,
    kind: String,
    input_size: usize,
    latent_dim: usize,
    fingerprint: TrainingFingerprint,
}

fn tensor_entries<S: Scalar>(model: &EncoderModel<S>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    let conv = |name: &str, c: &Conv2d<S>, out: &mut Vec<(String, Vec<usize>, Vec<f32>)>| {
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
    };
    let lin = |name: &str, l: &Linear<S>, out: &mut Vec<(String, Vec<usize>, Vec<f32>)>| {
        out.push((
            format!("{name}.weight"),
            l.weight.shape().to_vec(),
            l.weight.iter().map(|v| v.to_f32().unwrap_or(0.0)).collect(),
        ));
        out.push((
            format!("{name}.bias"),
            l.bias.shape().to_vec(),
            l.bias.iter().map(|v| v.to_f32().unwrap_or(0.0)).collect(),
        ));
    };
    conv("conv1", &model.conv1, &mut out);
    conv("conv2", &model.conv2, &mut out);
    conv("conv3", &model.conv3, &mut out);
    conv("conv4", &model.conv4, &mut out);
    lin("fc_enc", &model.fc_enc, &mut out);
    lin("fc_dec", &model.fc_dec, &mut out);
    conv("dconv1", &model.dconv1, &mut out);
    conv("dconv2", &model.dconv2, &mut out);
    conv("dconv3", &model.dconv3, &mut out);
    conv("dconv4", &model.dconv4, &mut out);
    conv("out_conv", &model.out_conv, &mut out);
    out
}

/// Saves the model as a tensor pack plus a TOML sidecar at `path.toml`.
pub fn save_encoder<S: Scalar>(path: &std::path::Path, model: &EncoderModel<S>) -> Result<()> {
    tensor_io::write_tensor_pack(path, &tensor_entries(model))?;
    let sidecar = EncoderSidecar {
        version: CHECKPOINT_VERSION,
        kind: "encoder".to_string(),
        input_size: model.input_size,
        latent_dim: model.latent_dim,
        fingerprint: model.fingerprint.clone(),
    };
    let text = toml::to_string_pretty(&sidecar)
        .map_err(|e| Error::format(format!("cannot encode encoder sidecar: {e}")))?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub(crate) fn sidecar_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".toml");
    std::path::PathBuf::from(s)
}

/// Loads a model saved by [`save_encoder`].
pub fn load_encoder<S: Scalar>(path: &std::path::Path) -> Result<EncoderModel<S>> {
    let text = std::fs::read_to_string(sidecar_path(path))
        .map_err(|e| Error::format(format!("cannot read encoder sidecar: {e}")))?;
    let sidecar: EncoderSidecar =
        toml::from_str(&text).map_err(|e| Error::format(format!("bad encoder sidecar: {e}")))?;
    if sidecar.version != CHECKPOINT_VERSION || sidecar.kind != "encoder" {
        return Err(Error::format(format!(
            "checkpoint kind/version mismatch: {} v{}",
            sidecar.kind, sidecar.version
        )));
    }
    let mut model = EncoderModel::<S>::init(sidecar.input_size, sidecar.latent_dim, 0)?;
    model.fingerprint = sidecar.fingerprint;
    let entries = tensor_io::read_tensor_pack(path)?;
    let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        entries.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        by_name
            .remove(name)
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}")))
    };
    fn fill_conv<S: Scalar>(
        layer: &mut Conv2d<S>,
        weight: (Vec<usize>, Vec<f32>),
        bias: (Vec<usize>, Vec<f32>),
    ) -> Result<()> {
        if weight.0 != layer.weight.shape() || bias.0 != layer.bias.shape() {
            return Err(Error::format("checkpoint tensor shape mismatch".to_string()));
        }
        for (p, v) in layer.weight.iter_mut().zip(weight.1) {
            *p = cast::<S>(v as f64);
        }
        for (p, v) in layer.bias.iter_mut().zip(bias.1) {
            *p = cast::<S>(v as f64);
        }
        Ok(())
    }
    fn fill_lin<S: Scalar>(
        layer: &mut Linear<S>,
        weight: (Vec<usize>, Vec<f32>),
        bias: (Vec<usize>, Vec<f32>),
    ) -> Result<()> {
        if weight.0 != layer.weight.shape() || bias.0 != layer.bias.shape() {
            return Err(Error::format("checkpoint tensor shape mismatch".to_string()));
        }
        for (p, v) in layer.weight.iter_mut().zip(weight.1) {
            *p = cast::<S>(v as f64);
        }
        for (p, v) in layer.bias.iter_mut().zip(bias.1) {
            *p = cast::<S>(v as f64);
        }
        Ok(())
    }
    fill_conv(&mut model.conv1, take("conv1.weight")?, take("conv1.bias")?)?;
    fill_conv(&mut model.conv2, take("conv2.weight")?, take("conv2.bias")?)?;
    fill_conv(&mut model.conv3, take("conv3.weight")?, take("conv3.bias")?)?;
    fill_conv(&mut model.conv4, take("conv4.weight")?, take("conv4.bias")?)?;
    fill_lin(&mut model.fc_enc, take("fc_enc.weight")?, take("fc_enc.bias")?)?;
    fill_lin(&mut model.fc_dec, take("fc_dec.weight")?, take("fc_dec.bias")?)?;
    fill_conv(&mut model.dconv1, take("dconv1.weight")?, take("dconv1.bias")?)?;
    fill_conv(&mut model.dconv2, take("dconv2.weight")?, take("dconv2.bias")?)?;
    fill_conv(&mut model.dconv3, take("dconv3.weight")?, take("dconv3.bias")?)?;
    fill_conv(&mut model.dconv4, take("dconv4.weight")?, take("dconv4.bias")?)?;
    fill_conv(&mut model.out_conv, take("out_conv.weight")?, take("out_conv.bias")?)?;
    Ok(model)
}
