//! The joint training step: one forward pass, two objectives, two updates.
//!
//! Each step encodes a batch once, quantizes the latents against both the
//! trained codebook and a freshly generated adapted codebook, and decodes
//! both selections. The standard VQ objective updates the autoencoder (and
//! the codebook, by gradient or EMA), then the adapted-codebook objective
//! updates the autoencoder and the adapter. Both objectives are computed
//! from the same pre-update forward pass, applied as two sequential
//! optimizer applications.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::perplexity;
use crate::optim::AdamW;
use crate::seq2seq::{sample_target_size, RateAdapter};
use crate::tape::{Tape, Var};
use crate::tensor::{SharedTensor, Tensor};
use crate::vq::{ema_update, quantize, raq_loss, vq_loss, Codebook, LossValues, UpdateMode};

/// An encoder/decoder pair whose latent is a `[P, d]` row matrix.
pub trait VqBackbone {
    /// Encode a batch into latent rows `[P, d]` on the tape.
    fn encode(&self, tape: &mut Tape, batch: &Tensor) -> Var;
    /// Decode latent rows back to a batch with `batch`'s image shape.
    fn decode(&self, tape: &mut Tape, rows: Var, batch: usize) -> Var;
    /// All trainable tensors of the autoencoder.
    fn params(&self) -> Vec<SharedTensor>;
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub beta: f32,
    pub gamma: f32,
    pub cross_forcing: bool,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            beta: 0.25,
            gamma: 0.99,
            cross_forcing: true,
            k_min: 8,
            k_max: 64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub vq: LossValues,
    pub raq: LossValues,
    pub k_tilde: usize,
    pub perplexity_vq: f64,
    pub perplexity_raq: f64,
}

/// Both objectives and their quantizations from one shared forward pass.
/// No parameters are touched; `train_step` layers the updates on top.
pub struct ForwardPass {
    pub tape: Tape,
    pub vq: crate::vq::LossTerms,
    pub raq: crate::vq::LossTerms,
    pub k_tilde: usize,
    pub vq_indices: Vec<u32>,
    pub vq_usage: Vec<u64>,
    pub raq_usage: Vec<u64>,
    pub z_e_values: Tensor,
}

pub fn forward_losses(
    backbone: &impl VqBackbone,
    codebook: &Codebook,
    adapter: &RateAdapter,
    batch: &Tensor,
    cfg: &TrainConfig,
    k_tilde: usize,
) -> Result<ForwardPass> {
    if batch.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "batch must be [B, C, H, W], got {:?}",
            batch.shape()
        )));
    }
    let batch_size = batch.shape()[0];
    let mut tape = Tape::new();

    let z_e = backbone.encode(&mut tape, batch);
    let z_e_values = Tensor::new(tape.shape(z_e).to_vec(), tape.value(z_e).to_vec());
    if !z_e_values.is_finite() {
        return Err(Error::NonFinite("encoder produced non-finite latents".into()));
    }

    // Standard branch: quantize against the trained codebook.
    let q_vq = quantize(&z_e_values, codebook)?;
    let codebook_var = tape.param(codebook.vectors());
    let z_q = tape.gather_rows(codebook_var, &q_vq.indices);
    let dec_in = tape.straight_through(z_e, q_vq.quantized.data());
    let x_hat = backbone.decode(&mut tape, dec_in, batch_size);
    let x_const = tape.constant_from(batch.shape().to_vec(), batch.data().to_vec());
    let vq = vq_loss(&mut tape, x_const, x_hat, z_e, z_q, cfg.beta);

    // Adapted branch: generate a codebook of the sampled size, re-quantize.
    let generated = adapter.generate_on_tape(&mut tape, codebook_var, k_tilde, cfg.cross_forcing);
    let gen_rows = Tensor::new(tape.shape(generated).to_vec(), tape.value(generated).to_vec());
    if !gen_rows.is_finite() {
        return Err(Error::NonFinite("adapter produced non-finite codes".into()));
    }
    let gen_codebook = Codebook::from_tensor(&gen_rows, UpdateMode::Gradient)?;
    let q_raq = quantize(&z_e_values, &gen_codebook)?;
    let z_q_gen = tape.gather_rows(generated, &q_raq.indices);
    let dec_in_gen = tape.straight_through(z_e, q_raq.quantized.data());
    let x_hat_gen = backbone.decode(&mut tape, dec_in_gen, batch_size);
    let raq = raq_loss(&mut tape, x_const, x_hat_gen, z_e, z_q_gen, cfg.beta);

    Ok(ForwardPass {
        tape,
        vq,
        raq,
        k_tilde,
        vq_indices: q_vq.indices,
        vq_usage: q_vq.usage_counts,
        raq_usage: q_raq.usage_counts,
        z_e_values,
    })
}

/// One training step over a batch.
///
/// The optimizer must own every trainable tensor: backbone, adapter, and
/// the codebook vectors (which only carry gradients in gradient mode).
/// Steps are sequential: the first backward/step applies the standard
/// objective (with the EMA codebook update when enabled), the second
/// applies the adapted-codebook objective.
pub fn train_step(
    backbone: &impl VqBackbone,
    codebook: &mut Codebook,
    adapter: &RateAdapter,
    optimizer: &mut AdamW,
    batch: &Tensor,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepMetrics> {
    // Train within reach of the cross-forcing schedule: twice the source
    // size is the last step that can still see an original code.
    let k_cap = cfg.k_max.min(2 * codebook.k());
    let k_tilde = sample_target_size(cfg.k_min.min(k_cap), k_cap, rng)?;
    let mut pass = forward_losses(backbone, codebook, adapter, batch, cfg, k_tilde)?;

    let vq_values = pass.vq.values(&pass.tape);
    let raq_values = pass.raq.values(&pass.tape);
    if !vq_values.total.is_finite() || !raq_values.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss diverged: vq={}, raq={}",
            vq_values.total, raq_values.total
        )));
    }

    optimizer.zero_grads();
    pass.tape.backward(pass.vq.total);
    optimizer.step();
    optimizer.zero_grads();
    if codebook.mode() == UpdateMode::Ema {
        ema_update(codebook, &pass.vq_indices, &pass.z_e_values, cfg.gamma)?;
    }

    pass.tape.backward(pass.raq.total);
    optimizer.step();
    optimizer.zero_grads();

    Ok(StepMetrics {
        vq: vq_values,
        raq: raq_values,
        k_tilde,
        perplexity_vq: perplexity(&pass.vq_usage)?,
        perplexity_raq: perplexity(&pass.raq_usage)?,
    })
}
