//! Desk-scale convolutional autoencoder.
//!
//! The encoder downsamples a grayscale image by 4x with two stride-2
//! convolutions and refines with one residual block, yielding a
//! `latent x latent` grid of `dim`-channel vectors. The decoder mirrors it
//! with transposed convolutions. Weights start uniform within
//! `1/sqrt(fan_in)`; biases start at zero.

use rand::Rng;
use raq_core::training::VqBackbone;
use raq_core::{shared, SharedTensor, Tape, Tensor, Var};

pub struct ToyVqModel {
    enc_w1: SharedTensor,
    enc_b1: SharedTensor,
    enc_w2: SharedTensor,
    enc_b2: SharedTensor,
    enc_res_w1: SharedTensor,
    enc_res_b1: SharedTensor,
    enc_res_w2: SharedTensor,
    enc_res_b2: SharedTensor,
    dec_res_w1: SharedTensor,
    dec_res_b1: SharedTensor,
    dec_res_w2: SharedTensor,
    dec_res_b2: SharedTensor,
    dec_w1: SharedTensor,
    dec_b1: SharedTensor,
    dec_w2: SharedTensor,
    dec_b2: SharedTensor,
    image_size: usize,
    latent_size: usize,
    dim: usize,
}

fn conv_param(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> SharedTensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    shared(Tensor::uniform(shape, bound, rng).requires_grad(true))
}

fn zeros_param(len: usize) -> SharedTensor {
    shared(Tensor::zeros(vec![len]).requires_grad(true))
}

impl ToyVqModel {
    pub fn new(
        image_size: usize,
        dim: usize,
        hidden: usize,
        residual: usize,
        rng: &mut impl Rng,
    ) -> ToyVqModel {
        assert!(image_size % 4 == 0, "image size must be divisible by 4");
        let k = 4;
        ToyVqModel {
            enc_w1: conv_param(vec![hidden, 1, k, k], k * k, rng),
            enc_b1: zeros_param(hidden),
            enc_w2: conv_param(vec![dim, hidden, k, k], hidden * k * k, rng),
            enc_b2: zeros_param(dim),
            enc_res_w1: conv_param(vec![residual, dim, 3, 3], dim * 9, rng),
            enc_res_b1: zeros_param(residual),
            enc_res_w2: conv_param(vec![dim, residual, 1, 1], residual, rng),
            enc_res_b2: zeros_param(dim),
            dec_res_w1: conv_param(vec![residual, dim, 3, 3], dim * 9, rng),
            dec_res_b1: zeros_param(residual),
            dec_res_w2: conv_param(vec![dim, residual, 1, 1], residual, rng),
            dec_res_b2: zeros_param(dim),
            dec_w1: conv_param(vec![dim, hidden, k, k], dim * k * k, rng),
            dec_b1: zeros_param(hidden),
            dec_w2: conv_param(vec![hidden, 1, k, k], hidden * k * k, rng),
            dec_b2: zeros_param(1),
            image_size,
            latent_size: image_size / 4,
            dim,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn latent_size(&self) -> usize {
        self.latent_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Trainable tensors with stable names, in registration order.
    pub fn named_params(&self) -> Vec<(&'static str, SharedTensor)> {
        vec![
            ("enc.conv1.w", self.enc_w1.clone()),
            ("enc.conv1.b", self.enc_b1.clone()),
            ("enc.conv2.w", self.enc_w2.clone()),
            ("enc.conv2.b", self.enc_b2.clone()),
            ("enc.res.conv1.w", self.enc_res_w1.clone()),
            ("enc.res.conv1.b", self.enc_res_b1.clone()),
            ("enc.res.conv2.w", self.enc_res_w2.clone()),
            ("enc.res.conv2.b", self.enc_res_b2.clone()),
            ("dec.res.conv1.w", self.dec_res_w1.clone()),
            ("dec.res.conv1.b", self.dec_res_b1.clone()),
            ("dec.res.conv2.w", self.dec_res_w2.clone()),
            ("dec.res.conv2.b", self.dec_res_b2.clone()),
            ("dec.tconv1.w", self.dec_w1.clone()),
            ("dec.tconv1.b", self.dec_b1.clone()),
            ("dec.tconv2.w", self.dec_w2.clone()),
            ("dec.tconv2.b", self.dec_b2.clone()),
        ]
    }

    fn res_block(
        &self,
        tape: &mut Tape,
        x: Var,
        w1: &SharedTensor,
        b1: &SharedTensor,
        w2: &SharedTensor,
        b2: &SharedTensor,
    ) -> Var {
        let w1 = tape.param(w1);
        let b1 = tape.param(b1);
        let w2 = tape.param(w2);
        let b2 = tape.param(b2);
        let a = tape.relu(x);
        let a = tape.conv2d(a, w1, Some(b1), 1, 1);
        let a = tape.relu(a);
        let a = tape.conv2d(a, w2, Some(b2), 1, 0);
        tape.add(x, a)
    }
}

impl VqBackbone for ToyVqModel {
    fn encode(&self, tape: &mut Tape, batch: &Tensor) -> Var {
        let x = tape.constant_from(batch.shape().to_vec(), batch.data().to_vec());
        let w1 = tape.param(&self.enc_w1);
        let b1 = tape.param(&self.enc_b1);
        let w2 = tape.param(&self.enc_w2);
        let b2 = tape.param(&self.enc_b2);
        let h = tape.conv2d(x, w1, Some(b1), 2, 1);
        let h = tape.relu(h);
        let z = tape.conv2d(h, w2, Some(b2), 2, 1);
        let z = self.res_block(
            tape,
            z,
            &self.enc_res_w1,
            &self.enc_res_b1,
            &self.enc_res_w2,
            &self.enc_res_b2,
        );
        tape.nchw_to_rows(z)
    }

    fn decode(&self, tape: &mut Tape, rows: Var, batch: usize) -> Var {
        let z = tape.rows_to_nchw(rows, batch, self.dim, self.latent_size, self.latent_size);
        let z = self.res_block(
            tape,
            z,
            &self.dec_res_w1,
            &self.dec_res_b1,
            &self.dec_res_w2,
            &self.dec_res_b2,
        );
        let w1 = tape.param(&self.dec_w1);
        let b1 = tape.param(&self.dec_b1);
        let w2 = tape.param(&self.dec_w2);
        let b2 = tape.param(&self.dec_b2);
        let h = tape.conv_transpose2d(z, w1, Some(b1), 2, 1);
        let h = tape.relu(h);
        tape.conv_transpose2d(h, w2, Some(b2), 2, 1)
    }

    fn params(&self) -> Vec<SharedTensor> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }
}
