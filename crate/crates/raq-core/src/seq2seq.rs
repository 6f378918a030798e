//! Autoregressive codebook adapter.
//!
//! A two-stack LSTM reads the source codebook one code per step, then decodes
//! a codebook of a different size. During decoding the input at each step is
//! chosen by a schedule: cross-forcing interleaves original codes with the
//! model's own previous outputs, so gradients flow through the generated
//! rows while the sequence stays anchored to the source codebook.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{shared, SharedTensor, Tensor};
use crate::wire;

/// Where the decoder input at one step comes from. Indices are 0-based:
/// `Original(i)` is source code i, `Generated(j)` is the decoder's own
/// output from step j.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSource {
    Original(usize),
    Generated(usize),
}

/// Decoder input schedule for adapting K source codes into `k_tilde` outputs.
///
/// Cross-forcing feeds an original code on even steps while originals last,
/// and the previous generated code otherwise. Without cross-forcing the
/// decoder is teacher-forced on the source prefix and free-runs afterwards.
pub fn adapt_schedule(k: usize, k_tilde: usize, cross_forcing: bool) -> Vec<StepSource> {
    assert!(k >= 1 && k_tilde >= 1, "schedule needs k >= 1 and k_tilde >= 1");
    (0..k_tilde)
        .map(|t| {
            let use_original = if cross_forcing {
                t % 2 == 0 && t < 2 * k
            } else {
                t < k
            };
            if use_original {
                StepSource::Original(if cross_forcing { t / 2 } else { t })
            } else {
                StepSource::Generated(t - 1)
            }
        })
        .collect()
}

/// Draw a target codebook size log-uniformly from `[k_min, k_max]`.
pub fn sample_target_size(k_min: usize, k_max: usize, rng: &mut impl Rng) -> Result<usize> {
    if k_min == 0 || k_max < k_min {
        return Err(Error::invalid(format!(
            "target size range [{k_min}, {k_max}] is empty"
        )));
    }
    let lo = (k_min as f64).ln();
    let hi = ((k_max + 1) as f64).ln();
    let u: f64 = rng.gen_range(lo..hi);
    Ok((u.exp().floor() as usize).clamp(k_min, k_max))
}

/// One LSTM cell with gate order i, f, g, o packed into a single
/// `[in_dim, 4*hidden]` input map plus a `[hidden, 4*hidden]` recurrent map.
#[derive(Debug)]
struct LstmCell {
    w_ih: SharedTensor,
    w_hh: SharedTensor,
    bias: SharedTensor,
    hidden: usize,
}

impl LstmCell {
    fn new(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> LstmCell {
        let bound = 1.0 / (hidden as f32).sqrt();
        let mut bias = Tensor::zeros(vec![1, 4 * hidden]);
        // Forget-gate bias starts at 1 so early training does not erase state.
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmCell {
            w_ih: shared(Tensor::uniform(vec![in_dim, 4 * hidden], bound, rng).requires_grad(true)),
            w_hh: shared(Tensor::uniform(vec![hidden, 4 * hidden], bound, rng).requires_grad(true)),
            bias: shared(bias.requires_grad(true)),
            hidden,
        }
    }

    /// One step: takes `[1, in_dim]` input and `[1, hidden]` state rows.
    fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> (Var, Var) {
        let n = self.hidden;
        let w_ih = tape.param(&self.w_ih);
        let w_hh = tape.param(&self.w_hh);
        let bias = tape.param(&self.bias);
        let xw = tape.matmul(x, w_ih);
        let hw = tape.matmul(h, w_hh);
        let lin = tape.add(xw, hw);
        let gates = tape.add(lin, bias);
        let i_pre = tape.narrow_cols(gates, 0, n);
        let f_pre = tape.narrow_cols(gates, n, n);
        let g_pre = tape.narrow_cols(gates, 2 * n, n);
        let o_pre = tape.narrow_cols(gates, 3 * n, n);
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_next = tape.add(fc, ig);
        let c_act = tape.tanh(c_next);
        let h_next = tape.mul(o, c_act);
        (h_next, c_next)
    }

    fn params(&self) -> [SharedTensor; 3] {
        [self.w_ih.clone(), self.w_hh.clone(), self.bias.clone()]
    }
}

/// Encoder-decoder adapter mapping a `[K, d]` codebook to `[k_tilde, d]`.
/// Hidden size equals the code dimension `d`.
#[derive(Debug)]
pub struct RateAdapter {
    encoder: Vec<LstmCell>,
    decoder: Vec<LstmCell>,
    proj_w: SharedTensor,
    proj_b: SharedTensor,
    dim: usize,
}

impl RateAdapter {
    pub fn new(dim: usize, num_layers: usize, rng: &mut impl Rng) -> Result<RateAdapter> {
        if dim == 0 || num_layers == 0 {
            return Err(Error::invalid("adapter needs dim >= 1 and layers >= 1"));
        }
        let make_stack = |rng: &mut _| (0..num_layers).map(|_| LstmCell::new(dim, dim, rng)).collect();
        let bound = 1.0 / (dim as f32).sqrt();
        Ok(RateAdapter {
            encoder: make_stack(rng),
            decoder: make_stack(rng),
            proj_w: shared(Tensor::uniform(vec![dim, dim], bound, rng).requires_grad(true)),
            proj_b: shared(Tensor::zeros(vec![1, dim]).requires_grad(true)),
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.encoder.len()
    }

    /// All trainable tensors in fixed registration order.
    pub fn params(&self) -> Vec<SharedTensor> {
        let mut out = Vec::new();
        for cell in self.encoder.iter().chain(self.decoder.iter()) {
            out.extend(cell.params());
        }
        out.push(self.proj_w.clone());
        out.push(self.proj_b.clone());
        out
    }

    /// Run one stack over a sequence of `[1, d]` inputs, threading (h, c)
    /// through layers; returns the final state per layer.
    fn run_stack(
        &self,
        tape: &mut Tape,
        stack: &[LstmCell],
        inputs: &[Var],
        init: Option<&[(Var, Var)]>,
    ) -> (Vec<Var>, Vec<(Var, Var)>) {
        let mut state: Vec<(Var, Var)> = match init {
            Some(s) => s.to_vec(),
            None => (0..stack.len())
                .map(|_| (tape.zeros(vec![1, self.dim]), tape.zeros(vec![1, self.dim])))
                .collect(),
        };
        let mut top_outputs = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let mut layer_in = x;
            for (layer, cell) in stack.iter().enumerate() {
                let (h, c) = state[layer];
                let (h2, c2) = cell.step(tape, layer_in, h, c);
                state[layer] = (h2, c2);
                layer_in = h2;
            }
            top_outputs.push(layer_in);
        }
        (top_outputs, state)
    }

    /// Generate an adapted codebook on an existing tape so gradients reach
    /// both the adapter parameters and (when trainable) the source rows.
    /// `source` must be `[K, d]`; returns `[k_tilde, d]`.
    pub fn generate_on_tape(
        &self,
        tape: &mut Tape,
        source: Var,
        k_tilde: usize,
        cross_forcing: bool,
    ) -> Var {
        let shape = tape.shape(source).to_vec();
        assert_eq!(shape.len(), 2, "source codebook must be [K, d]");
        assert_eq!(shape[1], self.dim, "source dim must match adapter dim");
        let k = shape[0];
        assert!(k >= 1 && k_tilde >= 1, "codebook sizes must be >= 1");

        let source_rows: Vec<Var> = (0..k as u32)
            .map(|i| tape.gather_rows(source, &[i]))
            .collect();
        let (_, enc_state) = self.run_stack(tape, &self.encoder, &source_rows, None);

        let schedule = adapt_schedule(k, k_tilde, cross_forcing);
        let mut state = enc_state;
        let mut generated: Vec<Var> = Vec::with_capacity(k_tilde);
        let proj_w = tape.param(&self.proj_w);
        let proj_b = tape.param(&self.proj_b);
        for src in schedule {
            let input = match src {
                StepSource::Original(i) => source_rows[i],
                StepSource::Generated(j) => generated[j],
            };
            let (outs, next_state) = self.run_stack(tape, &self.decoder, &[input], Some(&state));
            state = next_state;
            let lin = tape.matmul(outs[0], proj_w);
            generated.push(tape.add(lin, proj_b));
        }
        tape.concat_rows(&generated)
    }

    /// Convenience wrapper: adapt plain rows without keeping a tape.
    pub fn generate_rows(
        &self,
        source: &Tensor,
        k_tilde: usize,
        cross_forcing: bool,
    ) -> Result<Tensor> {
        let shape = source.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "source codebook {shape:?} does not match adapter dim {}",
                self.dim
            )));
        }
        if shape[0] == 0 || k_tilde == 0 {
            return Err(Error::invalid("codebook sizes must be >= 1"));
        }
        let mut tape = Tape::new();
        let src = tape.constant_from(shape.to_vec(), source.data().to_vec());
        let out = self.generate_on_tape(&mut tape, src, k_tilde, cross_forcing);
        let rows = Tensor::new(vec![k_tilde, self.dim], tape.value(out).to_vec());
        if !rows.is_finite() {
            return Err(Error::NonFinite("adapter produced non-finite codes".into()));
        }
        Ok(rows)
    }
}

// ---- adapter file format ----
//
// "RQS2" | u16 version=1 | u32 layers | u32 d | parameter blocks in
// registration order: encoder cells (w_ih, w_hh, bias) per layer, decoder
// cells likewise, then proj_w, proj_b. All f32 little-endian.

const ADAPTER_MAGIC: &[u8; 4] = b"RQS2";
const ADAPTER_VERSION: u16 = 1;

pub fn save_adapter(adapter: &RateAdapter, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let to_io = |e| Error::io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(to_io)?);
    w.write_all(ADAPTER_MAGIC).map_err(to_io)?;
    wire::write_u16(&mut w, ADAPTER_VERSION).map_err(to_io)?;
    wire::write_u32(&mut w, adapter.num_layers() as u32).map_err(to_io)?;
    wire::write_u32(&mut w, adapter.dim() as u32).map_err(to_io)?;
    for p in adapter.params() {
        wire::write_f32_slice(&mut w, p.borrow().data()).map_err(to_io)?;
    }
    w.flush().map_err(to_io)
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<RateAdapter> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(display.clone(), e))?);
    let fmt = |reason: String| Error::format(display.clone(), reason);
    let trunc = |_| Error::format(display.clone(), "truncated file");

    wire::expect_magic(&mut r, ADAPTER_MAGIC).map_err(fmt)?;
    let version = wire::read_u16(&mut r).map_err(trunc)?;
    if version != ADAPTER_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let layers = wire::read_u32(&mut r).map_err(trunc)? as usize;
    let dim = wire::read_u32(&mut r).map_err(trunc)? as usize;
    if layers == 0 || dim == 0 || layers > 64 || dim > (1 << 16) {
        return Err(fmt(format!("implausible dimensions layers={layers}, d={dim}")));
    }
    // Allocate with a throwaway seed, then overwrite every tensor in order.
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    let adapter = RateAdapter::new(dim, layers, &mut rng)?;
    for p in adapter.params() {
        let mut t = p.borrow_mut();
        let n = t.numel();
        let data = wire::read_f32_vec(&mut r, n).map_err(trunc)?;
        t.data_mut().copy_from_slice(&data);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)
        .map_err(|e| Error::io(display.clone(), e))?;
    if !rest.is_empty() {
        return Err(fmt(format!("{} trailing bytes", rest.len())));
    }
    Ok(adapter)
}
