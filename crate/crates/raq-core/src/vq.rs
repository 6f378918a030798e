//! Vector quantization: codebook, nearest-neighbor assignment, the
//! three-term VQ loss, and EMA codebook updates.
//!
//! Distances are squared Euclidean, accumulated in f64. Ties in the
//! nearest-neighbor search resolve to the lowest code index.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{shared, SharedTensor, Tensor};
use crate::wire;

/// Floor applied to EMA counts before the division that rebuilds a vector.
pub const EMA_COUNT_FLOOR: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// Codebook rows receive gradients from the embedding loss term.
    Gradient,
    /// Codebook rows follow exponential moving averages of assigned latents.
    Ema,
}

#[derive(Debug, Clone)]
pub struct EmaState {
    pub counts: Vec<f32>,
    pub sums: Vec<f32>,
}

#[derive(Debug)]
pub struct Codebook {
    vectors: SharedTensor,
    ema: Option<EmaState>,
    mode: UpdateMode,
}

impl Codebook {
    /// Codebook with rows drawn from N(0, 1/d) per coordinate.
    pub fn random(k: usize, d: usize, mode: UpdateMode, rng: &mut impl Rng) -> Result<Codebook> {
        if k == 0 || d == 0 {
            return Err(Error::invalid("codebook needs k >= 1 and d >= 1"));
        }
        let normal = Normal::new(0.0f64, 1.0 / (d as f64).sqrt()).unwrap();
        let data: Vec<f32> = (0..k * d).map(|_| normal.sample(rng) as f32).collect();
        Codebook::from_rows(k, d, data, mode)
    }

    pub fn from_rows(k: usize, d: usize, data: Vec<f32>, mode: UpdateMode) -> Result<Codebook> {
        if k == 0 || d == 0 {
            return Err(Error::invalid("codebook needs k >= 1 and d >= 1"));
        }
        if data.len() != k * d {
            return Err(Error::ShapeMismatch(format!(
                "codebook data has {} values, expected {}x{}",
                data.len(),
                k,
                d
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("codebook vectors".into()));
        }
        let ema = match mode {
            UpdateMode::Gradient => None,
            // counts start at 1 with sums equal to the vectors, so the
            // vectors == sums / counts invariant holds from the start.
            UpdateMode::Ema => Some(EmaState {
                counts: vec![1.0; k],
                sums: data.clone(),
            }),
        };
        let tensor =
            Tensor::new(vec![k, d], data).requires_grad(matches!(mode, UpdateMode::Gradient));
        Ok(Codebook {
            vectors: shared(tensor),
            ema,
            mode,
        })
    }

    pub fn from_tensor(t: &Tensor, mode: UpdateMode) -> Result<Codebook> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "codebook tensor must be [K,d], got {s:?}"
            )));
        }
        Codebook::from_rows(s[0], s[1], t.data().to_vec(), mode)
    }

    pub fn k(&self) -> usize {
        self.vectors.borrow().shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.borrow().shape()[1]
    }

    pub fn mode(&self) -> UpdateMode {
        self.mode
    }

    /// Shared storage handle, for registering the codebook on a tape.
    pub fn vectors(&self) -> &SharedTensor {
        &self.vectors
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.vectors.borrow().data().to_vec()
    }

    pub fn row(&self, i: usize) -> Vec<f32> {
        let d = self.dim();
        self.vectors.borrow().data()[i * d..(i + 1) * d].to_vec()
    }

    pub fn ema(&self) -> Option<&EmaState> {
        self.ema.as_ref()
    }

    /// Deep copy with detached storage.
    pub fn duplicate(&self) -> Codebook {
        let t = self.vectors.borrow();
        let tensor = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .requires_grad(matches!(self.mode, UpdateMode::Gradient));
        Codebook {
            vectors: shared(tensor),
            ema: self.ema.clone(),
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantizationResult {
    /// Flattened nearest-code index per input row.
    pub indices: Vec<u32>,
    /// Same shape as the input; row `p` is codebook row `indices[p]`, bit for bit.
    pub quantized: Tensor,
    /// Assignment histogram over the codebook, length K.
    pub usage_counts: Vec<u64>,
}

/// Nearest-neighbor assignment of each d-dimensional row of `z_e` to the
/// codebook. Pure function of its inputs; safe to call concurrently.
pub fn quantize(z_e: &Tensor, codebook: &Codebook) -> Result<QuantizationResult> {
    let shape = z_e.shape();
    let d = codebook.dim();
    if shape.is_empty() || *shape.last().unwrap() != d {
        return Err(Error::ShapeMismatch(format!(
            "latents of shape {shape:?} are not rows of dimension {d}"
        )));
    }
    if !z_e.is_finite() {
        return Err(Error::NonFinite("encoder output".into()));
    }
    let vectors = codebook.vectors.borrow();
    if !vectors.is_finite() {
        return Err(Error::NonFinite("codebook vectors".into()));
    }
    let codes = vectors.data();
    let k = codebook.k();
    let positions = z_e.numel() / d;
    let mut indices = Vec::with_capacity(positions);
    let mut quantized = vec![0.0f32; z_e.numel()];
    let mut usage = vec![0u64; k];
    let zdata = z_e.data();
    for p in 0..positions {
        let row = &zdata[p * d..(p + 1) * d];
        let mut best = f64::INFINITY;
        let mut best_idx = 0usize;
        for c in 0..k {
            let code = &codes[c * d..(c + 1) * d];
            let mut dist = 0.0f64;
            for t in 0..d {
                let diff = row[t] as f64 - code[t] as f64;
                dist += diff * diff;
            }
            // strict < keeps the lowest index on ties
            if dist < best {
                best = dist;
                best_idx = c;
            }
        }
        indices.push(best_idx as u32);
        usage[best_idx] += 1;
        quantized[p * d..(p + 1) * d].copy_from_slice(&codes[best_idx * d..(best_idx + 1) * d]);
    }
    Ok(QuantizationResult {
        indices,
        quantized: Tensor::new(shape.to_vec(), quantized),
        usage_counts: usage,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub recon: Var,
    pub embed: Var,
    pub commit: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            recon: tape.scalar(self.recon),
            embed: tape.scalar(self.embed),
            commit: tape.scalar(self.commit),
            total: tape.scalar(self.total),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub recon: f64,
    pub embed: f64,
    pub commit: f64,
    pub total: f64,
}

/// Three-term VQ objective on a tape:
///
/// - `recon`: mean squared error between `x` and `x_hat`;
/// - `embed`: per-row mean of `||sg[z_e] - z_q||^2`, pulling codes toward
///   the encoder output (gradient reaches only `z_q`);
/// - `commit`: per-row mean of `||sg[z_q] - z_e||^2`, weighted by `beta`,
///   pulling the encoder toward the codes (gradient reaches only `z_e`).
///
/// `z_e` and `z_q` are `[P,d]` row matrices over latent grid positions.
pub fn vq_loss(tape: &mut Tape, x: Var, x_hat: Var, z_e: Var, z_q: Var, beta: f32) -> LossTerms {
    assert_eq!(
        tape.shape(z_e),
        tape.shape(z_q),
        "vq_loss: z_e and z_q shapes differ"
    );
    let recon = tape.mse(x_hat, x);
    let z_e_const = tape.constant_from(tape.shape(z_e).to_vec(), tape.value(z_e).to_vec());
    let z_q_const = tape.constant_from(tape.shape(z_q).to_vec(), tape.value(z_q).to_vec());
    let embed = tape.mean_row_sqdist(z_e_const, z_q);
    let commit = tape.mean_row_sqdist(z_q_const, z_e);
    let scaled_commit = tape.scale(commit, beta);
    let partial = tape.add(recon, embed);
    let total = tape.add(partial, scaled_commit);
    LossTerms {
        recon,
        embed,
        commit,
        total,
    }
}

/// The VQ objective evaluated against an adapted codebook's selections.
/// Identical in form to [`vq_loss`]; the embedding term's gradient flows
/// through `z_q` into whatever produced the adapted codebook.
pub fn raq_loss(tape: &mut Tape, x: Var, x_hat: Var, z_e: Var, z_q: Var, beta: f32) -> LossTerms {
    vq_loss(tape, x, x_hat, z_e, z_q, beta)
}

/// EMA codebook update:
/// `N_i <- g*N_i + (1-g)*n_i`, `m_i <- g*m_i + (1-g)*sum(z_e assigned to i)`,
/// `e_i <- m_i / max(N_i, 1e-5)`.
pub fn ema_update(
    codebook: &mut Codebook,
    indices: &[u32],
    z_e: &Tensor,
    gamma: f32,
) -> Result<()> {
    if codebook.mode != UpdateMode::Ema {
        return Err(Error::invalid("ema_update on a gradient-mode codebook"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0,1)")));
    }
    let d = codebook.dim();
    let k = codebook.k();
    let positions = z_e.numel() / d;
    if positions != indices.len() || z_e.numel() % d != 0 {
        return Err(Error::ShapeMismatch(
            "ema_update: indices do not match latent rows".into(),
        ));
    }
    let mut batch_counts = vec![0.0f64; k];
    let mut batch_sums = vec![0.0f64; k * d];
    let zdata = z_e.data();
    for (p, &idx) in indices.iter().enumerate() {
        let idx = idx as usize;
        if idx >= k {
            return Err(Error::invalid(format!("index {idx} out of range")));
        }
        batch_counts[idx] += 1.0;
        for t in 0..d {
            batch_sums[idx * d + t] += zdata[p * d + t] as f64;
        }
    }
    let ema = codebook.ema.as_mut().expect("ema mode has ema state");
    let g = gamma as f64;
    let mut vectors = codebook.vectors.borrow_mut();
    let data = vectors.data_mut();
    for i in 0..k {
        let n = g * ema.counts[i] as f64 + (1.0 - g) * batch_counts[i];
        ema.counts[i] = n as f32;
        for t in 0..d {
            let m = g * ema.sums[i * d + t] as f64 + (1.0 - g) * batch_sums[i * d + t];
            ema.sums[i * d + t] = m as f32;
            data[i * d + t] = (m / (n.max(EMA_COUNT_FLOOR as f64))) as f32;
        }
    }
    Ok(())
}

// ---- codebook file format ----
//
// "RQCB" | u16 version=1 | u32 K | u32 d | K*d f32 vectors (row-major)
// | u8 ema flag | if set: K f32 counts, K*d f32 sums. All little-endian.

const CODEBOOK_MAGIC: &[u8; 4] = b"RQCB";
const CODEBOOK_VERSION: u16 = 1;

pub fn save_codebook(codebook: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let to_io = |e| Error::io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(to_io)?);
    w.write_all(CODEBOOK_MAGIC).map_err(to_io)?;
    wire::write_u16(&mut w, CODEBOOK_VERSION).map_err(to_io)?;
    wire::write_u32(&mut w, codebook.k() as u32).map_err(to_io)?;
    wire::write_u32(&mut w, codebook.dim() as u32).map_err(to_io)?;
    wire::write_f32_slice(&mut w, codebook.vectors.borrow().data()).map_err(to_io)?;
    match &codebook.ema {
        None => w.write_all(&[0u8]).map_err(to_io)?,
        Some(ema) => {
            w.write_all(&[1u8]).map_err(to_io)?;
            wire::write_f32_slice(&mut w, &ema.counts).map_err(to_io)?;
            wire::write_f32_slice(&mut w, &ema.sums).map_err(to_io)?;
        }
    }
    w.flush().map_err(to_io)
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(display.clone(), e))?);
    let fmt = |reason: String| Error::format(display.clone(), reason);
    let trunc = |_| Error::format(display.clone(), "truncated file");

    wire::expect_magic(&mut r, CODEBOOK_MAGIC).map_err(fmt)?;
    let version = wire::read_u16(&mut r).map_err(trunc)?;
    if version != CODEBOOK_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let k = wire::read_u32(&mut r).map_err(trunc)? as usize;
    let d = wire::read_u32(&mut r).map_err(trunc)? as usize;
    if k == 0 || d == 0 || k > (1 << 24) || d > (1 << 16) {
        return Err(fmt(format!("implausible dimensions K={k}, d={d}")));
    }
    let data = wire::read_f32_vec(&mut r, k * d).map_err(trunc)?;
    let flag = wire::read_u8(&mut r).map_err(trunc)?;
    let (mode, ema) = match flag {
        0 => (UpdateMode::Gradient, None),
        1 => {
            let counts = wire::read_f32_vec(&mut r, k).map_err(trunc)?;
            let sums = wire::read_f32_vec(&mut r, k * d).map_err(trunc)?;
            (UpdateMode::Ema, Some(EmaState { counts, sums }))
        }
        other => return Err(fmt(format!("invalid EMA flag byte {other:#04x}"))),
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)
        .map_err(|e| Error::io(display.clone(), e))?;
    if !rest.is_empty() {
        return Err(fmt(format!("{} trailing bytes", rest.len())));
    }
    let mut cb = Codebook::from_rows(k, d, data, mode)?;
    cb.ema = ema;
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cb(rows: &[&[f32]]) -> Codebook {
        let d = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::from_rows(rows.len(), d, data, UpdateMode::Gradient).unwrap()
    }

    #[test]
    fn nearest_code_simple() {
        let codebook = cb(&[&[0.0], &[0.25], &[1.0]]);
        let z = Tensor::new(vec![1, 1], vec![0.2]);
        let q = quantize(&z, &codebook).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.quantized.data(), &[0.25]);
        assert_eq!(q.usage_counts, vec![0, 1, 0]);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // equidistant pair
        let codebook = cb(&[&[0.0], &[1.0]]);
        let z = Tensor::new(vec![1, 1], vec![0.5]);
        assert_eq!(quantize(&z, &codebook).unwrap().indices, vec![0]);
        // exact duplicates
        let codebook = cb(&[&[0.7, -0.2], &[0.7, -0.2], &[0.0, 0.0]]);
        let z = Tensor::new(vec![1, 2], vec![0.7, -0.2]);
        assert_eq!(quantize(&z, &codebook).unwrap().indices, vec![0]);
    }

    #[test]
    fn single_code_takes_everything() {
        let codebook = cb(&[&[0.3, 0.3]]);
        let z = Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 1.0, -5.0, 2.0, 0.3, 0.3]);
        let q = quantize(&z, &codebook).unwrap();
        assert!(q.indices.iter().all(|&i| i == 0));
        assert_eq!(q.usage_counts, vec![4]);
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let k = rng.gen_range(1..=32);
            let d = rng.gen_range(1..=8);
            let mut data: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // duplicate a row now and then to force ties
            if k > 1 && rng.gen_bool(0.5) {
                let src = rng.gen_range(0..k);
                let dst = rng.gen_range(0..k);
                let row: Vec<f32> = data[src * d..(src + 1) * d].to_vec();
                data[dst * d..(dst + 1) * d].copy_from_slice(&row);
            }
            let codebook = Codebook::from_rows(k, d, data.clone(), UpdateMode::Gradient).unwrap();
            let p = rng.gen_range(1..=6);
            let z: Vec<f32> = (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zt = Tensor::new(vec![p, d], z.clone());
            let got = quantize(&zt, &codebook).unwrap();
            for pos in 0..p {
                let mut best = f64::INFINITY;
                let mut best_idx = usize::MAX;
                for c in 0..k {
                    let mut dist = 0.0f64;
                    for t in 0..d {
                        let diff = z[pos * d + t] as f64 - data[c * d + t] as f64;
                        dist += diff * diff;
                    }
                    if dist < best {
                        best = dist;
                        best_idx = c;
                    }
                }
                assert_eq!(got.indices[pos] as usize, best_idx);
            }
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = StdRng::seed_from_u64(13);
        let codebook = Codebook::random(8, 4, UpdateMode::Gradient, &mut rng).unwrap();
        let z = Tensor::new(
            vec![10, 4],
            (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let first = quantize(&z, &codebook).unwrap();
        let second = quantize(&first.quantized, &codebook).unwrap();
        assert_eq!(first.indices, second.indices);
        assert_eq!(first.quantized.data(), second.quantized.data());
    }

    #[test]
    fn distortion_never_beats_a_fixed_code() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..50 {
            let k = rng.gen_range(2..=16);
            let d = rng.gen_range(1..=4);
            let codebook = Codebook::random(k, d, UpdateMode::Gradient, &mut rng).unwrap();
            let p = rng.gen_range(1..=8);
            let z = Tensor::new(
                vec![p, d],
                (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let q = quantize(&z, &codebook).unwrap();
            let dist = |a: &[f32], b: &[f32]| -> f64 {
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum()
            };
            let chosen: f64 = (0..p)
                .map(|i| {
                    dist(
                        &z.data()[i * d..(i + 1) * d],
                        &q.quantized.data()[i * d..(i + 1) * d],
                    )
                })
                .sum();
            for c in 0..k {
                let fixed: f64 = (0..p)
                    .map(|i| dist(&z.data()[i * d..(i + 1) * d], &codebook.row(c)))
                    .sum();
                assert!(chosen <= fixed + 1e-9);
            }
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let codebook = cb(&[&[0.0]]);
        let z = Tensor::new(vec![1, 1], vec![f32::NAN]);
        assert!(matches!(
            quantize(&z, &codebook),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn loss_hand_example() {
        // z_e=(1,0), z_q=(0,0), identical images, beta=0.25:
        // recon 0, embed 1, commit 1 -> total 1.25
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1, 1, 2, 2], vec![0.5; 4]);
        let z_e = tape.constant_from(vec![1, 2], vec![1.0, 0.0]);
        let z_q = tape.constant_from(vec![1, 2], vec![0.0, 0.0]);
        let terms = vq_loss(&mut tape, x, x, z_e, z_q, 0.25);
        let v = terms.values(&tape);
        assert_eq!(v.recon, 0.0);
        assert!((v.embed - 1.0).abs() < 1e-9);
        assert!((v.commit - 1.0).abs() < 1e-9);
        assert!((v.total - 1.25).abs() < 1e-9);
    }

    #[test]
    fn loss_zero_when_everything_matches() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let z = tape.constant_from(vec![2, 2], vec![1.0, -1.0, 0.5, 0.25]);
        let terms = vq_loss(&mut tape, x, x, z, z, 0.25);
        let v = terms.values(&tape);
        assert_eq!(
            (v.recon, v.embed, v.commit, v.total),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn embed_gradient_reaches_only_selected_rows() {
        let mut rng = StdRng::seed_from_u64(3);
        let codebook = Codebook::random(4, 2, UpdateMode::Gradient, &mut rng).unwrap();
        let z = Tensor::new(vec![3, 2], vec![0.9, 0.9, 0.9, 0.85, -0.9, -0.9]);
        let q = quantize(&z, &codebook).unwrap();
        let mut tape = Tape::new();
        let e_var = tape.param(codebook.vectors());
        let z_e = tape.constant(&z);
        let z_q = tape.gather_rows(e_var, &q.indices);
        let x = tape.constant_from(vec![1, 1, 1, 1], vec![0.0]);
        let terms = vq_loss(&mut tape, x, x, z_e, z_q, 0.25);
        tape.backward(terms.embed);
        let grad = codebook.vectors().borrow().grad().unwrap().to_vec();
        let selected: std::collections::HashSet<u32> = q.indices.iter().copied().collect();
        for c in 0..4u32 {
            let gnorm: f32 = grad[(c as usize) * 2..(c as usize) * 2 + 2]
                .iter()
                .map(|g| g.abs())
                .sum();
            if selected.contains(&c) {
                assert!(gnorm > 0.0, "selected row {c} must receive gradient");
            } else {
                assert_eq!(gnorm, 0.0, "unselected row {c} must stay untouched");
            }
        }
    }

    #[test]
    fn straight_through_matches_unquantized_path_when_codes_equal_latents() {
        // Codebook rows equal to z_e rows: the sandwich must not change the
        // reconstruction gradient reaching the encoder output.
        let z_vals = vec![0.4f32, -0.2, 0.8, 0.1];
        let codebook = cb(&[&[0.4, -0.2], &[0.8, 0.1]]);
        let ze_tensor = Tensor::new(vec![2, 2], z_vals.clone());
        let q = quantize(&ze_tensor, &codebook).unwrap();
        assert_eq!(q.quantized.data(), z_vals.as_slice());

        let p = shared(Tensor::new(vec![2, 2], z_vals.clone()).requires_grad(true));
        let target = vec![0.0f32, 0.0, 0.0, 0.0];

        let with_st = {
            let mut tape = Tape::new();
            let z_e = tape.param(&p);
            let st = tape.straight_through(z_e, q.quantized.data());
            let tgt = tape.constant_from(vec![2, 2], target.clone());
            let loss = tape.mse(st, tgt);
            tape.backward(loss);
            let g = p.borrow().grad().unwrap().to_vec();
            p.borrow_mut().zero_grad();
            g
        };
        let without = {
            let mut tape = Tape::new();
            let z_e = tape.param(&p);
            let tgt = tape.constant_from(vec![2, 2], target);
            let loss = tape.mse(z_e, tgt);
            tape.backward(loss);
            let g = p.borrow().grad().unwrap().to_vec();
            p.borrow_mut().zero_grad();
            g
        };
        assert_eq!(with_st, without);
    }

    #[test]
    fn ema_recurrence_hand_values() {
        let mut codebook = Codebook::from_rows(1, 1, vec![5.0], UpdateMode::Ema).unwrap();
        codebook.ema.as_mut().unwrap().counts[0] = 10.0;
        codebook.ema.as_mut().unwrap().sums[0] = 50.0;
        let z = Tensor::new(vec![2, 1], vec![1.0, 3.0]);
        ema_update(&mut codebook, &[0, 0], &z, 0.99).unwrap();
        let ema = codebook.ema().unwrap();
        assert!((ema.counts[0] - 9.92).abs() < 1e-5);
        // m = 0.99*50 + 0.01*4 = 49.54; e = 49.54/9.92
        assert!((ema.sums[0] - 49.54).abs() < 1e-4);
        assert!((codebook.row(0)[0] - 49.54 / 9.92).abs() < 1e-5);
    }

    #[test]
    fn unassigned_code_is_stable() {
        let mut codebook =
            Codebook::from_rows(2, 1, vec![0.0, 10.0], UpdateMode::Ema).unwrap();
        let before = codebook.row(1)[0];
        let z = Tensor::new(vec![3, 1], vec![0.1, -0.1, 0.05]);
        for _ in 0..5 {
            let q = quantize(&z, &codebook).unwrap();
            assert_eq!(q.usage_counts[1], 0);
            ema_update(&mut codebook, &q.indices, &z, 0.99).unwrap();
        }
        assert!((codebook.row(1)[0] - before).abs() < 1e-5);
    }

    #[test]
    fn gamma_zero_sets_used_codes_to_batch_mean() {
        let mut codebook = Codebook::from_rows(2, 1, vec![0.0, 1.0], UpdateMode::Ema).unwrap();
        let z = Tensor::new(vec![3, 1], vec![0.1, 0.3, 0.95]);
        let q = quantize(&z, &codebook).unwrap();
        ema_update(&mut codebook, &q.indices, &z, 0.0).unwrap();
        assert!((codebook.row(0)[0] - 0.2).abs() < 1e-6);
        assert!((codebook.row(1)[0] - 0.95).abs() < 1e-6);
    }

    #[test]
    fn ema_invariant_vectors_equal_sums_over_counts() {
        let mut rng = StdRng::seed_from_u64(23);
        let mut codebook = Codebook::random(6, 3, UpdateMode::Ema, &mut rng).unwrap();
        for _ in 0..20 {
            let z = Tensor::new(
                vec![16, 3],
                (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let q = quantize(&z, &codebook).unwrap();
            ema_update(&mut codebook, &q.indices, &z, 0.99).unwrap();
            let ema = codebook.ema().unwrap();
            for i in 0..6 {
                for t in 0..3 {
                    let expect = ema.sums[i * 3 + t] / ema.counts[i].max(EMA_COUNT_FLOOR);
                    assert!((codebook.row(i)[t] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ema_update_rejects_gradient_mode() {
        let mut codebook = cb(&[&[0.0]]);
        let z = Tensor::new(vec![1, 1], vec![0.0]);
        assert!(ema_update(&mut codebook, &[0], &z, 0.99).is_err());
    }

    #[test]
    fn codebook_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.rqcb");
        let mut rng = StdRng::seed_from_u64(31);
        let mut codebook = Codebook::random(5, 3, UpdateMode::Ema, &mut rng).unwrap();
        let z = Tensor::new(
            vec![9, 3],
            (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let q = quantize(&z, &codebook).unwrap();
        ema_update(&mut codebook, &q.indices, &z, 0.9).unwrap();

        save_codebook(&codebook, &path).unwrap();
        let loaded = load_codebook(&path).unwrap();
        assert_eq!(loaded.k(), 5);
        assert_eq!(loaded.dim(), 3);
        assert_eq!(loaded.to_vec(), codebook.to_vec());
        assert_eq!(loaded.mode(), UpdateMode::Ema);
        assert_eq!(loaded.ema().unwrap().counts, codebook.ema().unwrap().counts);
        assert_eq!(loaded.ema().unwrap().sums, codebook.ema().unwrap().sums);
    }

    #[test]
    fn codebook_file_bad_magic_reports_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rqcb");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        let err = load_codebook(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
        assert!(err.contains("4e"), "offending byte missing: {err}");
    }

    #[test]
    fn codebook_file_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rqcb");
        let codebook = cb(&[&[0.5, 0.5]]);
        save_codebook(&codebook, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_codebook(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
