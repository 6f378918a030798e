//! Training checkpoints.
//!
//! A checkpoint is a directory: `model.rqmd` (config, step, named model
//! tensors, optimizer moments), `codebook.rqcb`, `adapter.rqs2`, plus the
//! run manifest and training log. Resuming rebuilds the exact state of an
//! uninterrupted run: parameters and moments round-trip bit-exactly, and
//! per-step generators are re-derived from `(seed, step)`.

use crate::config::ExperimentConfig;
use crate::model::ToyVqModel;
use crate::rng::{derive_rng, STREAM_PARAMS};
use anyhow::{bail, Context, Result};
use raq_core::optim::{AdamParamState, AdamW};
use raq_core::seq2seq::{load_adapter, save_adapter, RateAdapter};
use raq_core::vq::{load_codebook, save_codebook, Codebook};
use std::io::Write;
use std::path::{Path, PathBuf};

const MODEL_MAGIC: &[u8; 4] = b"RQMD";
const MODEL_VERSION: u16 = 1;

pub const MODEL_FILE: &str = "model.rqmd";
pub const CODEBOOK_FILE: &str = "codebook.rqcb";
pub const ADAPTER_FILE: &str = "adapter.rqs2";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOG_FILE: &str = "training_log.csv";

pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub model: ToyVqModel,
    pub codebook: Codebook,
    pub adapter: RateAdapter,
    pub opt_state: Vec<AdamParamState>,
}

pub fn model_path(dir: &Path) -> PathBuf {
    dir.join(MODEL_FILE)
}

/// FNV-1a over a byte slice, for manifests.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_checkpoint(
    dir: &Path,
    config: &ExperimentConfig,
    step: u64,
    model: &ToyVqModel,
    codebook: &Codebook,
    adapter: &RateAdapter,
    optimizer: &AdamW,
) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating checkpoint dir {}", dir.display()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let toml = config.to_toml();
    buf.extend_from_slice(&(toml.len() as u32).to_le_bytes());
    buf.extend_from_slice(toml.as_bytes());
    buf.extend_from_slice(&step.to_le_bytes());

    let named = model.named_params();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, p) in &named {
        let p = p.borrow();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let states = optimizer.export_state();
    buf.extend_from_slice(&(states.len() as u32).to_le_bytes());
    for st in &states {
        buf.extend_from_slice(&st.t.to_le_bytes());
        buf.extend_from_slice(&(st.m.len() as u32).to_le_bytes());
        for v in &st.m {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &st.v {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let path = model_path(dir);
    let mut f = std::fs::File::create(&path)
        .with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&buf)
        .with_context(|| format!("writing {}", path.display()))?;
    save_codebook(codebook, dir.join(CODEBOOK_FILE)).context("writing codebook")?;
    save_adapter(adapter, dir.join(ADAPTER_FILE)).context("writing adapter")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = model_path(dir);
    let bytes =
        std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let (config, step, tensors, opt_state) =
        parse_model_file(&bytes).with_context(|| format!("parsing {}", path.display()))?;

    // Parameter values come from the file; the generator only shapes the
    // allocation.
    let mut rng = derive_rng(0, STREAM_PARAMS);
    let model = ToyVqModel::new(
        config.image_size,
        config.embedding_dim,
        config.hidden_units,
        config.residual_units,
        &mut rng,
    );
    let named = model.named_params();
    if tensors.len() != named.len() {
        bail!(
            "checkpoint stores {} tensors, model has {}",
            tensors.len(),
            named.len()
        );
    }
    for ((name, param), (stored_name, shape, data)) in named.iter().zip(&tensors) {
        if name != stored_name {
            bail!("tensor order mismatch: expected {name}, found {stored_name}");
        }
        let mut p = param.borrow_mut();
        if p.shape() != shape.as_slice() {
            bail!(
                "tensor {name} has shape {:?} in file, model expects {:?}",
                shape,
                p.shape()
            );
        }
        p.data_mut().copy_from_slice(data);
    }

    let codebook =
        load_codebook(dir.join(CODEBOOK_FILE)).context("loading checkpoint codebook")?;
    let adapter = load_adapter(dir.join(ADAPTER_FILE)).context("loading checkpoint adapter")?;
    if codebook.dim() != config.embedding_dim || adapter.dim() != config.embedding_dim {
        bail!(
            "embedding width disagrees: config {}, codebook {}, adapter {}",
            config.embedding_dim,
            codebook.dim(),
            adapter.dim()
        );
    }
    Ok(Checkpoint {
        config,
        step,
        model,
        codebook,
        adapter,
        opt_state,
    })
}

type NamedTensor = (String, Vec<usize>, Vec<f32>);

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            );
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn parse_model_file(
    bytes: &[u8],
) -> Result<(ExperimentConfig, u64, Vec<NamedTensor>, Vec<AdamParamState>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MODEL_MAGIC {
        bail!(
            "bad magic {:02x} {:02x} {:02x} {:02x}",
            magic[0],
            magic[1],
            magic[2],
            magic[3]
        );
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        bail!("unsupported version {version}");
    }
    let config_len = r.u32()? as usize;
    if config_len > 1 << 20 {
        bail!("implausible config length {config_len}");
    }
    let config_text =
        std::str::from_utf8(r.take(config_len)?).context("config block is not UTF-8")?;
    let config = ExperimentConfig::from_toml(config_text).context("embedded config")?;
    let step = r.u64()?;

    let n_tensors = r.u32()? as usize;
    if n_tensors > 1 << 10 {
        bail!("implausible tensor count {n_tensors}");
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .context("tensor name is not UTF-8")?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            bail!("implausible rank {rank} for tensor {name}");
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || numel > 1 << 24 {
            bail!("implausible element count {numel} for tensor {name}");
        }
        let data = r.f32_vec(numel)?;
        tensors.push((name, shape, data));
    }

    let n_states = r.u32()? as usize;
    if n_states > 1 << 10 {
        bail!("implausible optimizer state count {n_states}");
    }
    let mut opt_state = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let t = r.u64()?;
        let numel = r.u32()? as usize;
        if numel == 0 || numel > 1 << 24 {
            bail!("implausible optimizer state length {numel}");
        }
        let m = r.f32_vec(numel)?;
        let v = r.f32_vec(numel)?;
        opt_state.push(AdamParamState { m, v, t });
    }

    if r.pos != bytes.len() {
        bail!("{} trailing bytes after checkpoint payload", bytes.len() - r.pos);
    }
    Ok((config, step, tensors, opt_state))
}
