//! Codebook adaptation: turn a trained checkpoint's codebook of size K
//! into one of size K̃ by one of four routes: the learned sequence
//! adapter, soft clustering down, kernel-matched growth up, or a random
//! subset baseline. Adapted codebooks are plain gradient-mode books with
//! no averaging state.

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::rng::{derive_rng, STREAM_ADAPT_BASE};
use anyhow::{bail, Context, Result};
use rand_chacha::ChaCha8Rng;
use raq_core::cluster::{dkm_reduce, ikm_increase, DkmOptions, MmdConfig};
use raq_core::vq::{save_codebook, Codebook, UpdateMode};
use std::path::Path;

/// Hard ceiling on generated sizes: beyond four times the source size the
/// decode schedule has been running open-loop for too long to trust.
pub const GENERATION_CAP_FACTOR: usize = 4;
/// Sizes above twice the source size exceed what training ever sampled;
/// reports flag them as extrapolation.
pub const TRAINED_CAP_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMethod {
    Seq2seq,
    Dkm,
    Ikm,
    RandomSubset,
}

impl AdaptMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptMethod::Seq2seq => "seq2seq",
            AdaptMethod::Dkm => "dkm",
            AdaptMethod::Ikm => "ikm",
            AdaptMethod::RandomSubset => "random_subset",
        }
    }

    pub fn parse(s: &str) -> Result<AdaptMethod> {
        match s {
            "seq2seq" => Ok(AdaptMethod::Seq2seq),
            "dkm" => Ok(AdaptMethod::Dkm),
            "ikm" => Ok(AdaptMethod::Ikm),
            "random_subset" => Ok(AdaptMethod::RandomSubset),
            other => bail!(
                "unknown method {other:?}, expected seq2seq, dkm, ikm or random_subset"
            ),
        }
    }

    fn id(&self) -> u64 {
        match self {
            AdaptMethod::Seq2seq => 0,
            AdaptMethod::Dkm => 1,
            AdaptMethod::Ikm => 2,
            AdaptMethod::RandomSubset => 3,
        }
    }
}

/// Checks the method against the source and target sizes.
pub fn validate_target(method: AdaptMethod, k: usize, k_tilde: usize) -> Result<()> {
    if k_tilde == 0 {
        bail!("target size must be >= 1");
    }
    match method {
        AdaptMethod::Seq2seq => {
            let cap = GENERATION_CAP_FACTOR * k;
            if k_tilde > cap {
                bail!("seq2seq generation is capped at {GENERATION_CAP_FACTOR}K = {cap}, got {k_tilde}");
            }
        }
        AdaptMethod::Dkm => {
            if k_tilde >= k {
                bail!("dkm reduces the codebook and needs k_tilde < K = {k}, got {k_tilde}");
            }
        }
        AdaptMethod::Ikm => {
            if k_tilde <= k {
                bail!("ikm grows the codebook and needs k_tilde > K = {k}, got {k_tilde}");
            }
        }
        AdaptMethod::RandomSubset => {
            if k_tilde > k {
                bail!("random_subset needs k_tilde <= K = {k}, got {k_tilde}");
            }
        }
    }
    Ok(())
}

fn adapt_rng(seed: u64, method: AdaptMethod, k_tilde: usize) -> ChaCha8Rng {
    derive_rng(
        seed,
        STREAM_ADAPT_BASE + method.id() * (1 << 20) + k_tilde as u64,
    )
}

/// Produces the adapted codebook. `seed` drives every random draw, so the
/// same `(checkpoint, method, k_tilde, seed)` yields the same book.
pub fn adapt_codebook(
    ck: &Checkpoint,
    method: AdaptMethod,
    k_tilde: usize,
    seed: u64,
) -> Result<Codebook> {
    validate_target(method, ck.codebook.k(), k_tilde)?;
    let cfg = &ck.config;
    let mut rng = adapt_rng(seed, method, k_tilde);
    let book = match method {
        AdaptMethod::Seq2seq => {
            let source = raq_core::Tensor::new(
                vec![ck.codebook.k(), ck.codebook.dim()],
                ck.codebook.to_vec(),
            );
            let rows = ck
                .adapter
                .generate_rows(&source, k_tilde, cfg.cross_forcing)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            Codebook::from_tensor(&rows, UpdateMode::Gradient)
                .map_err(|e| anyhow::anyhow!("{e}"))?
        }
        AdaptMethod::Dkm => {
            let opts = DkmOptions {
                tau: cfg.tau,
                max_iters: cfg.dkm_max_iters,
                ..DkmOptions::default()
            };
            dkm_reduce(&ck.codebook, k_tilde, &opts, &mut rng)
                .map_err(|e| anyhow::anyhow!("{e}"))?
        }
        AdaptMethod::Ikm => {
            let mmd = MmdConfig {
                lambda: cfg.mmd_lambda,
                eta: cfg.mmd_eta,
                max_iters: cfg.ikm_max_iters,
                ..MmdConfig::default()
            };
            ikm_increase(&ck.codebook, k_tilde, &mmd, cfg.tau, &mut rng)
                .map_err(|e| anyhow::anyhow!("{e}"))?
                .codebook
        }
        AdaptMethod::RandomSubset => {
            let picks = rand::seq::index::sample(&mut rng, ck.codebook.k(), k_tilde);
            let mut data = Vec::with_capacity(k_tilde * ck.codebook.dim());
            for i in picks.iter() {
                data.extend_from_slice(&ck.codebook.row(i));
            }
            Codebook::from_rows(k_tilde, ck.codebook.dim(), data, UpdateMode::Gradient)
                .map_err(|e| anyhow::anyhow!("{e}"))?
        }
    };
    Ok(book)
}

/// CLI entry: load checkpoint, adapt, write the RQCB file.
pub fn cmd_adapt(
    ckpt_dir: &Path,
    method: AdaptMethod,
    k_tilde: usize,
    seed_override: Option<u64>,
    out: &Path,
) -> Result<()> {
    let ck = crate::checkpoint::load_checkpoint(ckpt_dir)?;
    let seed = seed_override.unwrap_or(ck.config.seed);
    let book = adapt_codebook(&ck, method, k_tilde, seed)?;
    save_codebook(&book, out)
        .map_err(|e| anyhow::anyhow!("{e}"))
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// True when a generated size exceeds what training ever sampled.
pub fn is_extrapolated(cfg: &ExperimentConfig, method: AdaptMethod, k_tilde: usize) -> bool {
    method == AdaptMethod::Seq2seq && k_tilde > TRAINED_CAP_FACTOR * cfg.codebook_size
}
