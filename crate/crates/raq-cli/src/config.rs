//! Experiment configuration.
//!
//! A flat TOML file with one key per field. Unknown keys are rejected so a
//! typo cannot silently fall back to a default, and the parsed struct
//! round-trips through `to_toml` losslessly. The effective seed resolves
//! with precedence: `RAQ_SEED` env var, then a `--seed` flag, then the
//! config file value.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetKind::Synthetic => write!(f, "synthetic"),
            DatasetKind::Idx => write!(f, "idx"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateModeKind {
    Ema,
    Gradient,
}

impl fmt::Display for UpdateModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateModeKind::Ema => write!(f, "ema"),
            UpdateModeKind::Gradient => write!(f, "gradient"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // Dataset.
    pub dataset: DatasetKind,
    pub n_images: usize,
    pub eval_images: usize,
    pub image_size: usize,
    /// Training images in IDX format; used when `dataset = "idx"`.
    pub idx_path: String,
    /// Held-out images in IDX format; used when `dataset = "idx"`.
    pub idx_eval_path: String,

    // Model topology.
    pub latent_size: usize,
    pub embedding_dim: usize,
    pub codebook_size: usize,
    pub hidden_units: usize,
    pub residual_units: usize,
    pub adapter_layers: usize,

    // Training.
    pub k_min: usize,
    pub k_max: usize,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub codebook_update_mode: UpdateModeKind,
    pub cross_forcing: bool,
    pub snapshot_every: usize,

    // Training-free adaptation.
    pub dkm_max_iters: usize,
    pub ikm_max_iters: usize,
    pub mmd_lambda: f64,
    pub mmd_eta: f64,

    // Evaluation.
    pub eval_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            n_images: 512,
            eval_images: 64,
            image_size: 16,
            idx_path: String::new(),
            idx_eval_path: String::new(),
            latent_size: 4,
            embedding_dim: 8,
            codebook_size: 32,
            hidden_units: 16,
            residual_units: 8,
            adapter_layers: 2,
            k_min: 8,
            k_max: 64,
            beta: 0.25,
            gamma: 0.99,
            tau: 0.01,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            steps: 500,
            batch_size: 16,
            codebook_update_mode: UpdateModeKind::Ema,
            cross_forcing: true,
            snapshot_every: 100,
            dkm_max_iters: 200,
            ikm_max_iters: 5000,
            mmd_lambda: 1e-4,
            mmd_eta: 0.1,
            eval_sizes: vec![8, 16, 32, 64],
            seed: 17,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        ExperimentConfig::from_toml(&text)
            .with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            bail!("image_size must be >= 16, got {}", self.image_size);
        }
        if self.image_size % 4 != 0 {
            bail!(
                "image_size must be divisible by 4 (two stride-2 layers), got {}",
                self.image_size
            );
        }
        if self.latent_size != self.image_size / 4 {
            bail!(
                "latent_size must be image_size/4 = {}, got {}",
                self.image_size / 4,
                self.latent_size
            );
        }
        if self.embedding_dim == 0 || self.hidden_units == 0 || self.residual_units == 0 {
            bail!("model widths must be >= 1");
        }
        if self.adapter_layers == 0 {
            bail!("adapter_layers must be >= 1");
        }
        if self.codebook_size == 0 {
            bail!("codebook_size must be >= 1");
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            bail!(
                "target size range needs 1 <= k_min <= k_max, got [{}, {}]",
                self.k_min,
                self.k_max
            );
        }
        if self.codebook_size < self.k_min || self.codebook_size > self.k_max {
            bail!(
                "codebook_size {} must lie in [k_min, k_max] = [{}, {}]",
                self.codebook_size,
                self.k_min,
                self.k_max
            );
        }
        if self.eval_sizes.is_empty() || self.eval_sizes.iter().any(|&s| s == 0) {
            bail!("eval_sizes must be a nonempty list of sizes >= 1");
        }
        if self.steps == 0 || self.batch_size == 0 || self.snapshot_every == 0 {
            bail!("steps, batch_size and snapshot_every must be >= 1");
        }
        if self.n_images == 0 || self.eval_images == 0 {
            bail!("n_images and eval_images must be >= 1");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            bail!("beta must be positive, got {}", self.beta);
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            bail!("gamma must lie in (0, 1), got {}", self.gamma);
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bail!("tau must be positive, got {}", self.tau);
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!("learning_rate must be positive, got {}", self.learning_rate);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!("weight_decay must be >= 0, got {}", self.weight_decay);
        }
        if !(self.mmd_lambda >= 0.0) || !(self.mmd_eta > 0.0) {
            bail!("mmd_lambda must be >= 0 and mmd_eta > 0");
        }
        if self.dataset == DatasetKind::Idx && self.idx_path.is_empty() {
            bail!("dataset = \"idx\" requires idx_path");
        }
        Ok(())
    }

    /// Latent rows produced per image: one per spatial position.
    pub fn rows_per_image(&self) -> usize {
        self.latent_size * self.latent_size
    }
}

/// Effective seed: environment override, then flag, then config file.
pub fn resolve_seed(env_value: Option<&str>, flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(text) = env_value {
        let seed: u64 = text
            .trim()
            .parse()
            .with_context(|| format!("RAQ_SEED must be a nonnegative integer, got {text:?}"))?;
        return Ok(seed);
    }
    Ok(flag.unwrap_or(config_seed))
}

/// Reads `RAQ_SEED` from the process environment.
pub fn env_seed() -> Option<String> {
    std::env::var("RAQ_SEED").ok()
}
