//! Command-line interface: train, adapt, eval, gen-data,
//! inspect-codebook. Flags mirror the config file keys; `RAQ_SEED`
//! outranks both the `--seed` flag and the file.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use raq_cli::adapt::AdaptMethod;
use raq_cli::config::{env_seed, DatasetKind, ExperimentConfig, UpdateModeKind};
use raq_cli::data::{gen_synthetic_shapes, write_idx};
use raq_cli::eval::EvalOptions;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "raq", version, about = "Rate-adaptive vector quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, codebook, adapter, log, manifest.
    Train(TrainArgs),
    /// Produce an adapted codebook file from a checkpoint.
    Adapt(AdaptArgs),
    /// Evaluate codebooks on the held-out split and write a CSV report.
    Eval(EvalArgs),
    /// Generate a synthetic shape dataset as an IDX file.
    GenData(GenDataArgs),
    /// Print a codebook file's header and row statistics.
    InspectCodebook { path: PathBuf },
}

/// Optional overrides for every config key, applied over the file.
#[derive(Args, Default)]
struct ConfigOverrides {
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    eval_images: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    idx_path: Option<String>,
    #[arg(long)]
    idx_eval_path: Option<String>,
    #[arg(long)]
    latent_size: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    hidden_units: Option<usize>,
    #[arg(long)]
    residual_units: Option<usize>,
    #[arg(long)]
    adapter_layers: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    codebook_update_mode: Option<UpdateModeKind>,
    #[arg(long)]
    cross_forcing: Option<bool>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    dkm_max_iters: Option<usize>,
    #[arg(long)]
    ikm_max_iters: Option<usize>,
    #[arg(long)]
    mmd_lambda: Option<f64>,
    #[arg(long)]
    mmd_eta: Option<f64>,
    /// Comma-separated list, e.g. 8,16,32,64.
    #[arg(long, value_parser = parse_sizes)]
    eval_sizes: Option<std::vec::Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    match s {
        "synthetic" => Ok(DatasetKind::Synthetic),
        "idx" => Ok(DatasetKind::Idx),
        other => Err(format!("unknown dataset {other:?}, expected synthetic or idx")),
    }
}

fn parse_mode(s: &str) -> Result<UpdateModeKind, String> {
    match s {
        "ema" => Ok(UpdateModeKind::Ema),
        "gradient" => Ok(UpdateModeKind::Gradient),
        other => Err(format!("unknown mode {other:?}, expected ema or gradient")),
    }
}

fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("size {p:?}: {e}")))
        .collect()
}

fn parse_method(s: &str) -> Result<AdaptMethod, String> {
    AdaptMethod::parse(s).map_err(|e| format!("{e}"))
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        set!(
            dataset, n_images, eval_images, image_size, idx_path, idx_eval_path,
            latent_size, embedding_dim, codebook_size, hidden_units, residual_units,
            adapter_layers, k_min, k_max, beta, gamma, tau, learning_rate,
            weight_decay, steps, batch_size, codebook_update_mode, cross_forcing,
            snapshot_every, dkm_max_iters, ikm_max_iters, mmd_lambda, mmd_eta,
            eval_sizes
        );
        // The seed is resolved separately so the environment can outrank it.
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint files and the log.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Resume from an existing checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: AdaptMethod,
    #[arg(long)]
    k_tilde: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target sizes to adapt to, e.g. 8,16,32,64.
    #[arg(long, value_parser = parse_sizes)]
    sizes: Option<std::vec::Vec<usize>>,
    #[arg(long, value_parser = parse_method, default_value = "seq2seq")]
    method: AdaptMethod,
    /// Explicit adapted codebook files to evaluate as-is.
    #[arg(long)]
    codebook: Vec<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Write originals and reconstructions as 8-bit grayscale PNGs.
    #[arg(long)]
    dump_recons: Option<PathBuf>,
    /// Repeat adapted sizes over this many consecutive seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Rebuild the adapted codebook before every batch (timing study).
    #[arg(long)]
    regenerate_per_batch: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

/// Environment beats flag; flag beats the fallback.
fn effective_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    raq_cli::config::resolve_seed(env_seed().as_deref(), flag, fallback)
}

/// Environment beats flag; `None` keeps the checkpoint's own seed.
fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    match env_seed() {
        Some(text) => {
            let seed = text
                .trim()
                .parse()
                .with_context(|| format!("RAQ_SEED must be a nonnegative integer, got {text:?}"))?;
            Ok(Some(seed))
        }
        None => Ok(flag),
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match (&args.config, &args.resume) {
        (Some(_), Some(_)) => {
            bail!("--config and --resume conflict: resuming uses the checkpoint's embedded config")
        }
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(dir)) => raq_cli::checkpoint::load_checkpoint(dir)?.config,
        (None, None) => ExperimentConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.seed = effective_seed(args.overrides.seed, cfg.seed)?;
    let outcome = raq_cli::train::cmd_train(&cfg, &args.out, args.resume.as_deref())?;
    let last = outcome.log.last().expect("at least one step ran");
    println!(
        "trained {} steps into {} (final l_vq {:.6}, l_raq {:.6})",
        outcome.log.len(),
        outcome.out_dir.display(),
        last.l_vq,
        last.l_raq
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        sizes: args.sizes.unwrap_or_default(),
        method: args.method,
        codebook_files: args.codebook,
        dump_recons: args.dump_recons,
        seeds: args.seeds,
        regenerate_per_batch: args.regenerate_per_batch,
        seed_override: seed_override(args.seed)?,
    };
    let report = raq_cli::eval::cmd_eval(&args.checkpoint, &opts, &args.out)?;
    print!("{}", report.csv);
    println!("# wrote {}", args.out.display());
    Ok(())
}

fn run_inspect(path: PathBuf) -> Result<()> {
    let book = raq_core::vq::load_codebook(&path).map_err(|e| anyhow::anyhow!("{e}"))?;
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, 0.0f64, 0.0f64);
    for i in 0..book.k() {
        let norm = book.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        lo = lo.min(norm);
        hi = hi.max(norm);
        sum += norm;
    }
    println!("file: {}", path.display());
    println!("codes: {}  dim: {}", book.k(), book.dim());
    println!(
        "update mode: {:?}  averaging state: {}",
        book.mode(),
        if book.ema().is_some() { "present" } else { "absent" }
    );
    println!(
        "row norms: min {:.6}  mean {:.6}  max {:.6}",
        lo,
        sum / book.k() as f64,
        hi
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => run_train(args),
        Command::Adapt(args) => {
            let seed = seed_override(args.seed)?;
            raq_cli::adapt::cmd_adapt(&args.checkpoint, args.method, args.k_tilde, seed, &args.out)?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Eval(args) => run_eval(args),
        Command::GenData(args) => {
            let seed = effective_seed(Some(args.seed), args.seed)?;
            let data = gen_synthetic_shapes(args.n, args.size, seed)?;
            write_idx(&data, &args.out)?;
            println!(
                "wrote {} ({} images of {}x{}, fingerprint {:016x})",
                args.out.display(),
                data.len(),
                data.size(),
                data.size(),
                data.fingerprint()
            );
            Ok(())
        }
        Command::InspectCodebook { path } => run_inspect(path),
    }
}
