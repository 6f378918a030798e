//! Rate sweep evaluation.
//!
//! Quantizes the held-out split against one codebook per task (an adapted
//! size, an explicit RQCB file, or the checkpoint's own book), decodes,
//! and reports per-image means of MSE, PSNR and SSIM plus usage-based
//! perplexity. Adapted codebooks are produced once per task and reused
//! across the split; per-batch regeneration exists only to measure what
//! that caching saves. Identical config and seed produce identical CSV
//! bytes.

use crate::adapt::{adapt_codebook, is_extrapolated, AdaptMethod};
use crate::checkpoint::{fnv64, load_checkpoint, model_path, Checkpoint};
use crate::data::{heldout_split, Dataset};
use crate::model::ToyVqModel;
use anyhow::{bail, Context, Result};
use raq_core::metrics::{mse, psnr, ssim, EvalRecord};
use raq_core::training::VqBackbone;
use raq_core::vq::{load_codebook, quantize, Codebook};
use raq_core::{Tape, Tensor};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const DUMPED_IMAGES: usize = 8;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Target sizes to adapt to with `method`.
    pub sizes: Vec<usize>,
    pub method: AdaptMethod,
    /// Explicit adapted codebook files, evaluated as-is.
    pub codebook_files: Vec<PathBuf>,
    /// Directory for 8-bit grayscale dumps of originals and recons.
    pub dump_recons: Option<PathBuf>,
    /// Sweep width: seeds `seed..seed+n` rerun every adapted size.
    pub seeds: u64,
    /// Regenerate the adapted book before every batch instead of caching.
    pub regenerate_per_batch: bool,
    /// Base seed for adaptation draws; defaults to the checkpoint's seed.
    pub seed_override: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> EvalOptions {
        EvalOptions {
            sizes: Vec::new(),
            method: AdaptMethod::Seq2seq,
            codebook_files: Vec::new(),
            dump_recons: None,
            seeds: 1,
            regenerate_per_batch: false,
            seed_override: None,
        }
    }
}

pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub csv: String,
    /// Wall time spent producing codebooks, summed over tasks.
    pub adapt_seconds: f64,
}

enum Source {
    Original,
    Generated { method: AdaptMethod, k_tilde: usize },
    File(PathBuf),
}

struct Task {
    label: String,
    seed: u64,
    source: Source,
}

struct SplitMetrics {
    mse: f64,
    psnr: f64,
    ssim: f64,
    counts: Vec<u64>,
}

fn encode_rows(model: &ToyVqModel, batch: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let rows = model.encode(&mut tape, batch);
    Tensor::new(tape.shape(rows).to_vec(), tape.value(rows).to_vec())
}

fn decode_rows(model: &ToyVqModel, rows: Tensor, batch_n: usize) -> Vec<f32> {
    let mut tape = Tape::new();
    let v = tape.constant_from(rows.shape().to_vec(), rows.data().to_vec());
    let out = model.decode(&mut tape, v, batch_n);
    tape.value(out).iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

fn dump_png(dir: &Path, name: &str, size: usize, pixels: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(size as u32, size as u32, bytes)
        .expect("buffer matches dimensions");
    let path = dir.join(name);
    img.save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// One pass over the split with a fixed codebook (or a per-batch producer).
fn eval_split(
    ck: &Checkpoint,
    data: &Dataset,
    task: &Task,
    regenerate: bool,
    adapt_seconds: &mut f64,
    dump: Option<(&Path, String)>,
) -> Result<(usize, SplitMetrics)> {
    let produce = |secs: &mut f64| -> Result<Codebook> {
        let started = Instant::now();
        let book = match &task.source {
            Source::Original => ck.codebook.duplicate(),
            Source::Generated { method, k_tilde } => {
                adapt_codebook(ck, *method, *k_tilde, task.seed)?
            }
            Source::File(path) => load_codebook(path)
                .map_err(|e| anyhow::anyhow!("{e}"))
                .with_context(|| format!("loading {}", path.display()))?,
        };
        *secs += started.elapsed().as_secs_f64();
        if book.dim() != ck.codebook.dim() {
            bail!(
                "codebook width {} does not match the model's {}",
                book.dim(),
                ck.codebook.dim()
            );
        }
        Ok(book)
    };

    let mut cached = if regenerate { None } else { Some(produce(adapt_seconds)?) };
    let size = data.size();
    let batch_size = ck.config.batch_size;
    let mut k_tilde = cached.as_ref().map(|b| b.k()).unwrap_or(0);
    let (mut sum_mse, mut sum_psnr, mut sum_ssim) = (0.0, 0.0, 0.0);
    let mut counts: Vec<u64> = Vec::new();
    let mut dumped = 0usize;

    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let book = match &cached {
            Some(b) => b,
            None => {
                cached = Some(produce(adapt_seconds)?);
                cached.as_ref().unwrap()
            }
        };
        k_tilde = book.k();
        if counts.is_empty() {
            counts = vec![0; k_tilde];
        }
        let batch = data.batch(chunk);
        let z_e = encode_rows(&ck.model, &batch);
        let q = quantize(&z_e, book).map_err(|e| anyhow::anyhow!("{e}"))?;
        for (c, n) in counts.iter_mut().zip(&q.usage_counts) {
            *c += n;
        }
        let recon = decode_rows(&ck.model, q.quantized, chunk.len());
        let px = size * size;
        for (i, _) in chunk.iter().enumerate() {
            let x = &batch.data()[i * px..(i + 1) * px];
            let y = &recon[i * px..(i + 1) * px];
            sum_mse += mse(x, y).map_err(|e| anyhow::anyhow!("{e}"))?;
            sum_psnr += psnr(x, y, 1.0).map_err(|e| anyhow::anyhow!("{e}"))?;
            sum_ssim += ssim(x, y, size, size, SSIM_WINDOW, SSIM_SIGMA, 1.0)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            if let Some((dir, label)) = &dump {
                if dumped < DUMPED_IMAGES {
                    dump_png(dir, &format!("recon_{label}_{dumped:02}.png"), size, y)?;
                    dumped += 1;
                }
            }
        }
        if regenerate {
            cached = None;
        }
    }

    let n = data.len() as f64;
    Ok((
        k_tilde,
        SplitMetrics {
            mse: sum_mse / n,
            psnr: sum_psnr / n,
            ssim: sum_ssim / n,
            counts,
        },
    ))
}

fn build_tasks(ck: &Checkpoint, opts: &EvalOptions) -> Result<Vec<Task>> {
    if opts.seeds == 0 {
        bail!("seed sweep needs at least one seed");
    }
    let base_seed = opts.seed_override.unwrap_or(ck.config.seed);
    let mut tasks = Vec::new();
    for path in &opts.codebook_files {
        tasks.push(Task {
            label: "file".to_string(),
            seed: base_seed,
            source: Source::File(path.clone()),
        });
    }
    for sweep in 0..opts.seeds {
        for &k_tilde in &opts.sizes {
            crate::adapt::validate_target(opts.method, ck.codebook.k(), k_tilde)?;
            tasks.push(Task {
                label: opts.method.name().to_string(),
                seed: base_seed + sweep,
                source: Source::Generated {
                    method: opts.method,
                    k_tilde,
                },
            });
        }
    }
    if tasks.is_empty() {
        tasks.push(Task {
            label: "original".to_string(),
            seed: base_seed,
            source: Source::Original,
        });
    }
    Ok(tasks)
}

fn write_eval_manifest(
    out_csv: &Path,
    ck: &Checkpoint,
    ckpt_dir: &Path,
    opts: &EvalOptions,
    records: &[EvalRecord],
    dataset_fingerprint: u64,
) -> Result<PathBuf> {
    let ckpt_bytes = std::fs::read(model_path(ckpt_dir))?;
    let mut m = String::new();
    let _ = writeln!(m, "run = eval");
    let _ = writeln!(m, "tool_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "checkpoint = {}", ckpt_dir.display());
    let _ = writeln!(m, "checkpoint_fingerprint = {:016x}", fnv64(&ckpt_bytes));
    let _ = writeln!(m, "dataset_fingerprint = {dataset_fingerprint:016x}");
    let _ = writeln!(m, "seed_sweep = {}", opts.seeds);
    for r in records {
        let extra = if is_extrapolated(&ck.config, opts.method, r.k_tilde)
            && r.method == opts.method.name()
        {
            " (extrapolated beyond the trained size range)"
        } else {
            ""
        };
        let _ = writeln!(
            m,
            "row = k_tilde {} method {} seed {}{extra}",
            r.k_tilde, r.method, r.seed
        );
    }
    let _ = writeln!(m, "\n[config]");
    m.push_str(&ck.config.to_toml());
    let name = match out_csv.file_stem() {
        Some(stem) => format!("{}.manifest.txt", stem.to_string_lossy()),
        None => "eval.manifest.txt".to_string(),
    };
    let path = out_csv.with_file_name(name);
    std::fs::write(&path, m).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// CLI entry: evaluate every task and write the CSV report plus manifest.
pub fn cmd_eval(ckpt_dir: &Path, opts: &EvalOptions, out_csv: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint(ckpt_dir)?;
    let data = heldout_split(&ck.config)?;
    let tasks = build_tasks(&ck, opts)?;
    if let Some(dir) = &opts.dump_recons {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let n = data.len().min(DUMPED_IMAGES);
        for i in 0..n {
            dump_png(dir, &format!("orig_{i:02}.png"), data.size(), data.image(i))?;
        }
    }

    let mut records = Vec::with_capacity(tasks.len());
    let mut adapt_seconds = 0.0;
    for (idx, task) in tasks.iter().enumerate() {
        // Recon dumps are tagged per task so sweeps do not overwrite each
        // other.
        let tag = match &task.source {
            Source::Original => format!("original_s{}", task.seed),
            Source::Generated { k_tilde, .. } => {
                format!("{}_k{}_s{}", task.label, k_tilde, task.seed)
            }
            Source::File(_) => format!("file{idx}_s{}", task.seed),
        };
        let dump = opts.dump_recons.as_deref().map(|d| (d, tag));
        let (k_tilde, metrics) = eval_split(
            &ck,
            &data,
            task,
            opts.regenerate_per_batch,
            &mut adapt_seconds,
            dump,
        )?;
        let perplexity =
            raq_core::metrics::perplexity(&metrics.counts).map_err(|e| anyhow::anyhow!("{e}"))?;
        records.push(EvalRecord {
            k_tilde,
            method: task.label.clone(),
            mse: metrics.mse,
            psnr: metrics.psnr,
            ssim: metrics.ssim,
            perplexity,
            usage: metrics.counts.iter().filter(|&&c| c > 0).count(),
            seed: task.seed,
        });
    }

    let mut csv = String::from(EvalRecord::CSV_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(out_csv, &csv).with_context(|| format!("writing {}", out_csv.display()))?;
    write_eval_manifest(out_csv, &ck, ckpt_dir, opts, &records, data.fingerprint())?;
    Ok(EvalReport {
        records,
        csv,
        adapt_seconds,
    })
}
