//! Image datasets: a synthetic shape generator and IDX file I/O.
//!
//! Images are grayscale, stored row-major as `f32` in `[0, 1]`. The
//! synthetic generator draws 1 to 3 axis-aligned rectangles and circles
//! per image and is bitwise deterministic per seed. IDX files use the
//! unsigned-byte 3-D layout (magic `00 00 08 03`, big-endian dims).

use crate::config::{DatasetKind, ExperimentConfig};
use crate::rng::{derive_seed, STREAM_EVAL_DATA, STREAM_TRAIN_DATA};
use anyhow::{bail, Context, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raq_core::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const IDX_MAGIC: [u8; 4] = [0x00, 0x00, 0x08, 0x03];

/// A stack of square grayscale images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    size: usize,
    pixels: Vec<f32>,
}

impl Dataset {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Dataset> {
        if size == 0 || pixels.is_empty() || pixels.len() % (size * size) != 0 {
            bail!(
                "pixel buffer of {} values does not tile {size}x{size} images",
                pixels.len()
            );
        }
        Ok(Dataset { size, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / (self.size * self.size)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.size * self.size;
        &self.pixels[i * px..(i + 1) * px]
    }

    /// Stacks the given images into a `[B, 1, size, size]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let px = self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), 1, self.size, self.size], data)
    }

    /// FNV-1a over dims and pixel bytes, for run manifests.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for v in [self.len() as u32, self.size as u32] {
            v.to_le_bytes().into_iter().for_each(&mut eat);
        }
        for p in &self.pixels {
            p.to_le_bytes().into_iter().for_each(&mut eat);
        }
        h
    }
}

/// `n` images of 1 to 3 random rectangles and circles on black.
pub fn gen_synthetic_shapes(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 16 {
        bail!("synthetic images need size >= 16, got {size}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0.0f32; n * size * size];
    for img in pixels.chunks_exact_mut(size * size) {
        let shapes = rng.gen_range(1..=3);
        for _ in 0..shapes {
            let intensity = rng.gen_range(0.25..=1.0f64) as f32;
            if rng.gen_bool(0.5) {
                let w = rng.gen_range(3..=size / 2);
                let h = rng.gen_range(3..=size / 2);
                let x0 = rng.gen_range(0..=size - w);
                let y0 = rng.gen_range(0..=size - h);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        img[y * size + x] = intensity;
                    }
                }
            } else {
                let r = rng.gen_range(2..=size / 4);
                let cx = rng.gen_range(r..size - r) as isize;
                let cy = rng.gen_range(r..size - r) as isize;
                let rr = (r * r) as isize;
                for y in (cy - r as isize)..=(cy + r as isize) {
                    for x in (cx - r as isize)..=(cx + r as isize) {
                        let (dx, dy) = (x - cx, y - cy);
                        if dx * dx + dy * dy <= rr {
                            img[y as usize * size + x as usize] = intensity;
                        }
                    }
                }
            }
        }
    }
    Dataset::new(size, pixels)
}

/// Reads an unsigned-byte 3-D IDX file, normalizing pixels to `[0, 1]`.
pub fn read_idx(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).with_context(|| format!("reading IDX file {}", path.display()))?;
    parse_idx(&bytes).with_context(|| format!("parsing IDX file {}", path.display()))
}

fn parse_idx(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 {
        bail!("truncated header: {} bytes", bytes.len());
    }
    let magic = &bytes[..4];
    if magic != IDX_MAGIC {
        bail!(
            "bad magic {:02x} {:02x} {:02x} {:02x}, expected 00 00 08 03",
            magic[0],
            magic[1],
            magic[2],
            magic[3]
        );
    }
    if bytes.len() < 16 {
        bail!("truncated dimension header: {} bytes", bytes.len());
    }
    let dim = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (n, rows, cols) = (dim(1), dim(2), dim(3));
    if rows != cols {
        bail!("images must be square, got {rows}x{cols}");
    }
    if n == 0 || rows == 0 {
        bail!("empty dataset: {n} images of {rows}x{cols}");
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        bail!(
            "truncated payload: need {expected} bytes for {n} images of {rows}x{cols}, found {}",
            bytes.len()
        );
    }
    if bytes.len() > expected {
        bail!("{} trailing bytes after payload", bytes.len() - expected);
    }
    let pixels = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(rows, pixels)
}

/// Writes the dataset in unsigned-byte 3-D IDX layout, quantizing to 8 bits.
pub fn write_idx(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path)
        .with_context(|| format!("creating IDX file {}", path.display()))?;
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(&IDX_MAGIC);
    header.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    header.extend_from_slice(&(dataset.size() as u32).to_be_bytes());
    header.extend_from_slice(&(dataset.size() as u32).to_be_bytes());
    f.write_all(&header)?;
    let bytes: Vec<u8> = dataset
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)
        .with_context(|| format!("writing IDX file {}", path.display()))?;
    Ok(())
}

fn sized_for(cfg: &ExperimentConfig, d: Dataset, which: &str) -> Result<Dataset> {
    if d.size() != cfg.image_size {
        bail!(
            "{which} images are {0}x{0}, config expects {1}x{1}",
            d.size(),
            cfg.image_size
        );
    }
    Ok(d)
}

/// Training images per the config: synthetic from a seed stream of their
/// own, or an IDX file.
pub fn training_split(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Synthetic => gen_synthetic_shapes(
            cfg.n_images,
            cfg.image_size,
            derive_seed(cfg.seed, STREAM_TRAIN_DATA),
        ),
        DatasetKind::Idx => sized_for(cfg, read_idx(&cfg.idx_path)?, "training"),
    }
}

/// Held-out images, disjoint from the training stream by construction.
pub fn heldout_split(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Synthetic => gen_synthetic_shapes(
            cfg.eval_images,
            cfg.image_size,
            derive_seed(cfg.seed, STREAM_EVAL_DATA),
        ),
        DatasetKind::Idx => {
            if cfg.idx_eval_path.is_empty() {
                bail!("dataset = \"idx\" evaluation requires idx_eval_path");
            }
            sized_for(cfg, read_idx(&cfg.idx_eval_path)?, "held-out")
        }
    }
}

/// Reads a whole file as IDX bytes would be consumed, for fixture checks.
pub fn read_file_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_synthetic_shapes(8, 16, 42).unwrap();
        let b = gen_synthetic_shapes(8, 16, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_shapes(8, 16, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pixels_in_unit_interval() {
        let d = gen_synthetic_shapes(64, 16, 7).unwrap();
        assert!(d.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn mean_intensity_in_expected_band() {
        let d = gen_synthetic_shapes(1000, 16, 1).unwrap();
        let mean = d.pixels.iter().map(|&p| p as f64).sum::<f64>() / d.pixels.len() as f64;
        assert!((0.05..=0.6).contains(&mean), "mean intensity {mean}");
    }

    #[test]
    fn too_small_size_rejected() {
        assert!(gen_synthetic_shapes(1, 8, 0).is_err());
    }

    #[test]
    fn handcrafted_idx_fixture_parses() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03];
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 255, 128, 64, 32, 16, 8, 4, 2, 1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.idx");
        std::fs::write(&path, &bytes).unwrap();
        let d = read_idx(&path).unwrap();
        assert_eq!((d.len(), d.size()), (4, 2));
        assert_eq!(d.image(0), &[0.0, 51.0 / 255.0, 102.0 / 255.0, 153.0 / 255.0]);
        assert_eq!(d.image(2)[0], 128.0 / 255.0);
    }

    #[test]
    fn wrong_magic_names_offending_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        std::fs::write(&path, [0xde, 0xad, 0xbe, 0xef, 0, 0, 0, 0]).unwrap();
        let err = format!("{:#}", read_idx(&path).unwrap_err());
        assert!(err.contains("de ad be ef"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03];
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        std::fs::write(&path, &bytes).unwrap();
        let err = format!("{:#}", read_idx(&path).unwrap_err());
        assert!(err.contains("truncated payload"), "{err}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03];
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 4, 99]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.idx");
        std::fs::write(&path, &bytes).unwrap();
        let err = format!("{:#}", read_idx(&path).unwrap_err());
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn idx_write_read_round_trip() {
        let d = gen_synthetic_shapes(5, 16, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.idx");
        write_idx(&d, &path).unwrap();
        let back = read_idx(&path).unwrap();
        assert_eq!((back.len(), back.size()), (5, 16));
        // Quantization to 8 bits is the only loss.
        for (a, b) in d.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let path2 = dir.path().join("round2.idx");
        write_idx(&back, &path2).unwrap();
        assert_eq!(read_file_bytes(&path).unwrap(), read_file_bytes(&path2).unwrap());
    }

    #[test]
    fn train_and_heldout_streams_differ() {
        let mut cfg = crate::config::ExperimentConfig::default();
        cfg.n_images = 4;
        cfg.eval_images = 4;
        let train = training_split(&cfg).unwrap();
        let eval = heldout_split(&cfg).unwrap();
        assert_ne!(train, eval);
        assert_eq!(training_split(&cfg).unwrap(), train);
    }

    #[test]
    fn batch_stacks_images() {
        let d = gen_synthetic_shapes(4, 16, 9).unwrap();
        let t = d.batch(&[2, 0]);
        assert_eq!(t.shape(), &[2, 1, 16, 16]);
        assert_eq!(&t.data()[..256], d.image(2));
        assert_eq!(&t.data()[256..], d.image(0));
    }
}
