//! Reconstruction quality metrics and the per-rate evaluation record.

use crate::error::{Error, Result};

/// Mean squared error between two equally sized buffers, in f64.
pub fn mse(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "mse: lengths {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let acc: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(acc / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB: `10*log10(range^2 / mse)`, capped at
/// 100 dB for perfect reconstructions.
pub fn psnr(x: &[f32], y: &[f32], data_range: f64) -> Result<f64> {
    if data_range <= 0.0 {
        return Err(Error::invalid(format!("data_range {data_range} must be > 0")));
    }
    let err = mse(x, y)?;
    if err == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (data_range * data_range / err).log10()).min(100.0))
}

/// Mean structural similarity over all fully-valid window positions.
///
/// Gaussian-weighted local statistics (window x window taps, the given
/// sigma), biased variances, `C1 = (k1*range)^2`, `C2 = (k2*range)^2` with
/// the conventional k1 = 0.01, k2 = 0.03.
pub fn ssim(
    x: &[f32],
    y: &[f32],
    height: usize,
    width: usize,
    window: usize,
    sigma: f64,
    data_range: f64,
) -> Result<f64> {
    if x.len() != y.len() || x.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "ssim: buffers {}/{} vs {}x{}",
            x.len(),
            y.len(),
            height,
            width
        )));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("window {window} must be odd")));
    }
    if height < window || width < window {
        return Err(Error::invalid(format!(
            "image {height}x{width} smaller than window {window}"
        )));
    }
    if sigma <= 0.0 || data_range <= 0.0 {
        return Err(Error::invalid("sigma and data_range must be > 0"));
    }

    let mut weights = vec![0.0f64; window * window];
    let half = (window / 2) as isize;
    let mut wsum = 0.0f64;
    for wy in 0..window {
        for wx in 0..window {
            let dy = wy as isize - half;
            let dx = wx as isize - half;
            let w = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            weights[wy * window + wx] = w;
            wsum += w;
        }
    }
    for w in &mut weights {
        *w /= wsum;
    }

    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for cy in 0..=(height - window) {
        for cx in 0..=(width - window) {
            let (mut mx, mut my) = (0.0f64, 0.0f64);
            let (mut mxx, mut myy, mut mxy) = (0.0f64, 0.0f64, 0.0f64);
            for wy in 0..window {
                for wx in 0..window {
                    let w = weights[wy * window + wx];
                    let a = x[(cy + wy) * width + cx + wx] as f64;
                    let b = y[(cy + wy) * width + cx + wx] as f64;
                    mx += w * a;
                    my += w * b;
                    mxx += w * a * a;
                    myy += w * b * b;
                    mxy += w * a * b;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Codebook usage perplexity `exp(-sum p_i ln p_i)` from assignment counts,
/// with `0 * ln 0 = 0`.
pub fn perplexity(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("perplexity of all-zero counts".into()));
    }
    let total = total as f64;
    let mut entropy = 0.0f64;
    for &c in counts {
        if c == 0 {
            continue;
        }
        let p = c as f64 / total;
        entropy -= p * p.ln();
    }
    Ok(entropy.exp())
}

/// One row of a rate sweep report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub k_tilde: usize,
    pub method: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perplexity: f64,
    /// Number of codes with nonzero usage.
    pub usage: usize,
    pub seed: u64,
}

impl EvalRecord {
    pub const CSV_HEADER: &'static str = "k_tilde,method,mse,psnr,ssim,perplexity,usage,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8},{:.4},{:.6},{:.4},{},{}",
            self.k_tilde,
            self.method,
            self.mse,
            self.psnr,
            self.ssim,
            self.perplexity,
            self.usage,
            self.seed
        )
    }
}
