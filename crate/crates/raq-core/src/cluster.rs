//! Training-free codebook resizing by clustering.
//!
//! Rate reduction runs soft k-means: distances become a temperature softmax
//! attention matrix, candidate centroids are attention-weighted means, and
//! the loop stops at a fixed point. Rate increase optimizes a larger
//! candidate codebook so that its soft-clustered reduction matches the
//! original codebook under an MMD objective, descending by SGD through the
//! soft clustering operator.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::optim::sgd_step;
use crate::tape::Tape;
use crate::tensor::{shared, Tensor};
use crate::vq::{Codebook, UpdateMode};

/// A soft-centroid column whose attention mass falls below this keeps its
/// previous row, mirroring Lloyd's empty-cluster rule in the hard limit.
const DEAD_MASS_EPS: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    KmeansPlusPlus,
    RandomSubset,
}

/// Seeded centroid initialization shared by Lloyd and the soft reducer.
pub fn init_centroids(
    points: &Tensor,
    k: usize,
    method: InitMethod,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (n, d) = points_shape(points)?;
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cannot place {k} centroids on {n} points"
        )));
    }
    let data = points.data();
    let chosen: Vec<usize> = match method {
        InitMethod::RandomSubset => rand::seq::index::sample(rng, n, k).into_vec(),
        InitMethod::KmeansPlusPlus => {
            let mut chosen = vec![rng.gen_range(0..n)];
            let mut best_sq = vec![f64::INFINITY; n];
            while chosen.len() < k {
                let last = *chosen.last().unwrap();
                for i in 0..n {
                    let sq = row_sqdist(data, i, data, last, d);
                    if sq < best_sq[i] {
                        best_sq[i] = sq;
                    }
                }
                let total: f64 = best_sq.iter().sum();
                let next = if total > 0.0 {
                    let mut draw = rng.gen_range(0.0..total);
                    let mut pick = n - 1;
                    for (i, &w) in best_sq.iter().enumerate() {
                        if draw < w {
                            pick = i;
                            break;
                        }
                        draw -= w;
                    }
                    pick
                } else {
                    // All remaining distances are zero (duplicate points):
                    // fall back to any index not already chosen.
                    (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
                };
                chosen.push(next);
            }
            chosen
        }
    };
    let mut out = Vec::with_capacity(k * d);
    for &i in &chosen {
        out.extend_from_slice(&data[i * d..(i + 1) * d]);
    }
    Ok(Tensor::new(vec![k, d], out))
}

#[derive(Debug)]
pub struct KmeansResult {
    pub centroids: Tensor,
    pub assignments: Vec<u32>,
    /// Objective (sum of squared distances to assigned centroids) after
    /// every assignment step, from the initial centroids to convergence.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KmeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// Lloyd's alternating assignment / mean update from the given centroids.
/// Empty clusters keep their previous centroid. Ties go to the lowest index.
pub fn kmeans_lloyd(points: &Tensor, init: &Tensor, max_iters: usize) -> Result<KmeansResult> {
    let (n, d) = points_shape(points)?;
    let (k, dc) = points_shape(init)?;
    if dc != d || k > n {
        return Err(Error::invalid(format!(
            "init centroids [{k}, {dc}] incompatible with {n} points of dim {d}"
        )));
    }
    let data = points.data();
    let mut centroids: Vec<f64> = init.data().iter().map(|&v| v as f64).collect();
    let mut assignments = vec![0u32; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut objective = 0.0f64;
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..k {
                let mut sq = 0.0f64;
                for t in 0..d {
                    let diff = data[i * d + t] as f64 - centroids[j * d + t];
                    sq += diff * diff;
                }
                if sq < best.0 {
                    best = (sq, j);
                }
            }
            objective += best.0;
            if assignments[i] != best.1 as u32 {
                assignments[i] = best.1 as u32;
                changed = true;
            }
        }
        trace.push(objective);
        if (!changed && iterations > 0) || iterations >= max_iters {
            break;
        }
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignments[i] as usize;
            counts[j] += 1;
            for t in 0..d {
                sums[j * d + t] += data[i * d + t] as f64;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            for t in 0..d {
                centroids[j * d + t] = sums[j * d + t] / counts[j] as f64;
            }
        }
        iterations += 1;
    }
    Ok(KmeansResult {
        centroids: Tensor::new(vec![k, d], centroids.iter().map(|&v| v as f32).collect()),
        assignments,
        objective_trace: trace,
        iterations,
    })
}

/// One soft clustering iterate: distances, temperature softmax attention,
/// attention-weighted candidate centroids.
#[derive(Debug)]
pub struct DkmState {
    pub centroids: Tensor,
    /// Row-stochastic `[n, k]` attention from the latest step.
    pub attention: Tensor,
    /// Negated squared distances `[n, k]` feeding the softmax.
    pub distances: Tensor,
    pub tau: f64,
}

impl DkmState {
    pub fn new(points: &Tensor, init: Tensor, tau: f64) -> Result<DkmState> {
        if tau <= 0.0 {
            return Err(Error::invalid(format!("temperature {tau} must be > 0")));
        }
        let (n, _) = points_shape(points)?;
        let (k, _) = points_shape(&init)?;
        let mut state = DkmState {
            centroids: init,
            attention: Tensor::zeros(vec![n, k]),
            distances: Tensor::zeros(vec![n, k]),
            tau,
        };
        state.refresh_attention(points)?;
        Ok(state)
    }

    fn refresh_attention(&mut self, points: &Tensor) -> Result<()> {
        let (n, d) = points_shape(points)?;
        let k = self.centroids.shape()[0];
        let pdata = points.data();
        let cdata = self.centroids.data();
        let mut dist = vec![0.0f32; n * k];
        let mut attn = vec![0.0f32; n * k];
        for i in 0..n {
            let mut logits = vec![0.0f64; k];
            let mut max_logit = f64::NEG_INFINITY;
            for j in 0..k {
                let sq = row_sqdist(pdata, i, cdata, j, d);
                dist[i * k + j] = -sq as f32;
                let logit = -sq / self.tau;
                logits[j] = logit;
                if logit > max_logit {
                    max_logit = logit;
                }
            }
            let mut denom = 0.0f64;
            for l in logits.iter_mut() {
                *l = (*l - max_logit).exp();
                denom += *l;
            }
            for j in 0..k {
                attn[i * k + j] = (logits[j] / denom) as f32;
            }
        }
        self.distances = Tensor::new(vec![n, k], dist);
        self.attention = Tensor::new(vec![n, k], attn);
        Ok(())
    }

    /// Replace centroids by attention-weighted means and refresh the
    /// attention; returns the Frobenius norm of the centroid change.
    pub fn step(&mut self, points: &Tensor) -> Result<f64> {
        let (n, d) = points_shape(points)?;
        let k = self.centroids.shape()[0];
        let pdata = points.data();
        let attn = self.attention.data();
        let mut next = self.centroids.data().to_vec();
        for j in 0..k {
            let mut mass = 0.0f64;
            for i in 0..n {
                mass += attn[i * k + j] as f64;
            }
            if mass <= DEAD_MASS_EPS {
                continue;
            }
            for t in 0..d {
                let mut acc = 0.0f64;
                for i in 0..n {
                    acc += attn[i * k + j] as f64 * pdata[i * d + t] as f64;
                }
                next[j * d + t] = (acc / mass) as f32;
            }
        }
        let mut delta_sq = 0.0f64;
        for (a, b) in self.centroids.data().iter().zip(&next) {
            let diff = *a as f64 - *b as f64;
            delta_sq += diff * diff;
        }
        self.centroids = Tensor::new(vec![k, d], next);
        self.refresh_attention(points)?;
        Ok(delta_sq.sqrt())
    }

    /// Hard assignment of each point to its argmax attention column
    /// (lowest index on ties).
    pub fn hard_assignments(&self) -> Vec<u32> {
        let shape = self.attention.shape();
        let (n, k) = (shape[0], shape[1]);
        let attn = self.attention.data();
        (0..n)
            .map(|i| {
                let mut best = (f32::NEG_INFINITY, 0usize);
                for j in 0..k {
                    if attn[i * k + j] > best.0 {
                        best = (attn[i * k + j], j);
                    }
                }
                best.1 as u32
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DkmOptions {
    pub tau: f64,
    pub max_iters: usize,
    pub eps: f64,
    pub init: InitMethod,
}

impl Default for DkmOptions {
    fn default() -> DkmOptions {
        DkmOptions {
            tau: 0.01,
            max_iters: 200,
            eps: 1e-6,
            init: InitMethod::KmeansPlusPlus,
        }
    }
}

/// Reduce a codebook to `k_tilde <= K` rows by iterated soft clustering.
///
/// Iterates until the centroid update moves less than `eps` in Frobenius
/// norm or `max_iters` is hit, then finalizes with a hard assignment. A
/// centroid left empty by the hard assignment is reseeded on the point
/// farthest from its assigned centroid and one refinement pass is run.
pub fn dkm_reduce(
    codebook: &Codebook,
    k_tilde: usize,
    opts: &DkmOptions,
    rng: &mut impl Rng,
) -> Result<Codebook> {
    let k = codebook.k();
    if k_tilde == 0 || k_tilde > k {
        return Err(Error::invalid(format!(
            "soft reduction needs 1 <= k_tilde <= K, got k_tilde={k_tilde}, K={k}"
        )));
    }
    let points = Tensor::new(vec![k, codebook.dim()], codebook.to_vec());
    let init = init_centroids(&points, k_tilde, opts.init, rng)?;
    let mut state = DkmState::new(&points, init, opts.tau)?;
    for _ in 0..opts.max_iters {
        if state.step(&points)? <= opts.eps {
            break;
        }
    }
    let mut assignments = state.hard_assignments();
    if let Some(repaired) = reseed_empty(&mut state, &points, &assignments)? {
        assignments = repaired;
    }
    debug_assert_eq!(assignments.len(), k);
    // Adapted codebooks are fresh artifacts and carry no EMA state.
    Codebook::from_tensor(&state.centroids, UpdateMode::Gradient)
}

/// Reseeds centroids that received no points, then runs one refinement
/// pass. Returns the refreshed assignments if a repair happened.
fn reseed_empty(
    state: &mut DkmState,
    points: &Tensor,
    assignments: &[u32],
) -> Result<Option<Vec<u32>>> {
    let (n, d) = points_shape(points)?;
    let k = state.centroids.shape()[0];
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a as usize] += 1;
    }
    let empties: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    if empties.is_empty() {
        return Ok(None);
    }
    // Rank points by distance to their assigned centroid, farthest first.
    let pdata = points.data();
    let cdata = state.centroids.data().to_vec();
    let mut ranked: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let j = assignments[i] as usize;
            (row_sqdist(pdata, i, &cdata, j, d), i)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut next = state.centroids.data().to_vec();
    for (slot, &j) in empties.iter().enumerate() {
        let (_, src) = ranked[slot.min(n - 1)];
        next[j * d..(j + 1) * d].copy_from_slice(&pdata[src * d..(src + 1) * d]);
    }
    state.centroids = Tensor::new(vec![k, d], next);
    state.refresh_attention(points)?;
    state.step(points)?;
    Ok(Some(state.hard_assignments()))
}

// ---- maximum mean discrepancy ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median of pairwise Euclidean distances over the pooled rows.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdKernel {
    GaussianRbf,
}

#[derive(Debug, Clone)]
pub struct MmdConfig {
    pub kernel: MmdKernel,
    pub bandwidth: Bandwidth,
    pub lambda: f64,
    pub eta: f64,
    pub max_iters: usize,
}

impl Default for MmdConfig {
    fn default() -> MmdConfig {
        MmdConfig {
            kernel: MmdKernel::GaussianRbf,
            bandwidth: Bandwidth::MedianHeuristic,
            lambda: 1e-4,
            eta: 0.1,
            max_iters: 5000,
        }
    }
}

/// Median pairwise Euclidean distance over all rows; 1.0 when degenerate.
pub fn median_heuristic_bandwidth(pooled: &Tensor) -> Result<f64> {
    let (n, d) = points_shape(pooled)?;
    let data = pooled.data();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(row_sqdist(data, i, data, j, d).sqrt());
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

fn resolve_bandwidth(cfg: &MmdConfig, x: &Tensor, y: &Tensor) -> Result<f64> {
    match cfg.bandwidth {
        Bandwidth::Fixed(h) => {
            if h <= 0.0 || !h.is_finite() {
                return Err(Error::invalid(format!("bandwidth {h} must be > 0")));
            }
            Ok(h)
        }
        Bandwidth::MedianHeuristic => {
            let (_, d) = points_shape(x)?;
            let mut pooled = x.data().to_vec();
            pooled.extend_from_slice(y.data());
            median_heuristic_bandwidth(&Tensor::new(vec![pooled.len() / d, d], pooled))
        }
    }
}

/// Biased V-statistic MMD² with a Gaussian RBF kernel:
/// mean k(x,x') + mean k(y,y') − 2 mean k(x,y).
///
/// The cross term is accumulated in a canonical argument order, so swapping
/// X and Y returns the bit-identical value.
pub fn mmd_squared(x: &Tensor, y: &Tensor, cfg: &MmdConfig) -> Result<f64> {
    let (n, d) = points_shape(x)?;
    let (m, dy) = points_shape(y)?;
    if d != dy {
        return Err(Error::ShapeMismatch(format!(
            "set dims differ: {d} vs {dy}"
        )));
    }
    let h = resolve_bandwidth(cfg, x, y)?;
    let inv = -1.0 / (2.0 * h * h);
    let kernel_sum = |a: &[f32], na: usize, b: &[f32], nb: usize| -> f64 {
        let mut acc = 0.0f64;
        for i in 0..na {
            for j in 0..nb {
                acc += (row_sqdist(a, i, b, j, d) * inv).exp();
            }
        }
        acc
    };
    let sxx = kernel_sum(x.data(), n, x.data(), n) / (n * n) as f64;
    let syy = kernel_sum(y.data(), m, y.data(), m) / (m * m) as f64;
    let first_is_rows = (x.data(), n) <= (y.data(), m);
    let sxy = if first_is_rows {
        kernel_sum(x.data(), n, y.data(), m)
    } else {
        kernel_sum(y.data(), m, x.data(), n)
    } / (n * m) as f64;
    Ok(sxx + syy - 2.0 * sxy)
}

#[derive(Debug)]
pub struct IkmOutcome {
    pub codebook: Codebook,
    /// Objective after every SGD step, starting with the initial value.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub bandwidth: f64,
}

/// Grow a codebook to `k_tilde > K` rows.
///
/// Candidate rows start from N(0, d^(-1/2)) per coordinate and descend
/// `MMD²(e, reduce(candidates)) + lambda·‖candidates‖²` by SGD. The inner
/// soft reduction is warm-started and re-converged off-tape each step; one
/// differentiable iterate then carries gradients through the attention and
/// the weighted means. The kernel bandwidth is resolved once at
/// initialization so the objective stays fixed across the run.
pub fn ikm_increase(
    codebook: &Codebook,
    k_tilde: usize,
    cfg: &MmdConfig,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<IkmOutcome> {
    let k = codebook.k();
    let d = codebook.dim();
    if k_tilde <= k {
        return Err(Error::invalid(format!(
            "rate increase needs k_tilde > K, got k_tilde={k_tilde}, K={k}"
        )));
    }
    if cfg.lambda < 0.0 || cfg.eta <= 0.0 {
        return Err(Error::invalid("lambda must be >= 0 and eta > 0"));
    }
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature {tau} must be > 0")));
    }

    let normal = Normal::new(0.0f64, (d as f64).powf(-0.25)).expect("valid std");
    let init: Vec<f32> = (0..k_tilde * d).map(|_| normal.sample(rng) as f32).collect();
    let candidates = shared(Tensor::new(vec![k_tilde, d], init).requires_grad(true));

    let originals = Tensor::new(vec![k, d], codebook.to_vec());
    let h = {
        let cand = candidates.borrow();
        match cfg.bandwidth {
            Bandwidth::Fixed(_) => resolve_bandwidth(cfg, &originals, &cand)?,
            Bandwidth::MedianHeuristic => {
                let mut pooled = originals.data().to_vec();
                pooled.extend_from_slice(cand.data());
                median_heuristic_bandwidth(&Tensor::new(vec![k + k_tilde, d], pooled))?
            }
        }
    };
    let kernel_scale = (-1.0 / (2.0 * h * h)) as f32;
    let fixed_cfg = MmdConfig {
        bandwidth: Bandwidth::Fixed(h),
        ..cfg.clone()
    };

    // Warm-started inner reduction state.
    let mut warm = {
        let cand = candidates.borrow();
        let pts = Tensor::new(vec![k_tilde, d], cand.data().to_vec());
        init_centroids(&pts, k, InitMethod::KmeansPlusPlus, rng)?
    };

    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut iterations = 0;
    for iter in 0..=cfg.max_iters {
        let cand_values = candidates.borrow().data().to_vec();
        let points = Tensor::new(vec![k_tilde, d], cand_values);
        if !points.is_finite() {
            return Err(Error::NonFinite(format!(
                "candidate codebook diverged at iteration {iter}"
            )));
        }

        // Re-converge the inner reduction off-tape from the warm start.
        let mut inner = DkmState::new(&points, warm, tau)?;
        for _ in 0..200 {
            if inner.step(&points)? <= 1e-6 {
                break;
            }
        }
        warm = inner.centroids.clone();

        // Objective in f64 for the trace and stopping decisions.
        let reduced = &inner.centroids;
        let mmd = mmd_squared(&originals, reduced, &fixed_cfg)?;
        let norm_sq: f64 = points.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let loss = mmd + cfg.lambda * norm_sq;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective diverged at iteration {iter} (mmd={mmd}, norm_sq={norm_sq})"
            )));
        }
        trace.push(loss);
        let plateaued = iter >= 100 && trace[iter - 100] - trace[iter] < 1e-7;
        if iter == cfg.max_iters || plateaued {
            iterations = iter;
            break;
        }

        // One differentiable soft iterate from the converged centroids.
        let mut tape = Tape::new();
        let cand = tape.param(&candidates);
        let orig = tape.constant_from(vec![k, d], originals.data().to_vec());
        let warm_centers = warm_const(&mut tape, &warm);
        let sq = tape.pairwise_sqdist(cand, warm_centers);
        let logits = tape.scale(sq, (-1.0 / tau) as f32);
        let attn = tape.softmax_rows(logits);
        let reduced_var = tape.soft_centroids(attn, cand, warm.data());

        let kxx = kernel_mean(&mut tape, orig, orig, kernel_scale, k * k);
        let kyy = kernel_mean(&mut tape, reduced_var, reduced_var, kernel_scale, k * k);
        let kxy = kernel_mean(&mut tape, orig, reduced_var, kernel_scale, k * k);
        let self_terms = tape.add(kxx, kyy);
        let cross = tape.scale(kxy, -2.0);
        let mmd_var = tape.add(self_terms, cross);
        let cand_sq = tape.mul(cand, cand);
        let norm_var = tape.sum(cand_sq);
        let reg = tape.scale(norm_var, cfg.lambda as f32);
        let loss_var = tape.add(mmd_var, reg);

        candidates.borrow_mut().zero_grad();
        tape.backward(loss_var);
        sgd_step(&[candidates.clone()], cfg.eta as f32);
        iterations = iter + 1;
    }

    let final_rows = candidates.borrow().data().to_vec();
    let adapted = Codebook::from_rows(k_tilde, d, final_rows, UpdateMode::Gradient)?;
    Ok(IkmOutcome {
        codebook: adapted,
        loss_trace: trace,
        iterations,
        bandwidth: h,
    })
}

fn warm_const(tape: &mut Tape, warm: &Tensor) -> crate::tape::Var {
    tape.constant_from(warm.shape().to_vec(), warm.data().to_vec())
}

/// mean over `count` entries of exp(scale · ‖a_i − b_j‖²) on the tape.
fn kernel_mean(
    tape: &mut Tape,
    a: crate::tape::Var,
    b: crate::tape::Var,
    scale: f32,
    count: usize,
) -> crate::tape::Var {
    let sq = tape.pairwise_sqdist(a, b);
    let scaled = tape.scale(sq, scale);
    let kernel = tape.exp(scaled);
    let total = tape.sum(kernel);
    tape.scale(total, 1.0 / count as f32)
}

fn points_shape(t: &Tensor) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::ShapeMismatch(format!(
            "expected non-empty [n, d] matrix, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

fn row_sqdist(a: &[f32], i: usize, b: &[f32], j: usize, d: usize) -> f64 {
    let mut sq = 0.0f64;
    for t in 0..d {
        let diff = a[i * d + t] as f64 - b[j * d + t] as f64;
        sq += diff * diff;
    }
    sq
}
