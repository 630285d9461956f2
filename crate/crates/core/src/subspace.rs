//! Subspace alignment of sequence item embeddings.
//!
//! Each latent user owns one basis direction. An item's affinity to a
//! subspace is its squared projection onto the basis, smoothed by `λ` and
//! normalized over subspaces. Refined embeddings are aligned with their
//! normalized originals by an InfoNCE loss whose negatives are the other
//! items of the same sequence.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineMode {
    /// Scale by the affinity of the dominant subspace.
    Dominant,
    /// `Σ_j s_ij (e_i · d_j) d_j`.
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBases {
    /// One unit-norm basis per row, `α × d₂`.
    pub bases: Tensor,
    /// Epoch of the last K-means refresh.
    pub refresh_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    (0..centroids.rows())
        .map(|c| (c, sq_dist(point, centroids.row(c))))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops after `max_iters` iterations or once no centroid moves more than
/// `tol`. Empty clusters keep their previous centroid.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeans> {
    let [n, d] = points.shape();
    if k == 0 || n < k {
        return Err(Error::Contract(format!("k-means needs at least {k} points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Tensor::zeros(k, d);
    centroids.row_mut(0).copy_from_slice(points.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }

    let mut assignments = vec![0; n];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for (i, a) in assignments.iter_mut().enumerate() {
            *a = nearest(points.row(i), &centroids).0;
        }
        let mut sums = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums.row(c).iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&mean, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&mean);
        }
        if shift < tol {
            break;
        }
    }
    Ok(KMeans { centroids, assignments, iterations })
}

fn normalize_row(row: &mut [f64]) -> bool {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= crate::numeric::NORM_EPS {
        return false;
    }
    row.iter_mut().for_each(|v| *v /= norm);
    true
}

/// Bases from K-means over item-embedding rows; each basis is a normalized
/// centroid.
///
/// With fewer than `α` rows the available rows are reused with small seeded
/// perturbations, and a warning is logged.
pub fn init_bases(rows: &Tensor, alpha: usize, seed: u64) -> Result<SubspaceBases> {
    if alpha == 0 {
        return Err(Error::Config("alpha must be at least 1".into()));
    }
    let [n, d] = rows.shape();
    if d == 0 {
        return Err(Error::Contract("cannot fit bases in zero dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let mut centroids = if n >= alpha {
        kmeans(rows, alpha, seed, KMEANS_MAX_ITERS, KMEANS_TOL)?.centroids
    } else {
        log::warn!("only {n} rows for {alpha} subspace bases; duplicating perturbed rows");
        let mut c = Tensor::zeros(alpha, d);
        for j in 0..alpha {
            for (x, v) in c.row_mut(j).iter_mut().enumerate() {
                let base = if n > 0 { rows.get(j % n, x) } else { 0.0 };
                *v = base + 1e-3 * rng.random_range(-1.0..1.0);
            }
        }
        c
    };
    for j in 0..alpha {
        while !normalize_row(centroids.row_mut(j)) {
            centroids.row_mut(j).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }
    Ok(SubspaceBases { bases: centroids, refresh_epoch: 0 })
}

/// `s_ij = ((e_i·d_j)² + λ d₂) / Σ_j ((e_i·d_j)² + λ d₂)` for every row of `e`.
pub fn affinity(tape: &mut Tape, e: Var, bases: &Tensor, lambda: f64) -> Result<Var> {
    if lambda <= 0.0 {
        return Err(Error::Config("affinity smoothing must be positive".into()));
    }
    let d2 = bases.cols();
    let basis_t = tape.constant(bases.transpose());
    let proj = tape.matmul(e, basis_t)?;
    let sq = tape.mul(proj, proj)?;
    let num = tape.add_scalar(sq, lambda * d2 as f64)?;
    let den = tape.reduce_sum(num, 1)?;
    let inv = tape.recip(den)?;
    tape.mul_col(num, inv)
}

/// Index of the largest affinity per row; ties go to the lower index.
pub fn dominant(s: &Tensor) -> Vec<usize> {
    (0..s.rows())
        .map(|r| {
            s.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// Refined embeddings `Z` from the stack `e` and its affinities `s`.
pub fn refine(tape: &mut Tape, e: Var, s: Var, bases: &Tensor, mode: RefineMode) -> Result<Var> {
    match mode {
        RefineMode::Dominant => {
            let picks = dominant(tape.value(s));
            let scale = tape.pick(s, &picks)?;
            tape.mul_col(e, scale)
        }
        RefineMode::Soft => {
            let basis_t = tape.constant(bases.transpose());
            let proj = tape.matmul(e, basis_t)?;
            let weights = tape.mul(s, proj)?;
            let basis = tape.constant(bases.clone());
            tape.matmul(weights, basis)
        }
    }
}

/// InfoNCE over one sequence: anchor `ê_i`, positive `z_i`, negatives the
/// other `z_j` of the sequence, inner products scaled by `1/β`.
///
/// A single-item sequence has no negatives and contributes exactly 0.
pub fn contrastive_loss(tape: &mut Tape, e_hat: Var, z: Var, beta: f64) -> Result<Var> {
    if beta <= 0.0 {
        return Err(Error::Config("contrastive temperature must be positive".into()));
    }
    let (a, b) = (tape.value(e_hat).shape(), tape.value(z).shape());
    if a != b {
        return Err(Error::shape("contrastive_loss", &a, &b));
    }
    if a[0] == 1 {
        log::debug!("single-item sequence contributes no contrastive term");
    }
    let zt = tape.transpose(z)?;
    let logits = tape.matmul(e_hat, zt)?;
    let logits = tape.scale(logits, 1.0 / beta)?;
    let log_probs = tape.log_softmax_rows(logits)?;
    let diagonal: Vec<usize> = (0..a[0]).collect();
    let positives = tape.pick(log_probs, &diagonal)?;
    let total = tape.sum_all(positives)?;
    tape.scale(total, -1.0)
}

/// Sum of per-sequence InfoNCE terms over contiguous row ranges.
pub fn contrastive_loss_segments(
    tape: &mut Tape,
    e_hat: Var,
    z: Var,
    segments: &[Range<usize>],
    beta: f64,
) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for seg in segments {
        let e = tape.slice_rows(e_hat, seg.start, seg.end)?;
        let zs = tape.slice_rows(z, seg.start, seg.end)?;
        let term = contrastive_loss(tape, e, zs, beta)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Per-sequence fused vector: rows of `Norm(Ê + Z W_s)` summed by sequence.
pub fn fuse(tape: &mut Tape, e_hat: Var, z: Var, w_s: Var, segment_of_row: &[usize], n_segments: usize) -> Result<Var> {
    let projected = tape.matmul(z, w_s)?;
    let sum = tape.add(e_hat, projected)?;
    let normed = tape.l2_normalize(sum, 1)?;
    tape.scatter_add_rows(normed, segment_of_row, n_segments, None)
}

/// Affinity rows of a plain stack, outside of any training graph.
pub fn affinity_table(e: &Tensor, bases: &Tensor, lambda: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let s = affinity(&mut tape, ev, bases, lambda)?;
    Ok(tape.value(s).clone())
}
