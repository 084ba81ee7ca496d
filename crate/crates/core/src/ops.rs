//! Plain (non-differentiated) numeric operations.
//!
//! These are the reference semantics for softmax, KL divergence, cosine
//! similarity and mean squared error. The differentiable counterparts used
//! during training live on [`crate::autograd::Tape`]; keeping both routes
//! lets tests pin values here and gradients there.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor applied before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Norm floor for cosine similarity denominators.
pub const NORM_FLOOR: f64 = 1e-12;

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = x.rank().max(1);
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank: x.rank() });
    }
    // Move the softmax axis last, normalize rows, move it back.
    let axes: Vec<usize> = (0..x.rank()).filter(|&a| a != axis).chain([axis]).collect();
    let moved = if x.rank() <= 1 { x.clone() } else { x.permute(&axes)? };
    let d = moved.last_dim();
    let mut data = moved.data().to_vec();
    for row in data.chunks_mut(d.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    let normalized = Tensor::new(moved.shape(), data)?;
    if x.rank() <= 1 {
        return Ok(normalized);
    }
    let mut inverse = alloc::vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    normalized.permute(&inverse)
}

/// `sum p ln(p / q)` over all elements, with both arguments clamped to
/// `[1e-12, 1]` before the logarithm. Nonnegative, zero iff `p == q`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch { left: p.shape().to_vec(), right: q.shape().to_vec() });
    }
    let mut total = 0.0;
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        if pv <= 0.0 {
            continue;
        }
        let pc = pv.clamp(PROB_FLOOR, 1.0);
        let qc = qv.clamp(PROB_FLOOR, 1.0);
        total += pv * (libm::log(pc) - libm::log(qc));
    }
    Ok(total)
}

/// Cosine similarity of two equal-length vectors, in `[-1, 1]`.
///
/// The denominator is floored at `1e-12` so near-zero hidden states behave
/// deterministically.
pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.numel() != v.numel() {
        return Err(Error::ShapeMismatch { left: u.shape().to_vec(), right: v.shape().to_vec() });
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.data().iter().zip(v.data()) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let denom = (libm::sqrt(nu) * libm::sqrt(nv)).max(NORM_FLOOR);
    Ok((dot / denom).clamp(-1.0, 1.0))
}

/// Mean of squared elementwise differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let n = a.numel().max(1) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// Shannon entropy `-sum p ln p` of a distribution tensor, summed over rows.
pub fn entropy(p: &Tensor) -> f64 {
    p.data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * libm::log(v.clamp(PROB_FLOOR, 1.0)))
        .sum()
}
