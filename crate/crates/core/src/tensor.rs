//! Dense row-major `f64` tensors.
//!
//! All training and verification arithmetic runs in 64-bit floating point;
//! that keeps finite-difference gradient checks meaningful and makes
//! fixed-seed runs bit-identical. Kernels are single-threaded; tensors are
//! immutable once produced by an op, so sharing across threads is safe.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense tensor: a shape plus row-major `f64` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from shape and data; the element count must match.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength { expected, got: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    /// Truncated-normal random tensor (sigma, cut at two sigma).
    pub fn randn_trunc(shape: &[usize], sigma: f64, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.next_trunc_normal(sigma)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::DataLength { expected, got: self.data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Size of the last axis (1 for rank-0).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Multiply by a scalar.
    pub fn scale(&self, c: f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v * c).collect() }
    }

    /// In-place `self += other` (shapes must already agree).
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Swap the last two axes (rank >= 2), materializing the result.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank: r });
        }
        let n = self.shape[r - 2];
        let m = self.shape[r - 1];
        let batch = self.data.len() / (n * m);
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * n * m..(b + 1) * n * m];
            let dst = &mut out[b * n * m..(b + 1) * n * m];
            for i in 0..n {
                for j in 0..m {
                    dst[j * n + i] = src[i * m + j];
                }
            }
        }
        Ok(Tensor { shape, data: out })
    }

    /// Reorder axes, materializing the result.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        if axes.len() != r {
            return Err(Error::InvalidAxis { axis: axes.len(), rank: r });
        }
        let mut seen = vec![false; r];
        for &a in axes {
            if a >= r || seen[a] {
                return Err(Error::InvalidAxis { axis: a, rank: r });
            }
            seen[a] = true;
        }
        let in_strides = strides_of(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let out_strides = strides_of(&out_shape);
        let mut out = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; r];
        for (pos, v) in out.iter_mut().enumerate() {
            // Decode `pos` into multi-index over the output shape.
            let mut rem = pos;
            for d in 0..r {
                idx[d] = rem / out_strides[d];
                rem %= out_strides[d];
            }
            let mut src = 0;
            for d in 0..r {
                src += idx[d] * in_strides[axes[d]];
            }
            *v = self.data[src];
        }
        Ok(Tensor { shape: out_shape, data: out })
    }

    /// Batched matrix product on the last two axes.
    ///
    /// Leading axes must match, or the right operand may be rank-2 and is
    /// broadcast over the left operand's batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (&self.shape, &rhs.shape);
        if ls.len() < 2 || rs.len() < 2 {
            return Err(Error::ShapeMismatch { left: ls.clone(), right: rs.clone() });
        }
        let (n, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, m) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        let broadcast_rhs = rs.len() == 2 && ls.len() > 2;
        let batch_ok = broadcast_rhs || ls[..ls.len() - 2] == rs[..rs.len() - 2];
        if k != k2 || !batch_ok {
            return Err(Error::ShapeMismatch { left: ls.clone(), right: rs.clone() });
        }
        let batch = self.data.len() / (n * k);
        let mut shape: Vec<usize> = ls[..ls.len() - 2].to_vec();
        shape.push(n);
        shape.push(m);
        let mut out = vec![0.0; batch * n * m];
        for b in 0..batch {
            let a = &self.data[b * n * k..(b + 1) * n * k];
            let bb = if broadcast_rhs { &rhs.data[..] } else { &rhs.data[b * k * m..(b + 1) * k * m] };
            matmul_2d(a, bb, n, k, m, &mut out[b * n * m..(b + 1) * n * m]);
        }
        Ok(Tensor { shape, data: out })
    }

    /// `self . rhs^T` treating `rhs` as `[m, k]`: `[... n, k] x [m, k] -> [... n, m]`.
    ///
    /// Used for decoders tied to an embedding table, where materializing the
    /// transpose would dominate.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (&self.shape, &rhs.shape);
        if ls.len() < 2 || rs.len() != 2 || ls[ls.len() - 1] != rs[1] {
            return Err(Error::ShapeMismatch { left: ls.clone(), right: rs.clone() });
        }
        let (n, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let m = rs[0];
        let batch = self.data.len() / (n * k);
        let mut shape: Vec<usize> = ls[..ls.len() - 2].to_vec();
        shape.push(n);
        shape.push(m);
        let mut out = vec![0.0; batch * n * m];
        for b in 0..batch {
            let a = &self.data[b * n * k..(b + 1) * n * k];
            let dst = &mut out[b * n * m..(b + 1) * n * m];
            for i in 0..n {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..m {
                    let brow = &rhs.data[j * k..(j + 1) * k];
                    dst[i * m + j] = dot(arow, brow);
                }
            }
        }
        Ok(Tensor { shape, data: out })
    }

    /// `self^T . rhs` summed over any leading batch axes:
    /// `[... n, k] x [... n, m] -> [k, m]`.
    ///
    /// This is the weight-gradient contraction for dense layers.
    pub fn matmul_tn_summed(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (&self.shape, &rhs.shape);
        if ls.len() < 2 || rs.len() < 2 || ls[..ls.len() - 1] != rs[..rs.len() - 1] {
            return Err(Error::ShapeMismatch { left: ls.clone(), right: rs.clone() });
        }
        let (n, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let m = rs[rs.len() - 1];
        let batch = self.data.len() / (n * k);
        let mut out = vec![0.0; k * m];
        for b in 0..batch {
            let a = &self.data[b * n * k..(b + 1) * n * k];
            let bb = &rhs.data[b * n * m..(b + 1) * n * m];
            // out[k, m] += a^T . bb, accumulated row by row.
            for i in 0..n {
                let arow = &a[i * k..(i + 1) * k];
                let brow = &bb[i * m..(i + 1) * m];
                for (kk, &av) in arow.iter().enumerate() {
                    let orow = &mut out[kk * m..(kk + 1) * m];
                    axpy(av, brow, orow);
                }
            }
        }
        Ok(Tensor { shape: vec![k, m], data: out })
    }

    /// Multiply by a constant tensor with numpy-style broadcasting on the
    /// right (trailing axes aligned; each axis equal or 1 on the right).
    pub fn mul_bcast(&self, w: &Tensor) -> Result<Tensor> {
        let out_shape = self.shape.clone();
        if w.rank() > self.rank() {
            return Err(Error::ShapeMismatch { left: out_shape, right: w.shape.clone() });
        }
        // Effective shape of `w` left-padded with 1s.
        let pad = self.rank() - w.rank();
        let mut w_shape = vec![1usize; pad];
        w_shape.extend_from_slice(&w.shape);
        for (d, (&s, &ws)) in self.shape.iter().zip(&w_shape).enumerate() {
            if ws != 1 && ws != s {
                let _ = d;
                return Err(Error::ShapeMismatch { left: out_shape, right: w.shape.clone() });
            }
        }
        let w_strides_full = strides_of(&w_shape);
        let w_strides: Vec<usize> = w_shape
            .iter()
            .zip(&w_strides_full)
            .map(|(&ws, &st)| if ws == 1 { 0 } else { st })
            .collect();
        let strides = strides_of(&self.shape);
        let r = self.rank();
        let mut out = self.data.clone();
        if r == 0 {
            out[0] *= w.data[0];
        } else {
            // Iterate rows of the last axis to keep the inner loop tight.
            let last = self.shape[r - 1];
            let rows = self.data.len() / last;
            let w_last_stride = w_strides[r - 1];
            let mut idx = vec![0usize; r - 1];
            for row in 0..rows {
                let mut rem = row;
                for d in (0..r - 1).rev() {
                    idx[d] = rem % self.shape[d];
                    rem /= self.shape[d];
                }
                let mut w_base = 0;
                for d in 0..r - 1 {
                    w_base += idx[d] * w_strides[d];
                }
                let orow = &mut out[row * last..(row + 1) * last];
                if w_last_stride == 0 {
                    let wv = w.data[w_base];
                    for o in orow.iter_mut() {
                        *o *= wv;
                    }
                } else {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o *= w.data[w_base + j];
                    }
                }
                let _ = strides;
            }
        }
        Ok(Tensor { shape: out_shape, data: out })
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// `out += a * b` over slices.
#[inline]
fn axpy(a: f64, b: &[f64], out: &mut [f64]) {
    for (o, &bv) in out.iter_mut().zip(b) {
        *o += a * bv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums so the loop vectorizes without reassociating a
    // single serial accumulator.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let a4 = &a[i * 4..i * 4 + 4];
        let b4 = &b[i * 4..i * 4 + 4];
        acc[0] += a4[0] * b4[0];
        acc[1] += a4[1] * b4[1];
        acc[2] += a4[2] * b4[2];
        acc[3] += a4[3] * b4[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[n, m] += a[n, k] . b[k, m]`, ikj order so the inner loop streams
/// rows of `b` and `out`.
pub(crate) fn matmul_2d(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            axpy(av, brow, orow);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_known_values() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_batched_with_broadcast_rhs() {
        let a = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_nt_matches_transpose_route() {
        let mut rng = Rng::new(5);
        let a = Tensor::randn_trunc(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn_trunc(&[5, 4], 1.0, &mut rng);
        let direct = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose_last().unwrap()).unwrap();
        for (x, y) in direct.data().iter().zip(via_t.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_tn_summed_matches_manual() {
        let a = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        // sum over batches of a^T.b: [[1,2]].[bat0] + [[3,4]].[bat1]
        let g = a.matmul_tn_summed(&b).unwrap();
        assert_eq!(g.shape(), &[1, 2]);
        assert_eq!(g.data(), &[1.0 + 3.0 + 4.0, 2.0 + 3.0 + 4.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = Rng::new(1);
        let t = Tensor::randn_trunc(&[2, 3, 4, 5], 1.0, &mut rng);
        let p = t.permute(&[0, 2, 1, 3]).unwrap();
        assert_eq!(p.shape(), &[2, 4, 3, 5]);
        let back = p.permute(&[0, 2, 1, 3]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn mul_bcast_row_and_column() {
        let x = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        let row = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = x.mul_bcast(&row).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let col = Tensor::new(&[2, 1], vec![10.0, 20.0]).unwrap();
        let out = x.mul_bcast(&col).unwrap();
        assert_eq!(out.data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
