//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward computation. Values enter as tracked
//! parameters ([`Tape::param`]) or untracked constants ([`Tape::constant`]);
//! an op whose inputs are all constants records nothing, which is how a
//! frozen teacher runs through the same forward code at zero backward cost.
//! [`Tape::backward`] replays the recorded ops in reverse and accumulates a
//! gradient of identical shape for every tracked leaf.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use crate::tensor::Tensor;

const LN_CLAMP_LO: f64 = 1e-12;
const LN_CLAMP_HI: f64 = 1.0;
/// Additive mask value that drives a softmax logit to zero weight.
const NEG_INF_FILL: f64 = -1e30;

/// Handle to a value on (or outside) the tape.
#[derive(Clone)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    /// The tensor held by this node.
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Whether gradients flow to or through this node.
    pub fn tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &mut Gradients)>;

struct Entry {
    out: usize,
    back: BackwardFn,
}

/// Gradient store produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    fn accumulate(&mut self, id: Option<usize>, grad: Tensor) {
        let Some(id) = id else { return };
        match &mut self.slots[id] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Gradient of the loss with respect to `var`, if any flowed to it.
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        self.slots.get(var.id?).and_then(|s| s.as_ref())
    }

    /// Remove and return the gradient for `var`.
    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        self.slots.get_mut(var.id?).and_then(|s| s.take())
    }
}

/// Records a forward pass for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
    next_id: Cell<usize>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn fresh_id(&self) -> usize {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        id
    }

    fn node(&self, value: Tensor, tracked: bool) -> Var {
        let id = tracked.then(|| self.fresh_id());
        Var { id, value: Rc::new(value) }
    }

    fn record(&self, out: &Var, back: BackwardFn) {
        if let Some(out) = out.id {
            self.entries.borrow_mut().push(Entry { out, back });
        }
    }

    /// Tracked leaf: a trainable parameter or differentiable input.
    pub fn param(&self, value: Tensor) -> Var {
        self.node(value, true)
    }

    /// Untracked leaf: data, masks, or frozen (teacher) weights.
    pub fn constant(&self, value: Tensor) -> Var {
        self.node(value, false)
    }

    /// Run the reverse pass from a scalar loss.
    ///
    /// Every tracked leaf reachable from `loss` receives a gradient tensor of
    /// its own shape in the returned store.
    pub fn backward(&self, loss: &Var) -> Gradients {
        assert_eq!(loss.value.numel(), 1, "backward requires a scalar loss");
        let mut grads = Gradients { slots: vec![None; self.next_id.get()] };
        grads.accumulate(loss.id, Tensor::full(loss.value.shape(), 1.0));
        let entries = self.entries.borrow();
        for entry in entries.iter().rev() {
            if let Some(gout) = grads.slots[entry.out].take() {
                (entry.back)(&gout, &mut grads);
            }
        }
        grads
    }

    // ----------------------------------------------------------------
    // Elementwise arithmetic
    // ----------------------------------------------------------------

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let out = self.node(a.value.add(&b.value).expect("add: shape mismatch"), a.tracked() || b.tracked());
        let (ia, ib) = (a.id, b.id);
        self.record(&out, Box::new(move |g, grads| {
            grads.accumulate(ia, g.clone());
            grads.accumulate(ib, g.clone());
        }));
        out
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        let out = self.node(a.value.sub(&b.value).expect("sub: shape mismatch"), a.tracked() || b.tracked());
        let (ia, ib) = (a.id, b.id);
        self.record(&out, Box::new(move |g, grads| {
            grads.accumulate(ia, g.clone());
            grads.accumulate(ib, g.scale(-1.0));
        }));
        out
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let out = self.node(a.value.mul(&b.value).expect("mul: shape mismatch"), a.tracked() || b.tracked());
        let (ia, ib) = (a.id, b.id);
        let (va, vb) = (a.rc(), b.rc());
        self.record(&out, Box::new(move |g, grads| {
            if ia.is_some() {
                grads.accumulate(ia, g.mul(&vb).expect("mul backward"));
            }
            if ib.is_some() {
                grads.accumulate(ib, g.mul(&va).expect("mul backward"));
            }
        }));
        out
    }

    /// Elementwise quotient; the denominator must be bounded away from zero
    /// by construction (see [`Tape::clamp_min`]).
    pub fn div(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "div: shape mismatch");
        let value = {
            let data = a.value.data().iter().zip(b.value.data()).map(|(x, y)| x / y).collect();
            Tensor::new(a.shape(), data).expect("div: shape mismatch")
        };
        let out = self.node(value, a.tracked() || b.tracked());
        let (ia, ib) = (a.id, b.id);
        let (va, vb) = (a.rc(), b.rc());
        self.record(&out, Box::new(move |g, grads| {
            if ia.is_some() {
                let data = g.data().iter().zip(vb.data()).map(|(g, y)| g / y).collect();
                grads.accumulate(ia, Tensor::new(vb.shape(), data).unwrap());
            }
            if ib.is_some() {
                let data = g
                    .data()
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                grads.accumulate(ib, Tensor::new(vb.shape(), data).unwrap());
            }
        }));
        out
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let out = self.node(a.value.scale(c), a.tracked());
        let ia = a.id;
        self.record(&out, Box::new(move |g, grads| grads.accumulate(ia, g.scale(c))));
        out
    }

    pub fn add_scalar(&self, a: &Var, c: f64) -> Var {
        let data = a.value.data().iter().map(|v| v + c).collect();
        let out = self.node(Tensor::new(a.shape(), data).unwrap(), a.tracked());
        let ia = a.id;
        self.record(&out, Box::new(move |g, grads| grads.accumulate(ia, g.clone())));
        out
    }

    /// Multiply by a constant tensor, broadcast numpy-style on trailing axes.
    pub fn mul_const(&self, a: &Var, w: &Tensor) -> Var {
        let value = a.value.mul_bcast(w).expect("mul_const: broadcast mismatch");
        let out = self.node(value, a.tracked());
        let ia = a.id;
        let w = w.clone();
        self.record(&out, Box::new(move |g, grads| {
            grads.accumulate(ia, g.mul_bcast(&w).expect("mul_const backward"));
        }));
        out
    }

    /// Add a `[D]` bias across the last axis.
    pub fn add_bias(&self, x: &Var, b: &Var) -> Var {
        let d = b.value.numel();
        assert_eq!(x.value.last_dim(), d, "add_bias: width mismatch");
        let mut data = x.value.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(b.value.data()) {
                *v += bv;
            }
        }
        let out = self.node(Tensor::new(x.shape(), data).unwrap(), x.tracked() || b.tracked());
        let (ix, ib) = (x.id, b.id);
        let bshape = b.value.shape().to_vec();
        self.record(&out, Box::new(move |g, grads| {
            grads.accumulate(ix, g.clone());
            if ib.is_some() {
                let mut acc = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (a, &gv) in acc.iter_mut().zip(row) {
                        *a += gv;
                    }
                }
                grads.accumulate(ib, Tensor::new(&bshape, acc).unwrap());
            }
        }));
        out
    }

    // ----------------------------------------------------------------
    // Shape movement
    // ----------------------------------------------------------------

    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Var {
        let out = self.node(a.value.reshape(shape).expect("reshape: element count"), a.tracked());
        let ia = a.id;
        let orig = a.value.shape().to_vec();
        self.record(&out, Box::new(move |g, grads| {
            grads.accumulate(ia, g.reshape(&orig).unwrap());
        }));
        out
    }

    pub fn transpose_last(&self, a: &Var) -> Var {
        let out = self.node(a.value.transpose_last().expect("transpose_last"), a.tracked());
        let ia = a.id;
        self.record(&out, Box::new(move |g, grads| {
            grads.accumulate(ia, g.transpose_last().unwrap());
        }));
        out
    }

    pub fn permute(&self, a: &Var, axes: &[usize]) -> Var {
        let out = self.node(a.value.permute(axes).expect("permute"), a.tracked());
        let ia = a.id;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.record(&out, Box::new(move |g, grads| {
            grads.accumulate(ia, g.permute(&inverse).unwrap());
        }));
        out
    }

    // ----------------------------------------------------------------
    // Contractions
    // ----------------------------------------------------------------

    /// Batched matrix product; a rank-2 right operand broadcasts over the
    /// left operand's batch and its gradient is summed accordingly.
    pub fn matmul(&self, a: &Var, b: &Var) -> Var {
        let value = a.value.matmul(&b.value).expect("matmul: shape mismatch");
        let broadcast_rhs = b.value.rank() == 2 && a.value.rank() > 2;
        let out = self.node(value, a.tracked() || b.tracked());
        let (ia, ib) = (a.id, b.id);
        let (va, vb) = (a.rc(), b.rc());
        self.record(&out, Box::new(move |g, grads| {
            if ia.is_some() {
                let bt = vb.transpose_last().unwrap();
                grads.accumulate(ia, g.matmul(&bt).unwrap());
            }
            if ib.is_some() {
                let gb = if broadcast_rhs {
                    va.matmul_tn_summed(g).unwrap()
                } else {
                    va.transpose_last().unwrap().matmul(g).unwrap()
                };
                grads.accumulate(ib, gb);
            }
        }));
        out
    }

    /// `a . b^T` with `b` of shape `[m, k]`; used for embedding-tied decoders.
    pub fn matmul_nt(&self, a: &Var, b: &Var) -> Var {
        let value = a.value.matmul_nt(&b.value).expect("matmul_nt: shape mismatch");
        let out = self.node(value, a.tracked() || b.tracked());
        let (ia, ib) = (a.id, b.id);
        let (va, vb) = (a.rc(), b.rc());
        self.record(&out, Box::new(move |g, grads| {
            if ia.is_some() {
                grads.accumulate(ia, g.matmul(&vb).unwrap());
            }
            if ib.is_some() {
                grads.accumulate(ib, g.matmul_tn_summed(&va).unwrap());
            }
        }));
        out
    }

    /// Embedding lookup: rows of `table` selected by `ids`, shaped `[ids, E]`.
    pub fn gather_rows(&self, table: &Var, ids: &[u32]) -> Var {
        let e = table.value.shape()[1];
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            let row = &table.value.data()[id as usize * e..(id as usize + 1) * e];
            data.extend_from_slice(row);
        }
        let out = self.node(Tensor::new(&[ids.len(), e], data).unwrap(), table.tracked());
        let it = table.id;
        let ids = ids.to_vec();
        let tshape = table.value.shape().to_vec();
        self.record(&out, Box::new(move |g, grads| {
            let mut acc = Tensor::zeros(&tshape);
            for (i, &id) in ids.iter().enumerate() {
                let dst = &mut acc.data_mut()[id as usize * e..(id as usize + 1) * e];
                let src = &g.data()[i * e..(i + 1) * e];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            grads.accumulate(it, acc);
        }));
        out
    }

    // ----------------------------------------------------------------
    // Reductions
    // ----------------------------------------------------------------

    /// Sum over the last axis: `[.., D] -> [..]`.
    pub fn sum_last(&self, a: &Var) -> Var {
        let d = a.value.last_dim();
        let shape = &a.shape()[..a.shape().len().saturating_sub(1)];
        let data: Vec<f64> = a.value.data().chunks(d).map(|row| row.iter().sum()).collect();
        let out = self.node(Tensor::new(shape, data).unwrap(), a.tracked());
        let ia = a.id;
        let in_shape = a.value.shape().to_vec();
        self.record(&out, Box::new(move |g, grads| {
            let mut data = Vec::with_capacity(g.numel() * d);
            for &gv in g.data() {
                data.extend(core::iter::repeat(gv).take(d));
            }
            grads.accumulate(ia, Tensor::new(&in_shape, data).unwrap());
        }));
        out
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self, a: &Var) -> Var {
        let out = self.node(Tensor::scalar(a.value.sum()), a.tracked());
        let ia = a.id;
        let in_shape = a.value.shape().to_vec();
        self.record(&out, Box::new(move |g, grads| {
            grads.accumulate(ia, Tensor::full(&in_shape, g.item()));
        }));
        out
    }

    /// Mean of every element.
    pub fn mean_all(&self, a: &Var) -> Var {
        let n = a.value.numel() as f64;
        let sum = self.sum_all(a);
        self.scale(&sum, 1.0 / n)
    }

    // ----------------------------------------------------------------
    // Nonlinearities
    // ----------------------------------------------------------------

    /// Softmax over the last axis with max-subtraction.
    ///
    /// `key_mask` (broadcastable to the input, 1 = valid) removes positions
    /// from the distribution: they receive exactly zero weight. Fully-masked
    /// rows come out all-zero rather than NaN.
    pub fn softmax_last(&self, x: &Var, key_mask: Option<&Tensor>) -> Var {
        let d = x.value.last_dim();
        let masked = key_mask.map(|m| {
            let mut bump = m.clone();
            for v in bump.data_mut() {
                *v = if *v > 0.5 { 0.0 } else { NEG_INF_FILL };
            }
            // Additive form so it broadcasts like a bias over rows.
            bump
        });
        let mut data = x.value.data().to_vec();
        if let Some(add) = &masked {
            let t = Tensor::new(x.shape(), data).unwrap();
            // Adding NEG_INF_FILL via broadcast multiply is wrong; do an
            // explicit broadcast add using the same stride walk as mul_bcast.
            let ones = Tensor::full(x.shape(), 1.0);
            let bumped = ones.mul_bcast(add).unwrap();
            data = t.data().iter().zip(bumped.data()).map(|(v, b)| v + b).collect();
        }
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max <= NEG_INF_FILL / 2.0 {
                // Entire row masked out.
                for v in row.iter_mut() {
                    *v = 0.0;
                }
                continue;
            }
            let mut denom = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                denom += *v;
            }
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        let value = Tensor::new(x.shape(), data).unwrap();
        let out = self.node(value, x.tracked());
        let ix = x.id;
        let y = out.rc();
        self.record(&out, Box::new(move |g, grads| {
            let mut gx = g.mul(&y).expect("softmax backward");
            let d = y.last_dim();
            for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let dot: f64 = grow.iter().sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv -= dot * yv;
                }
            }
            grads.accumulate(ix, gx);
        }));
        out
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self, x: &Var) -> Var {
        let d = x.value.last_dim();
        let mut data = x.value.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = self.node(Tensor::new(x.shape(), data).unwrap(), x.tracked());
        let ix = x.id;
        let y = out.rc();
        self.record(&out, Box::new(move |g, grads| {
            let d = y.last_dim();
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let gsum: f64 = grow.iter().sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv -= libm::exp(yv) * gsum;
                }
            }
            grads.accumulate(ix, gx);
        }));
        out
    }

    /// Natural log with inputs clamped to `[1e-12, 1]`, the guard applied to
    /// every probability before a logarithm.
    pub fn ln_clamped(&self, x: &Var) -> Var {
        let data = x
            .value
            .data()
            .iter()
            .map(|&v| libm::log(v.clamp(LN_CLAMP_LO, LN_CLAMP_HI)))
            .collect();
        let out = self.node(Tensor::new(x.shape(), data).unwrap(), x.tracked());
        let ix = x.id;
        let vx = x.rc();
        self.record(&out, Box::new(move |g, grads| {
            let data = g
                .data()
                .iter()
                .zip(vx.data())
                .map(|(&gv, &v)| if (LN_CLAMP_LO..=LN_CLAMP_HI).contains(&v) { gv / v } else { 0.0 })
                .collect();
            grads.accumulate(ix, Tensor::new(vx.shape(), data).unwrap());
        }));
        out
    }

    /// `max(x, c)` elementwise; gradient passes where the input is above `c`.
    pub fn clamp_min(&self, x: &Var, c: f64) -> Var {
        let data = x.value.data().iter().map(|&v| v.max(c)).collect();
        let out = self.node(Tensor::new(x.shape(), data).unwrap(), x.tracked());
        let ix = x.id;
        let vx = x.rc();
        self.record(&out, Box::new(move |g, grads| {
            let data = g
                .data()
                .iter()
                .zip(vx.data())
                .map(|(&gv, &v)| if v > c { gv } else { 0.0 })
                .collect();
            grads.accumulate(ix, Tensor::new(vx.shape(), data).unwrap());
        }));
        out
    }

    /// Elementwise square root (inputs expected nonnegative).
    pub fn sqrt(&self, x: &Var) -> Var {
        let data = x.value.data().iter().map(|&v| libm::sqrt(v)).collect();
        let out = self.node(Tensor::new(x.shape(), data).unwrap(), x.tracked());
        let ix = x.id;
        let y = out.rc();
        self.record(&out, Box::new(move |g, grads| {
            let data = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(&gv, &yv)| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 })
                .collect();
            grads.accumulate(ix, Tensor::new(y.shape(), data).unwrap());
        }));
        out
    }

    /// Exact GELU, `0.5 x (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&self, x: &Var) -> Var {
        let data = x.value.data().iter().map(|&v| gelu_fwd(v)).collect();
        let out = self.node(Tensor::new(x.shape(), data).unwrap(), x.tracked());
        let ix = x.id;
        let vx = x.rc();
        self.record(&out, Box::new(move |g, grads| {
            let data = g
                .data()
                .iter()
                .zip(vx.data())
                .map(|(&gv, &v)| gv * gelu_grad(v))
                .collect();
            grads.accumulate(ix, Tensor::new(vx.shape(), data).unwrap());
        }));
        out
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Var {
        let d = x.value.last_dim();
        assert_eq!(gain.value.numel(), d, "layer_norm: gain width");
        assert_eq!(bias.value.numel(), d, "layer_norm: bias width");
        let rows = x.value.numel() / d;
        let mut xhat = vec![0.0; x.value.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; x.value.numel()];
        for r in 0..rows {
            let row = &x.value.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = s;
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * s;
                xhat[r * d + j] = h;
                data[r * d + j] = h * gain.value.data()[j] + bias.value.data()[j];
            }
        }
        let tracked = x.tracked() || gain.tracked() || bias.tracked();
        let out = self.node(Tensor::new(x.shape(), data).unwrap(), tracked);
        let (ix, ig, ib) = (x.id, gain.id, bias.id);
        let vgain = gain.rc();
        let in_shape = x.value.shape().to_vec();
        let gain_shape = gain.value.shape().to_vec();
        self.record(&out, Box::new(move |g, grads| {
            let rows = g.numel() / d;
            if ig.is_some() || ib.is_some() {
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgain[j] += grow[j] * hrow[j];
                        dbias[j] += grow[j];
                    }
                }
                grads.accumulate(ig, Tensor::new(&gain_shape, dgain).unwrap());
                grads.accumulate(ib, Tensor::new(&gain_shape, dbias).unwrap());
            }
            if ix.is_some() {
                let mut dx = vec![0.0; g.numel()];
                for r in 0..rows {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut sum_g = 0.0;
                    let mut sum_gh = 0.0;
                    for j in 0..d {
                        let gh = grow[j] * vgain.data()[j];
                        sum_g += gh;
                        sum_gh += gh * hrow[j];
                    }
                    let s = inv_std[r];
                    let dn = d as f64;
                    for j in 0..d {
                        let gh = grow[j] * vgain.data()[j];
                        dx[r * d + j] = s * (gh - sum_g / dn - hrow[j] * sum_gh / dn);
                    }
                }
                grads.accumulate(ix, Tensor::new(&in_shape, dx).unwrap());
            }
        }));
        out
    }

    /// Same-padded 1D convolution over the sequence axis.
    ///
    /// `x: [B, N, Cin]`, `w: [K, Cin, Cout]`, `b: [Cout]` with odd `K`.
    pub fn conv1d_same(&self, x: &Var, w: &Var, b: &Var) -> Var {
        let xs = x.value.shape();
        let ws = w.value.shape();
        assert_eq!(xs.len(), 3, "conv1d_same: input rank");
        assert_eq!(ws.len(), 3, "conv1d_same: weight rank");
        let (bsz, n, cin) = (xs[0], xs[1], xs[2]);
        let (k, wcin, cout) = (ws[0], ws[1], ws[2]);
        assert_eq!(cin, wcin, "conv1d_same: channel mismatch");
        assert_eq!(k % 2, 1, "conv1d_same: kernel must be odd");
        let off = k / 2;
        let mut data = vec![0.0; bsz * n * cout];
        for bi in 0..bsz {
            for pos in 0..n {
                let orow = &mut data[(bi * n + pos) * cout..(bi * n + pos + 1) * cout];
                orow.copy_from_slice(b.value.data());
                for t in 0..k {
                    let src = pos as isize + t as isize - off as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let xrow = &x.value.data()[(bi * n + src as usize) * cin..(bi * n + src as usize + 1) * cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wrow = &w.value.data()[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let tracked = x.tracked() || w.tracked() || b.tracked();
        let out = self.node(Tensor::new(&[bsz, n, cout], data).unwrap(), tracked);
        let (ix, iw, ib) = (x.id, w.id, b.id);
        let (vx, vw) = (x.rc(), w.rc());
        self.record(&out, Box::new(move |g, grads| {
            if ib.is_some() {
                let mut db = vec![0.0; cout];
                for row in g.data().chunks(cout) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                grads.accumulate(ib, Tensor::new(&[cout], db).unwrap());
            }
            if iw.is_some() {
                let mut dw = vec![0.0; k * cin * cout];
                for bi in 0..bsz {
                    for pos in 0..n {
                        let grow = &g.data()[(bi * n + pos) * cout..(bi * n + pos + 1) * cout];
                        for t in 0..k {
                            let src = pos as isize + t as isize - off as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let xrow = &vx.data()
                                [(bi * n + src as usize) * cin..(bi * n + src as usize + 1) * cin];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                let drow = &mut dw[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
                grads.accumulate(iw, Tensor::new(&[k, cin, cout], dw).unwrap());
            }
            if ix.is_some() {
                let mut dx = vec![0.0; bsz * n * cin];
                for bi in 0..bsz {
                    for pos in 0..n {
                        let grow = &g.data()[(bi * n + pos) * cout..(bi * n + pos + 1) * cout];
                        for t in 0..k {
                            let src = pos as isize + t as isize - off as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let drow = &mut dx
                                [(bi * n + src as usize) * cin..(bi * n + src as usize + 1) * cin];
                            for ci in 0..cin {
                                let wrow = &vw.data()[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                                let mut acc = 0.0;
                                for (wv, gv) in wrow.iter().zip(grow) {
                                    acc += wv * gv;
                                }
                                drow[ci] += acc;
                            }
                        }
                    }
                }
                grads.accumulate(ix, Tensor::new(&[bsz, n, cin], dx).unwrap());
            }
        }));
        out
    }

    /// Select one sequence position: `[B, N, D] -> [B, D]`.
    pub fn take_position(&self, x: &Var, pos: usize) -> Var {
        let s = x.value.shape();
        assert_eq!(s.len(), 3, "take_position: rank-3 input expected");
        let (b, n, d) = (s[0], s[1], s[2]);
        assert!(pos < n, "take_position: position out of range");
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            data.extend_from_slice(&x.value.data()[(bi * n + pos) * d..(bi * n + pos + 1) * d]);
        }
        let out = self.node(Tensor::new(&[b, d], data).unwrap(), x.tracked());
        let ix = x.id;
        self.record(&out, Box::new(move |g, grads| {
            let mut dx = Tensor::zeros(&[b, n, d]);
            for bi in 0..b {
                let dst = &mut dx.data_mut()[(bi * n + pos) * d..(bi * n + pos + 1) * d];
                dst.copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
            }
            grads.accumulate(ix, dx);
        }));
        out
    }

    /// Negative log-likelihood summed over positions whose label is
    /// nonnegative: `log_probs: [.., V]`, one label per row, ignore
    /// sentinel < 0.
    pub fn nll(&self, log_probs: &Var, labels: &[i64]) -> Var {
        let v = log_probs.value.last_dim();
        let rows = log_probs.value.numel() / v;
        assert_eq!(rows, labels.len(), "nll: label count");
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= 0 {
                total -= log_probs.value.data()[r * v + label as usize];
            }
        }
        let out = self.node(Tensor::scalar(total), log_probs.tracked());
        let il = log_probs.id;
        let labels = labels.to_vec();
        let shape = log_probs.value.shape().to_vec();
        self.record(&out, Box::new(move |g, grads| {
            let gv = g.item();
            let mut dx = Tensor::zeros(&shape);
            for (r, &label) in labels.iter().enumerate() {
                if label >= 0 {
                    dx.data_mut()[r * v + label as usize] = -gv;
                }
            }
            grads.accumulate(il, dx);
        }));
        out
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;

    fn finite_diff(f: &mut dyn FnMut(&Tensor) -> f64, at: &Tensor, eps: f64) -> Tensor {
        let mut grad = Tensor::zeros(at.shape());
        for i in 0..at.numel() {
            let mut plus = at.clone();
            plus.data_mut()[i] += eps;
            let mut minus = at.clone();
            minus.data_mut()[i] -= eps;
            grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        grad
    }

    fn check_unary(op: impl Fn(&Tape, &Var) -> Var, input: Tensor, tol: f64) {
        let tape = Tape::new();
        let x = tape.param(input.clone());
        let y = op(&tape, &x);
        let loss = tape.sum_all(&weigh(&tape, &y));
        let grads = tape.backward(&loss);
        let analytic = grads.wrt(&x).unwrap().clone();
        let mut eval = |t: &Tensor| {
            let tape = Tape::new();
            let x = tape.param(t.clone());
            let y = op(&tape, &x);
            tape.sum_all(&weigh(&tape, &y)).value().item()
        };
        let numeric = finite_diff(&mut eval, &input, 1e-6);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < tol, "analytic {a} vs numeric {n}");
        }
    }

    /// Weight the output elements unevenly so reductions do not hide errors.
    fn weigh(tape: &Tape, y: &Var) -> Var {
        let n = y.value().numel();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
        tape.mul_const(y, &Tensor::new(y.shape(), w).unwrap())
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::randn_trunc(shape, 0.8, &mut rng)
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        check_unary(|t, x| t.gelu(x), random(&[3, 4], 1), 1e-6);
        check_unary(|t, x| t.sqrt(&t.add_scalar(&t.mul(x, x), 0.5)), random(&[6], 2), 1e-6);
        check_unary(|t, x| t.softmax_last(x, None), random(&[2, 5], 3), 1e-6);
        check_unary(|t, x| t.log_softmax_last(x), random(&[2, 5], 4), 1e-6);
        check_unary(
            |t, x| t.ln_clamped(&t.softmax_last(x, None)),
            random(&[2, 4], 5),
            1e-6,
        );
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let a0 = random(&[2, 3, 4], 7);
        let b0 = random(&[4, 5], 8);
        // Gradient wrt the broadcast rhs.
        let tape = Tape::new();
        let a = tape.constant(a0.clone());
        let b = tape.param(b0.clone());
        let y = tape.matmul(&a, &b);
        let loss = tape.sum_all(&weigh(&tape, &y));
        let grads = tape.backward(&loss);
        let analytic = grads.wrt(&b).unwrap().clone();
        let mut eval = |t: &Tensor| {
            let tape = Tape::new();
            let a = tape.constant(a0.clone());
            let b = tape.param(t.clone());
            let y = tape.matmul(&a, &b);
            tape.sum_all(&weigh(&tape, &y)).value().item()
        };
        let numeric = finite_diff(&mut eval, &b0, 1e-6);
        for (x, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((x - n).abs() < 1e-6, "{x} vs {n}");
        }
    }

    #[test]
    fn layer_norm_grads_match_finite_differences() {
        let x0 = random(&[3, 6], 11);
        let g0 = random(&[6], 12);
        let b0 = random(&[6], 13);
        for which in 0..3 {
            let inputs = [x0.clone(), g0.clone(), b0.clone()];
            let tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| if i == which { tape.param(t.clone()) } else { tape.constant(t.clone()) })
                .collect();
            let y = tape.layer_norm(&vars[0], &vars[1], &vars[2], 1e-12);
            let loss = tape.sum_all(&weigh(&tape, &y));
            let grads = tape.backward(&loss);
            let analytic = grads.wrt(&vars[which]).unwrap().clone();
            let mut eval = |t: &Tensor| {
                let tape = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, orig)| {
                        let val = if i == which { t.clone() } else { orig.clone() };
                        tape.constant(val)
                    })
                    .collect();
                let y = tape.layer_norm(&vs[0], &vs[1], &vs[2], 1e-12);
                // constant graph still evaluates forward
                tape.sum_all(&weigh(&tape, &y)).value().item()
            };
            let numeric = finite_diff(&mut eval, &inputs[which], 1e-6);
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                assert!((a - n).abs() < 1e-5, "input {which}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn conv1d_grads_match_finite_differences() {
        let x0 = random(&[2, 5, 3], 21);
        let w0 = random(&[3, 3, 4], 22);
        let b0 = random(&[4], 23);
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let w = tape.param(w0.clone());
        let b = tape.param(b0.clone());
        let y = tape.conv1d_same(&x, &w, &b);
        let loss = tape.sum_all(&weigh(&tape, &y));
        let grads = tape.backward(&loss);
        for (var, base, pick) in [(&x, &x0, 0usize), (&w, &w0, 1), (&b, &b0, 2)] {
            let analytic = grads.wrt(var).unwrap().clone();
            let mut eval = |t: &Tensor| {
                let tape = Tape::new();
                let xs = [x0.clone(), w0.clone(), b0.clone()];
                let vals: Vec<Tensor> = xs
                    .iter()
                    .enumerate()
                    .map(|(i, orig)| if i == pick { t.clone() } else { orig.clone() })
                    .collect();
                let x = tape.constant(vals[0].clone());
                let w = tape.constant(vals[1].clone());
                let b = tape.constant(vals[2].clone());
                let y = tape.conv1d_same(&x, &w, &b);
                tape.sum_all(&weigh(&tape, &y)).value().item()
            };
            let numeric = finite_diff(&mut eval, base, 1e-6);
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                assert!((a - n).abs() < 1e-5, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_invalid_keys() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 3], vec![0.0, 1.0, 2.0, 0.5, 0.5, 0.5]).unwrap());
        let mask = Tensor::new(&[1, 1, 1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let y = tape.softmax_last(&x, Some(&mask));
        let d = y.value().data();
        assert!((d[0] + d[1] - 1.0).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        assert!((d[3] - d[4]).abs() < 1e-12);
    }

    #[test]
    fn constants_record_nothing() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[4, 4], 1.5));
        let b = tape.constant(Tensor::full(&[4, 4], 2.0));
        let c = tape.matmul(&a, &b);
        assert!(!c.tracked());
        assert_eq!(tape.entries.borrow().len(), 0);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(&x, &x); // x^2
        let z = tape.add(&y, &x); // x^2 + x
        let grads = tape.backward(&tape.sum_all(&z));
        assert!((grads.wrt(&x).unwrap().item() - 7.0).abs() < 1e-12);
    }
}
