//! BERT-style transformer encoders, standard and bottleneck.
//!
//! Both variants share one pre-norm block skeleton:
//!
//! ```text
//! stack(z):    h = z;  h += attn(LN(h));  h += ffn_k(LN(h)) for each FFN block
//! standard:    out = stack(x)
//! bottleneck:  out = x + up(stack(down(x)) - down(x))
//! ```
//!
//! Pre-norm keeps the residual stream additive, which small models need to
//! bootstrap the attention pathway. The bottleneck's outer residual always
//! bypasses the projections, so zeroing the up-projection reduces a block
//! to the identity, and with `bottleneck_dim == hidden_dim` identity
//! projections reproduce the standard block exactly. The bottleneck
//! embedding is narrow and reaches the hidden width through a same-padded
//! 1D convolution; a final layer norm feeds the output heads.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::corpus::MaskedBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Layer-norm epsilon used everywhere.
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Truncated-normal sigma floor for weight initialization (the full-width
/// convention).
pub const INIT_SIGMA: f64 = 0.02;

/// Width-aware initialization sigma for dense weights.
///
/// A flat 0.02 starves the attention/FFN path at reduced widths: each
/// matmul scales activations by roughly `sqrt(fan_in) * sigma`, which is
/// 0.55 at width 768 but 0.16 at width 64, leaving narrow models unable to
/// move information between positions at initialization. Scaling as
/// `0.5 / sqrt(fan_in)` keeps that factor constant and reduces to the flat
/// convention at full width.
pub fn init_sigma(fan_in: usize) -> f64 {
    INIT_SIGMA.max(0.5 / libm::sqrt(fan_in.max(1) as f64))
}

/// Encoder body variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    Standard,
    Bottleneck,
}

/// Full architectural description of a teacher or student.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub variant: Variant,
    /// Width of the per-block tower (bottleneck variant only).
    #[cfg_attr(feature = "serde", serde(default))]
    pub bottleneck_dim: usize,
    /// FFN sub-blocks per layer (1 for standard; up to 4 for bottleneck).
    #[cfg_attr(feature = "serde", serde(default = "default_one"))]
    pub num_ffn_blocks: usize,
    /// Kernel width of the embedding up-projection convolution
    /// (bottleneck variant only; odd).
    #[cfg_attr(feature = "serde", serde(default = "default_three"))]
    pub conv_kernel: usize,
}

#[cfg(feature = "serde")]
fn default_one() -> usize {
    1
}

#[cfg(feature = "serde")]
fn default_three() -> usize {
    3
}

impl EncoderConfig {
    /// Width the attention and FFN tower runs at.
    pub fn tower_dim(&self) -> usize {
        match self.variant {
            Variant::Standard => self.hidden_dim,
            Variant::Bottleneck => self.bottleneck_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return fail("layers, hidden_dim and num_heads must be positive".into());
        }
        if self.vocab_size == 0 || self.max_position == 0 || self.ffn_expansion == 0 {
            return fail("vocab_size, max_position and ffn_expansion must be positive".into());
        }
        if self.num_ffn_blocks == 0 {
            return fail("num_ffn_blocks must be positive".into());
        }
        if self.tower_dim() % self.num_heads != 0 {
            return fail(format!(
                "tower width {} not divisible by {} heads",
                self.tower_dim(),
                self.num_heads
            ));
        }
        match self.variant {
            Variant::Standard => {
                if self.embed_dim != self.hidden_dim {
                    return fail("standard variant requires embed_dim == hidden_dim".into());
                }
                if self.num_ffn_blocks != 1 {
                    return fail("standard variant uses exactly one FFN block".into());
                }
            }
            Variant::Bottleneck => {
                if self.bottleneck_dim == 0 {
                    return fail("bottleneck variant requires bottleneck_dim".into());
                }
                if self.embed_dim > self.hidden_dim {
                    return fail("bottleneck embed_dim must not exceed hidden_dim".into());
                }
                if self.num_ffn_blocks > 4 {
                    return fail("bottleneck variant supports at most four FFN blocks".into());
                }
                if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
                    return fail("conv_kernel must be odd".into());
                }
            }
        }
        Ok(())
    }

    /// 12-layer, 768-wide standard shape (~110M parameters).
    pub fn preset_base() -> EncoderConfig {
        EncoderConfig {
            num_layers: 12,
            hidden_dim: 768,
            embed_dim: 768,
            num_heads: 12,
            ffn_expansion: 4,
            vocab_size: 28996,
            max_position: 512,
            variant: Variant::Standard,
            bottleneck_dim: 0,
            num_ffn_blocks: 1,
            conv_kernel: 3,
        }
    }

    /// 6-layer, 768-wide standard shape (~65M parameters).
    pub fn preset_distilled() -> EncoderConfig {
        EncoderConfig { num_layers: 6, ..EncoderConfig::preset_base() }
    }

    /// 4-layer, 312-wide standard shape (~15M parameters).
    pub fn preset_tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 4,
            hidden_dim: 312,
            embed_dim: 312,
            vocab_size: 30522,
            ..EncoderConfig::preset_base()
        }
    }

    /// 24-layer bottleneck shape with a 128-wide embedding (~25M parameters).
    pub fn preset_mobile() -> EncoderConfig {
        EncoderConfig {
            num_layers: 24,
            hidden_dim: 512,
            embed_dim: 128,
            num_heads: 4,
            ffn_expansion: 5,
            vocab_size: 30522,
            max_position: 512,
            variant: Variant::Bottleneck,
            bottleneck_dim: 128,
            num_ffn_blocks: 4,
            conv_kernel: 3,
        }
    }
}

// ----------------------------------------------------------------------
// Parameter tree
// ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T> {
    pub q_w: T,
    pub q_b: T,
    pub k_w: T,
    pub k_b: T,
    pub v_w: T,
    pub v_b: T,
    pub o_w: T,
    pub o_b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T> {
    pub in_w: T,
    pub in_b: T,
    pub out_w: T,
    pub out_b: T,
    /// Norm applied before this FFN block.
    pub norm: NormParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckParams<T> {
    pub down_w: T,
    pub down_b: T,
    pub up_w: T,
    pub up_b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn: AttnParams<T>,
    /// Norm applied before attention.
    pub attn_norm: NormParams<T>,
    pub ffns: Vec<FfnParams<T>>,
    pub bottleneck: Option<BottleneckParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<T> {
    pub token: T,
    pub position: T,
    pub norm: NormParams<T>,
    pub conv_w: Option<T>,
    pub conv_b: Option<T>,
}

/// MLM head: dense transform, GELU, layer norm, then a decoder tied to the
/// token embedding table plus a free output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHeadParams<T> {
    pub transform_w: T,
    pub transform_b: T,
    pub norm: NormParams<T>,
    pub output_bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub w: T,
    pub b: T,
}

/// Every learnable tensor of one encoder plus optional task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub embedding: EmbeddingParams<T>,
    pub layers: Vec<LayerParams<T>>,
    /// Norm applied to the residual stream before any head.
    pub final_norm: NormParams<T>,
    pub mlm: MlmHeadParams<T>,
    pub token_head: Option<HeadParams<T>>,
    pub seq_head: Option<HeadParams<T>>,
}

impl<T> EncoderParams<T> {
    /// Rebuild the tree with every leaf transformed.
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        fn norm<T, U>(n: &NormParams<T>, f: &mut dyn FnMut(&T) -> U) -> NormParams<U> {
            NormParams { gain: f(&n.gain), bias: f(&n.bias) }
        }
        EncoderParams {
            embedding: EmbeddingParams {
                token: f(&self.embedding.token),
                position: f(&self.embedding.position),
                norm: norm(&self.embedding.norm, f),
                conv_w: self.embedding.conv_w.as_ref().map(&mut *f),
                conv_b: self.embedding.conv_b.as_ref().map(&mut *f),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn: AttnParams {
                        q_w: f(&l.attn.q_w),
                        q_b: f(&l.attn.q_b),
                        k_w: f(&l.attn.k_w),
                        k_b: f(&l.attn.k_b),
                        v_w: f(&l.attn.v_w),
                        v_b: f(&l.attn.v_b),
                        o_w: f(&l.attn.o_w),
                        o_b: f(&l.attn.o_b),
                    },
                    attn_norm: norm(&l.attn_norm, f),
                    ffns: l
                        .ffns
                        .iter()
                        .map(|ff| FfnParams {
                            in_w: f(&ff.in_w),
                            in_b: f(&ff.in_b),
                            out_w: f(&ff.out_w),
                            out_b: f(&ff.out_b),
                            norm: norm(&ff.norm, f),
                        })
                        .collect(),
                    bottleneck: l.bottleneck.as_ref().map(|bk| BottleneckParams {
                        down_w: f(&bk.down_w),
                        down_b: f(&bk.down_b),
                        up_w: f(&bk.up_w),
                        up_b: f(&bk.up_b),
                    }),
                })
                .collect(),
            final_norm: norm(&self.final_norm, f),
            mlm: MlmHeadParams {
                transform_w: f(&self.mlm.transform_w),
                transform_b: f(&self.mlm.transform_b),
                norm: norm(&self.mlm.norm, f),
                output_bias: f(&self.mlm.output_bias),
            },
            token_head: self
                .token_head
                .as_ref()
                .map(|h| HeadParams { w: f(&h.w), b: f(&h.b) }),
            seq_head: self.seq_head.as_ref().map(|h| HeadParams { w: f(&h.w), b: f(&h.b) }),
        }
    }

    /// Visit every leaf with its canonical name, in a fixed order shared by
    /// [`EncoderParams::visit_mut`].
    pub fn visit(&self, f: &mut impl FnMut(String, &T)) {
        let e = &self.embedding;
        f("embedding.token".into(), &e.token);
        f("embedding.position".into(), &e.position);
        f("embedding.norm.gain".into(), &e.norm.gain);
        f("embedding.norm.bias".into(), &e.norm.bias);
        if let Some(w) = &e.conv_w {
            f("embedding.conv_w".into(), w);
        }
        if let Some(b) = &e.conv_b {
            f("embedding.conv_b".into(), b);
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(bk) = &l.bottleneck {
                f(format!("layer{i}.bottleneck.down_w"), &bk.down_w);
                f(format!("layer{i}.bottleneck.down_b"), &bk.down_b);
            }
            f(format!("layer{i}.attn.q_w"), &l.attn.q_w);
            f(format!("layer{i}.attn.q_b"), &l.attn.q_b);
            f(format!("layer{i}.attn.k_w"), &l.attn.k_w);
            f(format!("layer{i}.attn.k_b"), &l.attn.k_b);
            f(format!("layer{i}.attn.v_w"), &l.attn.v_w);
            f(format!("layer{i}.attn.v_b"), &l.attn.v_b);
            f(format!("layer{i}.attn.o_w"), &l.attn.o_w);
            f(format!("layer{i}.attn.o_b"), &l.attn.o_b);
            f(format!("layer{i}.attn_norm.gain"), &l.attn_norm.gain);
            f(format!("layer{i}.attn_norm.bias"), &l.attn_norm.bias);
            for (j, ff) in l.ffns.iter().enumerate() {
                f(format!("layer{i}.ffn{j}.in_w"), &ff.in_w);
                f(format!("layer{i}.ffn{j}.in_b"), &ff.in_b);
                f(format!("layer{i}.ffn{j}.out_w"), &ff.out_w);
                f(format!("layer{i}.ffn{j}.out_b"), &ff.out_b);
                f(format!("layer{i}.ffn{j}.norm.gain"), &ff.norm.gain);
                f(format!("layer{i}.ffn{j}.norm.bias"), &ff.norm.bias);
            }
            if let Some(bk) = &l.bottleneck {
                f(format!("layer{i}.bottleneck.up_w"), &bk.up_w);
                f(format!("layer{i}.bottleneck.up_b"), &bk.up_b);
            }
        }
        f("final_norm.gain".into(), &self.final_norm.gain);
        f("final_norm.bias".into(), &self.final_norm.bias);
        f("mlm.transform_w".into(), &self.mlm.transform_w);
        f("mlm.transform_b".into(), &self.mlm.transform_b);
        f("mlm.norm.gain".into(), &self.mlm.norm.gain);
        f("mlm.norm.bias".into(), &self.mlm.norm.bias);
        f("mlm.output_bias".into(), &self.mlm.output_bias);
        if let Some(h) = &self.token_head {
            f("token_head.w".into(), &h.w);
            f("token_head.b".into(), &h.b);
        }
        if let Some(h) = &self.seq_head {
            f("seq_head.w".into(), &h.w);
            f("seq_head.b".into(), &h.b);
        }
    }

    /// Mutable counterpart of [`EncoderParams::visit`] (same order, same
    /// names).
    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        let e = &mut self.embedding;
        f("embedding.token".into(), &mut e.token);
        f("embedding.position".into(), &mut e.position);
        f("embedding.norm.gain".into(), &mut e.norm.gain);
        f("embedding.norm.bias".into(), &mut e.norm.bias);
        if let Some(w) = &mut e.conv_w {
            f("embedding.conv_w".into(), w);
        }
        if let Some(b) = &mut e.conv_b {
            f("embedding.conv_b".into(), b);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(bk) = &mut l.bottleneck {
                f(format!("layer{i}.bottleneck.down_w"), &mut bk.down_w);
                f(format!("layer{i}.bottleneck.down_b"), &mut bk.down_b);
            }
            f(format!("layer{i}.attn.q_w"), &mut l.attn.q_w);
            f(format!("layer{i}.attn.q_b"), &mut l.attn.q_b);
            f(format!("layer{i}.attn.k_w"), &mut l.attn.k_w);
            f(format!("layer{i}.attn.k_b"), &mut l.attn.k_b);
            f(format!("layer{i}.attn.v_w"), &mut l.attn.v_w);
            f(format!("layer{i}.attn.v_b"), &mut l.attn.v_b);
            f(format!("layer{i}.attn.o_w"), &mut l.attn.o_w);
            f(format!("layer{i}.attn.o_b"), &mut l.attn.o_b);
            f(format!("layer{i}.attn_norm.gain"), &mut l.attn_norm.gain);
            f(format!("layer{i}.attn_norm.bias"), &mut l.attn_norm.bias);
            for (j, ff) in l.ffns.iter_mut().enumerate() {
                f(format!("layer{i}.ffn{j}.in_w"), &mut ff.in_w);
                f(format!("layer{i}.ffn{j}.in_b"), &mut ff.in_b);
                f(format!("layer{i}.ffn{j}.out_w"), &mut ff.out_w);
                f(format!("layer{i}.ffn{j}.out_b"), &mut ff.out_b);
                f(format!("layer{i}.ffn{j}.norm.gain"), &mut ff.norm.gain);
                f(format!("layer{i}.ffn{j}.norm.bias"), &mut ff.norm.bias);
            }
            if let Some(bk) = &mut l.bottleneck {
                f(format!("layer{i}.bottleneck.up_w"), &mut bk.up_w);
                f(format!("layer{i}.bottleneck.up_b"), &mut bk.up_b);
            }
        }
        f("final_norm.gain".into(), &mut self.final_norm.gain);
        f("final_norm.bias".into(), &mut self.final_norm.bias);
        f("mlm.transform_w".into(), &mut self.mlm.transform_w);
        f("mlm.transform_b".into(), &mut self.mlm.transform_b);
        f("mlm.norm.gain".into(), &mut self.mlm.norm.gain);
        f("mlm.norm.bias".into(), &mut self.mlm.norm.bias);
        f("mlm.output_bias".into(), &mut self.mlm.output_bias);
        if let Some(h) = &mut self.token_head {
            f("token_head.w".into(), &mut h.w);
            f("token_head.b".into(), &mut h.b);
        }
        if let Some(h) = &mut self.seq_head {
            f("seq_head.w".into(), &mut h.w);
            f("seq_head.b".into(), &mut h.b);
        }
    }
}

// ----------------------------------------------------------------------
// Model state
// ----------------------------------------------------------------------

/// All learnable parameters of one encoder plus its task heads.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub params: EncoderParams<Tensor>,
    /// Label inventory when a task head is attached.
    pub task_labels: Option<Vec<String>>,
}

fn norm_init(dim: usize) -> NormParams<Tensor> {
    NormParams { gain: Tensor::full(&[dim], 1.0), bias: Tensor::zeros(&[dim]) }
}

fn dense_init(rows: usize, cols: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    (Tensor::randn_trunc(&[rows, cols], init_sigma(rows), rng), Tensor::zeros(&[cols]))
}

impl ModelState {
    /// Fresh random initialization (truncated normal weights, zero biases,
    /// unit norms).
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<ModelState> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.hidden_dim;
        let e = config.embed_dim;
        let w = config.tower_dim();
        let f = config.ffn_expansion * w;

        let embedding = EmbeddingParams {
            token: Tensor::randn_trunc(&[config.vocab_size, e], INIT_SIGMA, &mut rng),
            position: Tensor::randn_trunc(&[config.max_position, d], INIT_SIGMA, &mut rng),
            norm: norm_init(d),
            conv_w: matches!(config.variant, Variant::Bottleneck).then(|| {
                Tensor::randn_trunc(
                    &[config.conv_kernel, e, d],
                    init_sigma(config.conv_kernel * e),
                    &mut rng,
                )
            }),
            conv_b: matches!(config.variant, Variant::Bottleneck).then(|| Tensor::zeros(&[d])),
        };
        let layers = (0..config.num_layers)
            .map(|_| {
                let (q_w, q_b) = dense_init(w, w, &mut rng);
                let (k_w, k_b) = dense_init(w, w, &mut rng);
                let (v_w, v_b) = dense_init(w, w, &mut rng);
                let (o_w, o_b) = dense_init(w, w, &mut rng);
                LayerParams {
                    attn: AttnParams { q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b },
                    attn_norm: norm_init(w),
                    ffns: (0..config.num_ffn_blocks)
                        .map(|_| {
                            let (in_w, in_b) = dense_init(w, f, &mut rng);
                            let (out_w, out_b) = dense_init(f, w, &mut rng);
                            FfnParams { in_w, in_b, out_w, out_b, norm: norm_init(w) }
                        })
                        .collect(),
                    bottleneck: matches!(config.variant, Variant::Bottleneck).then(|| {
                        let (down_w, down_b) = dense_init(d, w, &mut rng);
                        let (up_w, up_b) = dense_init(w, d, &mut rng);
                        BottleneckParams { down_w, down_b, up_w, up_b }
                    }),
                }
            })
            .collect();
        let (transform_w, transform_b) = dense_init(d, e, &mut rng);
        let mlm = MlmHeadParams {
            transform_w,
            transform_b,
            norm: norm_init(e),
            output_bias: Tensor::zeros(&[config.vocab_size]),
        };
        Ok(ModelState {
            config: config.clone(),
            params: EncoderParams {
                embedding,
                layers,
                final_norm: norm_init(d),
                mlm,
                token_head: None,
                seq_head: None,
            },
            task_labels: None,
        })
    }

    /// Attach a per-token classification head for `labels`.
    pub fn attach_token_head(&mut self, labels: Vec<String>, seed: u64) {
        let mut rng = Rng::new(seed);
        let (w, b) = dense_init(self.config.hidden_dim, labels.len(), &mut rng);
        self.params.token_head = Some(HeadParams { w, b });
        self.task_labels = Some(labels);
    }

    /// Attach a sequence classification head over the CLS position.
    pub fn attach_seq_head(&mut self, labels: Vec<String>, seed: u64) {
        let mut rng = Rng::new(seed);
        let (w, b) = dense_init(self.config.hidden_dim, labels.len(), &mut rng);
        self.params.seq_head = Some(HeadParams { w, b });
        self.task_labels = Some(labels);
    }

    /// Exhaustive element count over every parameter tensor.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.params.visit(&mut |_, t| total += t.numel());
        total
    }

    /// Inference forward pass: runs on a throwaway tape with constant
    /// parameters.
    pub fn forward_infer(&self, batch: &MaskedBatch, capture: Capture) -> Result<EncoderOutputs> {
        let tape = Tape::new();
        let params = self.params.map(&mut |t| tape.constant(t.clone()));
        forward(&tape, &params, &self.config, batch, capture, None)
    }
}

/// Closed-form parameter count for a configuration.
///
/// Kept independent of [`ModelState::init`] so the two routes can check each
/// other.
pub fn count_params(config: &EncoderConfig) -> usize {
    let d = config.hidden_dim;
    let e = config.embed_dim;
    let w = config.tower_dim();
    let f = config.ffn_expansion * w;
    let v = config.vocab_size;
    let norm = |dim: usize| 2 * dim;

    let mut embedding = v * e + config.max_position * d + norm(d);
    if config.variant == Variant::Bottleneck {
        embedding += config.conv_kernel * e * d + d;
    }

    let attn = 4 * (w * w + w);
    let ffn = (w * f + f) + (f * w + w) + norm(w);
    let mut layer = attn + norm(w) + config.num_ffn_blocks * ffn;
    if config.variant == Variant::Bottleneck {
        layer += (d * w + w) + (w * d + d);
    }

    let mlm = d * e + e + norm(e) + v;

    embedding + config.num_layers * layer + norm(d) + mlm
}

// ----------------------------------------------------------------------
// Forward pass
// ----------------------------------------------------------------------

/// What an [`EncoderOutputs`] retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capture {
    /// MLM logits only.
    LogitsOnly,
    /// Logits plus all hidden states and attention maps (required by
    /// layer-wise distillation).
    Full,
}

/// Per-layer hidden states, per-layer per-head attention maps, and MLM
/// logits.
///
/// `hidden_states[0]` is the embedding output; entry `l` is the output of
/// block `l`. Attention maps are `[B, H, N, N]`; rows belonging to valid
/// query positions are distributions over valid key positions, rows of
/// padded queries are all zero.
pub struct EncoderOutputs {
    pub hidden_states: Vec<Var>,
    pub attentions: Vec<Var>,
    pub mlm_logits: Var,
    /// Final-norm output consumed by the task heads.
    pub head_stream: Var,
}

impl EncoderOutputs {
    /// Final hidden state `[B, N, D]`.
    pub fn last_hidden(&self) -> &Var {
        self.hidden_states.last().expect("encoder produced no hidden states")
    }
}

/// Optional dropout configuration for a training forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut Rng,
}

fn apply_dropout(tape: &Tape, x: &Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let keep = 1.0 - d.rate;
            let data = (0..x.value().numel())
                .map(|_| if d.rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = Tensor::new(x.shape(), data).unwrap();
            tape.mul_const(x, &mask)
        }
        _ => x.clone(),
    }
}

fn dense(tape: &Tape, x: &Var, w: &Var, b: &Var) -> Var {
    tape.add_bias(&tape.matmul(x, w), b)
}

/// Run the encoder over a batch.
///
/// Token ids must be within the vocabulary and the sequence no longer than
/// the position table. Padded positions neither attend nor are attended to,
/// and never influence valid positions.
pub fn forward(
    tape: &Tape,
    params: &EncoderParams<Var>,
    config: &EncoderConfig,
    batch: &MaskedBatch,
    capture: Capture,
    mut dropout: Option<Dropout<'_>>,
) -> Result<EncoderOutputs> {
    let (b, n) = (batch.batch, batch.seq_len);
    if n > config.max_position {
        return Err(Error::SequenceTooLong { len: n, max: config.max_position });
    }
    for &id in &batch.input_ids {
        if id as usize >= config.vocab_size {
            return Err(Error::TokenIdOutOfRange { id, vocab_size: config.vocab_size });
        }
    }
    let d = config.hidden_dim;
    let heads = config.num_heads;
    let w = config.tower_dim();
    let dh = w / heads;

    // Key-validity mask [B,1,1,N] and query mask [B,1,N,1] from the
    // attention mask.
    let attn_f: Vec<f64> = batch.attention_mask.iter().map(|&m| m as f64).collect();
    let key_mask = Tensor::new(&[b, 1, 1, n], attn_f.clone())?;
    let query_mask = Tensor::new(&[b, 1, n, 1], attn_f.clone())?;
    let position_mask = Tensor::new(&[b, n, 1], attn_f)?;

    // Embedding.
    let tok = tape.gather_rows(&params.embedding.token, &batch.input_ids);
    let tok = tape.reshape(&tok, &[b, n, config.embed_dim]);
    let mut h = match (&params.embedding.conv_w, &params.embedding.conv_b) {
        (Some(cw), Some(cb)) => tape.conv1d_same(&tok, cw, cb),
        _ => tok,
    };
    let pos_ids: Vec<u32> = (0..b).flat_map(|_| 0..n as u32).collect();
    let pos = tape.gather_rows(&params.embedding.position, &pos_ids);
    let pos = tape.reshape(&pos, &[b, n, d]);
    h = tape.add(&h, &pos);
    h = tape.layer_norm(&h, &params.embedding.norm.gain, &params.embedding.norm.bias, LAYER_NORM_EPS);
    h = apply_dropout(tape, &h, &mut dropout);
    // Zero embeddings at padded positions so they stay inert.
    h = tape.mul_const(&h, &position_mask);

    let mut hidden_states = alloc::vec![h.clone()];
    let mut attentions = Vec::new();

    for layer in &params.layers {
        let x = h.clone();
        let entry = match &layer.bottleneck {
            Some(bk) => dense(tape, &x, &bk.down_w, &bk.down_b),
            None => x.clone(),
        };
        let mut a = entry.clone();

        // Multi-head attention at tower width (pre-norm).
        let z = tape.layer_norm(&a, &layer.attn_norm.gain, &layer.attn_norm.bias, LAYER_NORM_EPS);
        let q = dense(tape, &z, &layer.attn.q_w, &layer.attn.q_b);
        let k = dense(tape, &z, &layer.attn.k_w, &layer.attn.k_b);
        let v = dense(tape, &z, &layer.attn.v_w, &layer.attn.v_b);
        let split = |t: &Var| {
            let r = tape.reshape(t, &[b, n, heads, dh]);
            tape.permute(&r, &[0, 2, 1, 3])
        };
        let (qh, kh, vh) = (split(&q), split(&k), split(&v));
        let scores = tape.matmul(&qh, &tape.transpose_last(&kh));
        let scores = tape.scale(&scores, 1.0 / libm::sqrt(dh as f64));
        let probs = tape.softmax_last(&scores, Some(&key_mask));
        // Padded queries attend nowhere: zero their rows.
        let probs = tape.mul_const(&probs, &query_mask);
        if capture == Capture::Full {
            attentions.push(probs.clone());
        }
        let ctx = tape.matmul(&probs, &vh);
        let merged = tape.reshape(&tape.permute(&ctx, &[0, 2, 1, 3]), &[b, n, w]);
        let attn_out = dense(tape, &merged, &layer.attn.o_w, &layer.attn.o_b);
        let attn_out = apply_dropout(tape, &attn_out, &mut dropout);
        a = tape.add(&a, &attn_out);

        for ffn in &layer.ffns {
            let zf = tape.layer_norm(&a, &ffn.norm.gain, &ffn.norm.bias, LAYER_NORM_EPS);
            let inner = tape.gelu(&dense(tape, &zf, &ffn.in_w, &ffn.in_b));
            let out = dense(tape, &inner, &ffn.out_w, &ffn.out_b);
            let out = apply_dropout(tape, &out, &mut dropout);
            a = tape.add(&a, &out);
        }

        h = match &layer.bottleneck {
            Some(bk) => {
                // Only the stack's contribution is projected back up; the
                // outer residual bypasses the projections entirely.
                let delta = tape.sub(&a, &entry);
                let up = dense(tape, &delta, &bk.up_w, &bk.up_b);
                tape.add(&x, &tape.mul_const(&up, &position_mask))
            }
            None => tape.mul_const(&a, &position_mask),
        };
        hidden_states.push(h.clone());
    }

    // Final norm feeds every head; the captured hidden states stay raw.
    let stream =
        tape.layer_norm(&h, &params.final_norm.gain, &params.final_norm.bias, LAYER_NORM_EPS);

    // MLM head with decoder tied to the token embedding.
    let t = dense(tape, &stream, &params.mlm.transform_w, &params.mlm.transform_b);
    let t = tape.gelu(&t);
    let t = tape.layer_norm(&t, &params.mlm.norm.gain, &params.mlm.norm.bias, LAYER_NORM_EPS);
    let logits = tape.matmul_nt(&t, &params.embedding.token);
    let logits = tape.add_bias(&logits, &params.mlm.output_bias);
    if !logits.value().all_finite() {
        return Err(Error::NonFinite { context: "encoder forward" });
    }

    if capture == Capture::LogitsOnly {
        hidden_states.clear();
        attentions.clear();
    }
    Ok(EncoderOutputs { hidden_states, attentions, mlm_logits: logits, head_stream: stream })
}

/// Per-token label logits `[B, N, C]` from the final hidden state.
pub fn task_head_token(
    tape: &Tape,
    params: &EncoderParams<Var>,
    outputs: &EncoderOutputs,
) -> Result<Var> {
    let head = params
        .token_head
        .as_ref()
        .ok_or_else(|| Error::MissingParameter("token_head".into()))?;
    Ok(dense(tape, &outputs.head_stream, &head.w, &head.b))
}

/// Sequence label logits `[B, C]` from the CLS position of the final hidden
/// state.
pub fn task_head_seq(
    tape: &Tape,
    params: &EncoderParams<Var>,
    outputs: &EncoderOutputs,
) -> Result<Var> {
    let head = params
        .seq_head
        .as_ref()
        .ok_or_else(|| Error::MissingParameter("seq_head".into()))?;
    let cls = tape.take_position(&outputs.head_stream, 0);
    Ok(dense(tape, &cls, &head.w, &head.b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MaskedBatch;
    use alloc::vec;

    fn toy_config(layers: usize, hidden: usize, heads: usize, vocab: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            hidden_dim: hidden,
            embed_dim: hidden,
            num_heads: heads,
            ffn_expansion: 2,
            vocab_size: vocab,
            max_position: 32,
            variant: Variant::Standard,
            bottleneck_dim: 0,
            num_ffn_blocks: 1,
            conv_kernel: 3,
        }
    }

    fn toy_bottleneck(layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            hidden_dim: 16,
            embed_dim: 8,
            num_heads: 2,
            ffn_expansion: 2,
            vocab_size: 23,
            max_position: 32,
            variant: Variant::Bottleneck,
            bottleneck_dim: 8,
            num_ffn_blocks: 3,
            conv_kernel: 3,
        }
    }

    fn batch_of(ids: Vec<u32>, mask: Vec<u8>, b: usize, n: usize) -> MaskedBatch {
        MaskedBatch::unmasked(&ids, &mask, b, n)
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let config = toy_config(2, 8, 2, 17);
        let state = ModelState::init(&config, 3).unwrap();
        let ids: Vec<u32> = (0..12).map(|i| (i % 17) as u32).collect();
        let batch = batch_of(ids, vec![1; 12], 2, 6);
        let out = state.forward_infer(&batch, Capture::Full).unwrap();
        assert_eq!(out.hidden_states.len(), 3);
        assert_eq!(out.attentions.len(), 2);
        for attn in &out.attentions {
            assert_eq!(attn.shape(), &[2, 2, 6, 6]);
            for row in attn.value().data().chunks(6) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn padding_is_isolated() {
        let config = toy_config(2, 8, 2, 17);
        let state = ModelState::init(&config, 5).unwrap();
        // Same content, growing padding.
        let content: Vec<u32> = vec![2, 7, 9, 11, 3];
        let mut short_ids = content.clone();
        short_ids.extend([0, 0]);
        let mut long_ids = content.clone();
        long_ids.extend([0, 0, 0, 0, 0]);
        let short = batch_of(short_ids, vec![1, 1, 1, 1, 1, 0, 0], 1, 7);
        let long = batch_of(long_ids, vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0], 1, 10);
        let out_short = state.forward_infer(&short, Capture::Full).unwrap();
        let out_long = state.forward_infer(&long, Capture::Full).unwrap();
        let d = config.hidden_dim;
        for (hs, hl) in out_short.hidden_states.iter().zip(&out_long.hidden_states) {
            for pos in 0..5 {
                let s = &hs.value().data()[pos * d..(pos + 1) * d];
                let l = &hl.value().data()[pos * d..(pos + 1) * d];
                for (a, b) in s.iter().zip(l) {
                    assert!((a - b).abs() < 1e-12, "padding leaked into position {pos}");
                }
            }
        }
        // Padded query rows are zero.
        for attn in &out_long.attentions {
            let n = 10;
            for h in 0..2 {
                for q in 5..n {
                    let row = &attn.value().data()[(h * n + q) * n..(h * n + q + 1) * n];
                    assert!(row.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        let config = toy_config(2, 8, 2, 17);
        let state = ModelState::init(&config, 5).unwrap();
        let a: Vec<u32> = vec![2, 7, 9, 3];
        let b: Vec<u32> = vec![2, 11, 4, 3];
        let fwd = |rows: &[&[u32]]| {
            let ids: Vec<u32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
            let batch = batch_of(ids, vec![1; 8], 2, 4);
            state.forward_infer(&batch, Capture::LogitsOnly).unwrap()
        };
        let ab = fwd(&[&a, &b]);
        let ba = fwd(&[&b, &a]);
        let v = config.vocab_size;
        let row = 4 * v;
        assert_eq!(ab.mlm_logits.value().data()[..row], ba.mlm_logits.value().data()[row..]);
        assert_eq!(ab.mlm_logits.value().data()[row..], ba.mlm_logits.value().data()[..row]);
    }

    #[test]
    fn forward_is_deterministic() {
        let config = toy_config(2, 8, 2, 17);
        let state = ModelState::init(&config, 5).unwrap();
        let batch = batch_of(vec![1, 2, 3, 4], vec![1; 4], 1, 4);
        let a = state.forward_infer(&batch, Capture::LogitsOnly).unwrap();
        let b = state.forward_infer(&batch, Capture::LogitsOnly).unwrap();
        assert_eq!(a.mlm_logits.value(), b.mlm_logits.value());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let config = toy_config(1, 8, 2, 17);
        let state = ModelState::init(&config, 5).unwrap();
        let batch = batch_of(vec![40], vec![1], 1, 1);
        assert!(matches!(
            state.forward_infer(&batch, Capture::LogitsOnly),
            Err(Error::TokenIdOutOfRange { .. })
        ));
        let ids: Vec<u32> = vec![1; 40];
        let batch = batch_of(ids, vec![1; 40], 1, 40);
        assert!(matches!(
            state.forward_infer(&batch, Capture::LogitsOnly),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn count_params_matches_enumeration_on_random_configs() {
        let mut rng = Rng::new(42);
        for trial in 0..20 {
            let bottleneck = trial % 2 == 1;
            let heads = 1 + rng.next_below(4);
            let width = heads * (1 + rng.next_below(6));
            let config = if bottleneck {
                EncoderConfig {
                    num_layers: 1 + rng.next_below(4),
                    hidden_dim: width * 2,
                    embed_dim: width,
                    num_heads: heads,
                    ffn_expansion: 1 + rng.next_below(4),
                    vocab_size: 11 + rng.next_below(90),
                    max_position: 16 + rng.next_below(48),
                    variant: Variant::Bottleneck,
                    bottleneck_dim: width,
                    num_ffn_blocks: 1 + rng.next_below(4),
                    conv_kernel: [1, 3, 5][rng.next_below(3)],
                }
            } else {
                EncoderConfig {
                    num_layers: 1 + rng.next_below(4),
                    hidden_dim: width,
                    embed_dim: width,
                    num_heads: heads,
                    ffn_expansion: 1 + rng.next_below(4),
                    vocab_size: 11 + rng.next_below(90),
                    max_position: 16 + rng.next_below(48),
                    variant: Variant::Standard,
                    bottleneck_dim: 0,
                    num_ffn_blocks: 1,
                    conv_kernel: 3,
                }
            };
            let state = ModelState::init(&config, trial as u64).unwrap();
            assert_eq!(
                count_params(&config),
                state.param_count(),
                "closed form vs enumeration diverged for {config:?}"
            );
        }
    }

    #[test]
    fn preset_counts_match_reported_sizes() {
        let within = |count: usize, target: f64, tol: f64| {
            let c = count as f64;
            (c - target).abs() / target <= tol
        };
        assert!(within(count_params(&EncoderConfig::preset_base()), 110e6, 0.02));
        assert!(within(count_params(&EncoderConfig::preset_distilled()), 65e6, 0.03));
        assert!(within(count_params(&EncoderConfig::preset_tiny()), 15e6, 0.05));
        assert!(within(count_params(&EncoderConfig::preset_mobile()), 25e6, 0.08));
    }

    #[test]
    fn zeroed_up_projection_makes_block_identity() {
        let config = toy_bottleneck(1);
        let mut state = ModelState::init(&config, 9).unwrap();
        let bk = state.params.layers[0].bottleneck.as_mut().unwrap();
        bk.up_w = Tensor::zeros(bk.up_w.shape());
        bk.up_b = Tensor::zeros(bk.up_b.shape());
        let batch = batch_of(vec![1, 2, 3, 4, 5, 6], vec![1; 6], 1, 6);
        let out = state.forward_infer(&batch, Capture::Full).unwrap();
        let emb = out.hidden_states[0].value();
        let blk = out.hidden_states[1].value();
        for (a, b) in emb.data().iter().zip(blk.data()) {
            assert!((a - b).abs() < 1e-12, "block output diverged from residual input");
        }
    }

    #[test]
    fn identity_bottleneck_matches_standard_forward() {
        // Standard 2-layer model.
        let std_config = toy_config(2, 8, 2, 19);
        let std_state = ModelState::init(&std_config, 31).unwrap();
        // Bottleneck shape with tower width == hidden width, conv kernel 1.
        let bn_config = EncoderConfig {
            variant: Variant::Bottleneck,
            bottleneck_dim: 8,
            conv_kernel: 1,
            ..std_config.clone()
        };
        let mut bn_state = ModelState::init(&bn_config, 77).unwrap();
        // Copy shared parameters and set the projections to identity.
        bn_state.params.embedding.token = std_state.params.embedding.token.clone();
        bn_state.params.embedding.position = std_state.params.embedding.position.clone();
        bn_state.params.embedding.norm = std_state.params.embedding.norm.clone();
        // Kernel-1 convolution with an identity matrix is a no-op.
        let mut eye = Tensor::zeros(&[1, 8, 8]);
        for i in 0..8 {
            eye.data_mut()[i * 8 + i] = 1.0;
        }
        bn_state.params.embedding.conv_w = Some(eye);
        bn_state.params.embedding.conv_b = Some(Tensor::zeros(&[8]));
        bn_state.params.final_norm = std_state.params.final_norm.clone();
        for (bl, sl) in bn_state.params.layers.iter_mut().zip(&std_state.params.layers) {
            bl.attn = sl.attn.clone();
            bl.attn_norm = sl.attn_norm.clone();
            bl.ffns = sl.ffns.clone();
            let mut eye2 = Tensor::zeros(&[8, 8]);
            for i in 0..8 {
                eye2.data_mut()[i * 8 + i] = 1.0;
            }
            let bk = bl.bottleneck.as_mut().unwrap();
            bk.down_w = eye2.clone();
            bk.down_b = Tensor::zeros(&[8]);
            bk.up_w = eye2;
            bk.up_b = Tensor::zeros(&[8]);
        }
        bn_state.params.mlm = std_state.params.mlm.clone();

        let batch = batch_of(vec![3, 8, 15, 4, 2, 9], vec![1; 6], 1, 6);
        let a = std_state.forward_infer(&batch, Capture::Full).unwrap();
        let b = bn_state.forward_infer(&batch, Capture::Full).unwrap();
        for (ha, hb) in a.hidden_states.iter().zip(&b.hidden_states) {
            for (x, y) in ha.value().data().iter().zip(hb.value().data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        for (x, y) in a.mlm_logits.value().data().iter().zip(b.mlm_logits.value().data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn task_heads_have_expected_shapes_and_uniform_zero_head() {
        let config = toy_config(1, 8, 2, 17);
        let mut state = ModelState::init(&config, 3).unwrap();
        let labels: Vec<String> = (0..13).map(|i| format!("L{i}")).collect();
        state.attach_token_head(labels.clone(), 1);
        state.attach_seq_head(labels, 2);
        // Zero-weight heads produce uniform distributions.
        state.params.token_head.as_mut().unwrap().w = Tensor::zeros(&[8, 13]);
        state.params.token_head.as_mut().unwrap().b = Tensor::zeros(&[13]);
        let batch = batch_of(vec![1, 2, 3, 4], vec![1; 4], 1, 4);
        let tape = Tape::new();
        let params = state.params.map(&mut |t| tape.constant(t.clone()));
        let out = forward(&tape, &params, &state.config, &batch, Capture::Full, None).unwrap();
        let tok = task_head_token(&tape, &params, &out).unwrap();
        assert_eq!(tok.shape(), &[1, 4, 13]);
        let probs = crate::ops::softmax(tok.value(), 2).unwrap();
        for p in probs.data() {
            assert!((p - 1.0 / 13.0).abs() < 1e-12);
        }
        let seq = task_head_seq(&tape, &params, &out).unwrap();
        assert_eq!(seq.shape(), &[1, 13]);
    }

    #[test]
    fn gradients_flow_through_both_variants() {
        for config in [toy_config(2, 8, 2, 17), toy_bottleneck(2)] {
            let state = ModelState::init(&config, 11).unwrap();
            let batch = MaskedBatch {
                batch: 1,
                seq_len: 4,
                input_ids: vec![1, 2, 3, 4],
                labels: vec![-100, 5, -100, 6],
                mask_indicator: vec![0, 1, 0, 1],
                attention_mask: vec![1; 4],
            };
            let tape = Tape::new();
            let params = state.params.map(&mut |t| tape.param(t.clone()));
            let out = forward(&tape, &params, &config, &batch, Capture::Full, None).unwrap();
            let logp = tape.log_softmax_last(&out.mlm_logits);
            let loss = tape.nll(&logp, &batch.labels);
            let grads = tape.backward(&loss);
            let mut missing = 0;
            params.visit(&mut |name, var| {
                if grads.wrt(var).is_none() && !name.contains("head") {
                    missing += 1;
                }
            });
            assert_eq!(missing, 0, "some parameters received no gradient");
        }
    }
}
