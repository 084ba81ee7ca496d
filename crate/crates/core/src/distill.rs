//! Distillation losses, layer mapping, and student initialization.
//!
//! Four loss suites are provided: a triple loss (hard MLM + soft MLM +
//! last-hidden cosine alignment), a layer-wise suite (embedding + per-layer
//! hidden/attention MSE + output cross entropy), a hybrid suite (hard + soft
//! MLM plus per-layer cosine/attention-KL), and a same-depth layer-wise
//! suite (hidden MSE + position-summed attention KL, convexly combined with
//! the MLM loss).
//!
//! The teacher always enters through untracked constants, so gradients flow
//! to student parameters and the plan's projection matrices only.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::corpus::MaskedBatch;
use crate::encoder::{init_sigma, EncoderConfig, EncoderOutputs, ModelState, Variant};
use crate::error::{Error, Result};
use crate::ops::PROB_FLOOR;
use crate::rng::Rng;
use crate::tensor::Tensor;

// ----------------------------------------------------------------------
// Layer mapping
// ----------------------------------------------------------------------

/// Total map from student layer indices `{0..M+1}` to teacher indices
/// `{0..N_t+1}`, with the embedding pinned to the embedding (`g(0) = 0`)
/// and the output layer pinned to the output layer (`g(M+1) = N_t+1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMap {
    map: Vec<usize>,
    student_layers: usize,
    teacher_layers: usize,
}

impl LayerMap {
    /// Uniform-stride interior mapping: `g(l) = l * (N_t / M)` when `M`
    /// divides `N_t`, otherwise `g(l) = ceil(l * N_t / M)`.
    pub fn uniform(student_layers: usize, teacher_layers: usize) -> Result<LayerMap> {
        if student_layers == 0 || student_layers > teacher_layers {
            return Err(Error::IncompatiblePlan(format!(
                "layer map needs 1 <= M <= N_t, got M={student_layers}, N_t={teacher_layers}"
            )));
        }
        let mut map = Vec::with_capacity(student_layers + 2);
        map.push(0);
        for l in 1..=student_layers {
            let g = if teacher_layers % student_layers == 0 {
                l * (teacher_layers / student_layers)
            } else {
                (l * teacher_layers).div_ceil(student_layers)
            };
            map.push(g);
        }
        map.push(teacher_layers + 1);
        Ok(LayerMap { map, student_layers, teacher_layers })
    }

    /// Teacher index for student index `l` (`0..=M+1`).
    pub fn g(&self, l: usize) -> usize {
        self.map[l]
    }

    pub fn student_layers(&self) -> usize {
        self.student_layers
    }

    pub fn teacher_layers(&self) -> usize {
        self.teacher_layers
    }
}

// ----------------------------------------------------------------------
// Plans
// ----------------------------------------------------------------------

/// Which loss suite a distillation run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DistillSuite {
    DistilTriple,
    TinyLayerwise,
    CompactHybrid,
    MobileLayerwise,
}

impl DistillSuite {
    /// The serialized suite name (also accepted by the CLI).
    pub fn name(&self) -> &'static str {
        match self {
            DistillSuite::DistilTriple => "distil_triple",
            DistillSuite::TinyLayerwise => "tiny_layerwise",
            DistillSuite::CompactHybrid => "compact_hybrid",
            DistillSuite::MobileLayerwise => "mobile_layerwise",
        }
    }

    pub fn parse(name: &str) -> Result<DistillSuite> {
        match name {
            "distil_triple" => Ok(DistillSuite::DistilTriple),
            "tiny_layerwise" => Ok(DistillSuite::TinyLayerwise),
            "compact_hybrid" => Ok(DistillSuite::CompactHybrid),
            "mobile_layerwise" => Ok(DistillSuite::MobileLayerwise),
            other => Err(Error::IncompatiblePlan(format!("unknown suite {other:?}"))),
        }
    }

    /// Default loss weights: `(2, 5, 1)` for the triple suite and
    /// `(1, 5, 3)` for the hybrid suite.
    pub fn default_alphas(&self) -> [f64; 3] {
        match self {
            DistillSuite::CompactHybrid => [1.0, 5.0, 3.0],
            _ => [2.0, 5.0, 1.0],
        }
    }
}

/// A fully materialized distillation plan: suite, weights, layer map, and
/// (when dimensions differ) trainable projection matrices.
#[derive(Debug, Clone)]
pub struct DistillPlan {
    pub suite: DistillSuite,
    /// Weights for the triple/hybrid combinations.
    pub alphas: [f64; 3],
    /// Convex weight for the same-depth suite; must lie strictly in (0, 1).
    pub mobile_alpha: f64,
    /// Layer-wise weights, length `M + 2` (embedding, layers, output).
    pub lambdas: Vec<f64>,
    pub layer_map: LayerMap,
    /// Hidden-state projection `[D_s, D_t]`, present iff the hidden
    /// dimensions differ. Trainable during the run, discarded afterwards.
    pub w_h: Option<Tensor>,
    /// Embedding projection `[E_s, E_t]`, present iff the embedding
    /// dimensions differ.
    pub w_e: Option<Tensor>,
    /// Soft-label temperature applied to both teacher and student logits.
    pub temperature: f64,
    /// Swap the attention KL direction in the hybrid and same-depth suites
    /// (default follows the formulas: student first).
    pub swap_attention_kl: bool,
    /// Disable masked-count normalization of the MLM and soft-MLM terms.
    pub paper_exact: bool,
}

impl DistillPlan {
    /// Build a plan for a student/teacher pair with per-suite defaults.
    pub fn build(
        suite: DistillSuite,
        student: &EncoderConfig,
        teacher: &EncoderConfig,
        seed: u64,
    ) -> Result<DistillPlan> {
        if student.vocab_size != teacher.vocab_size {
            return Err(Error::IncompatiblePlan(
                "student and teacher must share a vocabulary".to_string(),
            ));
        }
        let m = student.num_layers;
        let nt = teacher.num_layers;
        match suite {
            DistillSuite::DistilTriple | DistillSuite::CompactHybrid => {
                if student.hidden_dim != teacher.hidden_dim {
                    return Err(Error::IncompatiblePlan(format!(
                        "{} requires equal hidden dimensions (student {}, teacher {})",
                        suite.name(),
                        student.hidden_dim,
                        teacher.hidden_dim
                    )));
                }
            }
            DistillSuite::MobileLayerwise => {
                if m != nt || student.hidden_dim != teacher.hidden_dim {
                    return Err(Error::IncompatiblePlan(
                        "mobile_layerwise requires the same depth and hidden dimension"
                            .to_string(),
                    ));
                }
            }
            DistillSuite::TinyLayerwise => {}
        }
        if matches!(suite, DistillSuite::TinyLayerwise | DistillSuite::CompactHybrid)
            && student.num_heads != teacher.num_heads
        {
            return Err(Error::IncompatiblePlan(format!(
                "per-head alignment requires equal head counts (student {}, teacher {})",
                student.num_heads, teacher.num_heads
            )));
        }
        let mut rng = Rng::new(seed);
        let w_h = (student.hidden_dim != teacher.hidden_dim).then(|| {
            Tensor::randn_trunc(
                &[student.hidden_dim, teacher.hidden_dim],
                init_sigma(student.hidden_dim),
                &mut rng,
            )
        });
        let w_e = (student.embed_dim != teacher.embed_dim).then(|| {
            Tensor::randn_trunc(
                &[student.embed_dim, teacher.embed_dim],
                init_sigma(student.embed_dim),
                &mut rng,
            )
        });
        Ok(DistillPlan {
            suite,
            alphas: suite.default_alphas(),
            mobile_alpha: 0.5,
            lambdas: alloc::vec![1.0; m + 2],
            layer_map: LayerMap::uniform(m, nt)?,
            w_h,
            w_e,
            temperature: 1.0,
            swap_attention_kl: false,
            paper_exact: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.suite == DistillSuite::MobileLayerwise
            && !(self.mobile_alpha > 0.0 && self.mobile_alpha < 1.0)
        {
            return Err(Error::InvalidHyperparameter {
                name: "mobile_alpha",
                message: format!("{} outside the open interval (0, 1)", self.mobile_alpha),
            });
        }
        if self.lambdas.len() != self.layer_map.student_layers() + 2 {
            return Err(Error::IncompatiblePlan(format!(
                "{} lambdas for {} student layers (need M + 2)",
                self.lambdas.len(),
                self.layer_map.student_layers()
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidHyperparameter {
                name: "temperature",
                message: "must be positive".to_string(),
            });
        }
        Ok(())
    }
}

/// The plan's projection matrices bound onto a tape for one step.
pub struct BoundProjections {
    pub w_h: Option<Var>,
    pub w_e: Option<Var>,
}

impl BoundProjections {
    /// Bind as trainable parameters.
    pub fn park(tape: &Tape, plan: &DistillPlan) -> BoundProjections {
        BoundProjections {
            w_h: plan.w_h.as_ref().map(|t| tape.param(t.clone())),
            w_e: plan.w_e.as_ref().map(|t| tape.param(t.clone())),
        }
    }

    /// Bind as constants (evaluation only).
    pub fn freeze(tape: &Tape, plan: &DistillPlan) -> BoundProjections {
        BoundProjections {
            w_h: plan.w_h.as_ref().map(|t| tape.constant(t.clone())),
            w_e: plan.w_e.as_ref().map(|t| tape.constant(t.clone())),
        }
    }
}

// ----------------------------------------------------------------------
// Loss helpers
// ----------------------------------------------------------------------

fn zero(tape: &Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mask indicator as a float tensor `[B, N]`.
fn mask_weights(batch: &MaskedBatch) -> Tensor {
    let data = batch.mask_indicator.iter().map(|&w| w as f64).collect();
    Tensor::new(&[batch.batch, batch.seq_len], data).unwrap()
}

/// Attention-validity weights `[B, N]`.
fn valid_weights(batch: &MaskedBatch) -> (Tensor, usize) {
    let count = batch.attention_mask.iter().filter(|&&m| m == 1).count();
    let data = batch.attention_mask.iter().map(|&m| m as f64).collect();
    (Tensor::new(&[batch.batch, batch.seq_len], data).unwrap(), count)
}

/// Teacher probabilities as a plain tensor, with optional temperature.
fn teacher_probs(teacher_logits: &Tensor, temperature: f64) -> Tensor {
    let scaled = teacher_logits.scale(1.0 / temperature);
    crate::ops::softmax(&scaled, scaled.rank() - 1).expect("softmax over logits")
}

fn clamped_ln_tensor(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| libm::log(v.clamp(PROB_FLOOR, 1.0))).collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// Position-mean of `1 - cos(student, teacher)` over valid positions.
///
/// `student`/`teacher` are `[B, N, D]`; an optional projection maps the
/// student width onto the teacher's first.
fn cosine_alignment(
    tape: &Tape,
    student: &Var,
    teacher: &Var,
    projection: Option<&Var>,
    batch: &MaskedBatch,
) -> Result<Var> {
    let s = match projection {
        Some(w) => tape.matmul(student, w),
        None => student.clone(),
    };
    if s.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            left: s.shape().to_vec(),
            right: teacher.shape().to_vec(),
        });
    }
    let dot = tape.sum_last(&tape.mul(&s, teacher));
    let ns = tape.sqrt(&tape.sum_last(&tape.mul(&s, &s)));
    let nt = tape.sqrt(&tape.sum_last(&tape.mul(teacher, teacher)));
    let denom = tape.clamp_min(&tape.mul(&ns, &nt), crate::ops::NORM_FLOOR);
    let cos = tape.div(&dot, &denom);
    let one_minus = tape.add_scalar(&tape.scale(&cos, -1.0), 1.0);
    let (weights, count) = valid_weights(batch);
    let gated = tape.mul_const(&one_minus, &weights);
    Ok(tape.scale(&tape.sum_all(&gated), 1.0 / count.max(1) as f64))
}

/// Mean squared error between a (projected) student tensor and a teacher
/// tensor, over all elements.
fn mse_var(tape: &Tape, student: &Var, teacher: &Var, projection: Option<&Var>) -> Result<Var> {
    let s = match projection {
        Some(w) => tape.matmul(student, w),
        None => student.clone(),
    };
    if s.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            left: s.shape().to_vec(),
            right: teacher.shape().to_vec(),
        });
    }
    let diff = tape.sub(&s, teacher);
    let sq = tape.mul(&diff, &diff);
    let n = sq.value().numel().max(1) as f64;
    Ok(tape.scale(&tape.sum_all(&sq), 1.0 / n))
}

/// Attention-row KL between student and teacher maps `[B, H, N, N]`.
///
/// Default direction follows the layer-loss formulas (student as the first
/// argument); `swap` flips it. Rows are weighted by query validity; the sum
/// is divided by `heads * denominator_rows`.
fn attention_kl(
    tape: &Tape,
    student_attn: &Var,
    teacher_attn: &Var,
    batch: &MaskedBatch,
    swap: bool,
    position_mean: bool,
) -> Result<Var> {
    if student_attn.shape() != teacher_attn.shape() {
        return Err(Error::ShapeMismatch {
            left: student_attn.shape().to_vec(),
            right: teacher_attn.shape().to_vec(),
        });
    }
    let heads = student_attn.shape()[1];
    let (weights, valid) = valid_weights(batch);
    let row_weights = weights.reshape(&[batch.batch, 1, batch.seq_len, 1]).unwrap();
    // KL(p || q) = sum p (ln p - ln q); only ln of the student is
    // differentiated, every teacher term is constant.
    let per_cell = if swap {
        // KL(teacher || student): tracked part is -teacher * ln(student).
        let ln_s = tape.ln_clamped(student_attn);
        let cross = tape.mul_const(&ln_s, teacher_attn.value());
        let ent: f64 = teacher_attn
            .value()
            .mul_bcast(&row_weights)
            .unwrap()
            .mul(&clamped_ln_tensor(teacher_attn.value()))
            .unwrap()
            .sum();
        let neg = tape.scale(&tape.sum_all(&tape.mul_const(&cross, &row_weights)), -1.0);
        tape.add_scalar(&neg, ent)
    } else {
        // KL(student || teacher), fully differentiable in the student.
        let ln_s = tape.ln_clamped(student_attn);
        let diff = tape.sub(&ln_s, &tape.constant(clamped_ln_tensor(teacher_attn.value())));
        let cell = tape.mul(student_attn, &diff);
        tape.sum_all(&tape.mul_const(&cell, &row_weights))
    };
    let denom_rows = if position_mean { valid.max(1) } else { batch.batch.max(1) };
    Ok(tape.scale(&per_cell, 1.0 / (heads * denom_rows) as f64))
}

// ----------------------------------------------------------------------
// Loss operations
// ----------------------------------------------------------------------

/// Hard MLM loss with its masked-token count (zero masked tokens yields a
/// zero loss and serves as the warning flag).
pub struct MlmLoss {
    pub loss: Var,
    pub masked_tokens: usize,
}

impl MlmLoss {
    pub fn zero_masked(&self) -> bool {
        self.masked_tokens == 0
    }
}

/// Cross entropy of the student distribution against the one-hot MLM labels,
/// summed over masked positions and (unless `paper_exact`) divided by the
/// masked-token count.
pub fn loss_mlm(
    tape: &Tape,
    student: &EncoderOutputs,
    batch: &MaskedBatch,
    paper_exact: bool,
) -> MlmLoss {
    let masked = batch.masked_count();
    if masked == 0 {
        return MlmLoss { loss: zero(tape), masked_tokens: 0 };
    }
    let logp = tape.log_softmax_last(&student.mlm_logits);
    let nll = tape.nll(&logp, &batch.labels);
    let loss = if paper_exact { nll } else { tape.scale(&nll, 1.0 / masked as f64) };
    MlmLoss { loss, masked_tokens: masked }
}

/// KL of the teacher distribution against the student distribution at masked
/// positions, both computed from temperature-scaled logits; averaged over
/// masked positions unless `paper_exact`.
pub fn loss_soft_mlm(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    batch: &MaskedBatch,
    temperature: f64,
    paper_exact: bool,
) -> Result<Var> {
    if student.mlm_logits.shape() != teacher.mlm_logits.shape() {
        return Err(Error::ShapeMismatch {
            left: student.mlm_logits.shape().to_vec(),
            right: teacher.mlm_logits.shape().to_vec(),
        });
    }
    let masked = batch.masked_count();
    if masked == 0 {
        return Ok(zero(tape));
    }
    let weights = mask_weights(batch);
    let w3 = weights.reshape(&[batch.batch, batch.seq_len, 1]).unwrap();
    let p_t = teacher_probs(teacher.mlm_logits.value(), temperature);
    let p_t_gated = p_t.mul_bcast(&w3).unwrap();
    // KL = sum p ln p - sum p log q; the entropy part is constant.
    let neg_ent: f64 = p_t_gated.mul(&clamped_ln_tensor(&p_t)).unwrap().sum();
    let scaled = tape.scale(&student.mlm_logits, 1.0 / temperature);
    let logp_s = tape.log_softmax_last(&scaled);
    let cross = tape.sum_all(&tape.mul_const(&logp_s, &p_t_gated));
    let kl = tape.add_scalar(&tape.scale(&cross, -1.0), neg_ent);
    Ok(if paper_exact { kl } else { tape.scale(&kl, 1.0 / masked as f64) })
}

/// Position-mean cosine misalignment of the final hidden states.
pub fn loss_align(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    batch: &MaskedBatch,
    w_h: Option<&Var>,
) -> Result<Var> {
    cosine_alignment(tape, student.last_hidden(), teacher.last_hidden(), w_h, batch)
}

/// Hidden-state MSE (after optional projection) plus head-averaged
/// attention-map MSE against the mapped teacher layer.
pub fn loss_layer(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    map: &LayerMap,
    layer: usize,
    w_h: Option<&Var>,
) -> Result<Var> {
    if layer == 0 || layer > map.student_layers() {
        return Err(Error::IncompatiblePlan(format!(
            "layer index {layer} outside 1..={}",
            map.student_layers()
        )));
    }
    let g = map.g(layer);
    let hs = &student.hidden_states[layer];
    let ht = &teacher.hidden_states[g];
    let hidden = mse_var(tape, hs, ht, w_h)?;
    let sa = &student.attentions[layer - 1];
    let ta = &teacher.attentions[g - 1];
    if sa.shape() != ta.shape() {
        return Err(Error::ShapeMismatch {
            left: sa.shape().to_vec(),
            right: ta.shape().to_vec(),
        });
    }
    // Per-head MSE shares one denominator, so the head average equals the
    // global element mean.
    let attn = mse_var(tape, sa, ta, None)?;
    Ok(tape.add(&hidden, &attn))
}

/// MSE between the (projected) student embedding table and the teacher's.
pub fn loss_embed(
    tape: &Tape,
    student_table: &Var,
    teacher_table: &Var,
    w_e: Option<&Var>,
) -> Result<Var> {
    mse_var(tape, student_table, teacher_table, w_e)
}

/// Position-mean cross entropy of the student distribution against the
/// teacher's soft labels over all valid positions (not gated by the mask).
pub fn loss_output(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    batch: &MaskedBatch,
    temperature: f64,
) -> Result<Var> {
    if student.mlm_logits.shape() != teacher.mlm_logits.shape() {
        return Err(Error::ShapeMismatch {
            left: student.mlm_logits.shape().to_vec(),
            right: teacher.mlm_logits.shape().to_vec(),
        });
    }
    let (weights, count) = valid_weights(batch);
    let w3 = weights.reshape(&[batch.batch, batch.seq_len, 1]).unwrap();
    let p_t = teacher_probs(teacher.mlm_logits.value(), temperature).mul_bcast(&w3).unwrap();
    let scaled = tape.scale(&student.mlm_logits, 1.0 / temperature);
    let logp_s = tape.log_softmax_last(&scaled);
    let ce = tape.scale(&tape.sum_all(&tape.mul_const(&logp_s, &p_t)), -1.0);
    Ok(tape.scale(&ce, 1.0 / count.max(1) as f64))
}

/// Triple loss: `a1 * mlm + a2 * soft + a3 * align`.
pub fn loss_distil_triple(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    batch: &MaskedBatch,
    plan: &DistillPlan,
    proj: &BoundProjections,
) -> Result<Var> {
    let [a1, a2, a3] = plan.alphas;
    let mlm = loss_mlm(tape, student, batch, plan.paper_exact);
    let soft = loss_soft_mlm(tape, student, teacher, batch, plan.temperature, plan.paper_exact)?;
    let align = loss_align(tape, student, teacher, batch, proj.w_h.as_ref())?;
    let total = tape.add(
        &tape.add(&tape.scale(&mlm.loss, a1), &tape.scale(&soft, a2)),
        &tape.scale(&align, a3),
    );
    Ok(total)
}

/// Layer-wise total: `l0 * embed + sum_l l_l * layer(l) + l_{M+1} * output`.
#[allow(clippy::too_many_arguments)]
pub fn loss_tiny_total(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    batch: &MaskedBatch,
    plan: &DistillPlan,
    proj: &BoundProjections,
    student_table: &Var,
    teacher_table: &Var,
) -> Result<Var> {
    plan.validate()?;
    let m = plan.layer_map.student_layers();
    let embed = loss_embed(tape, student_table, teacher_table, proj.w_e.as_ref())?;
    let mut total = tape.scale(&embed, plan.lambdas[0]);
    for l in 1..=m {
        let layer = loss_layer(tape, student, teacher, &plan.layer_map, l, proj.w_h.as_ref())?;
        total = tape.add(&total, &tape.scale(&layer, plan.lambdas[l]));
    }
    let output = loss_output(tape, student, teacher, batch, plan.temperature)?;
    total = tape.add(&total, &tape.scale(&output, plan.lambdas[m + 1]));
    Ok(total)
}

/// Hybrid per-layer loss: position-mean cosine misalignment of hidden
/// states plus head-and-position-mean attention KL (student first).
pub fn loss_compact_layer(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    map: &LayerMap,
    layer: usize,
    batch: &MaskedBatch,
    swap_kl: bool,
) -> Result<Var> {
    if layer == 0 || layer > map.student_layers() {
        return Err(Error::IncompatiblePlan(format!(
            "layer index {layer} outside 1..={}",
            map.student_layers()
        )));
    }
    let g = map.g(layer);
    let cos = cosine_alignment(tape, &student.hidden_states[layer], &teacher.hidden_states[g], None, batch)?;
    let kl = attention_kl(
        tape,
        &student.attentions[layer - 1],
        &teacher.attentions[g - 1],
        batch,
        swap_kl,
        true,
    )?;
    Ok(tape.add(&cos, &kl))
}

/// Hybrid total: `a1 * mlm + a2 * soft + a3 * sum_l compact(l)`.
pub fn loss_compact_total(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    batch: &MaskedBatch,
    plan: &DistillPlan,
) -> Result<Var> {
    let [a1, a2, a3] = plan.alphas;
    let mlm = loss_mlm(tape, student, batch, plan.paper_exact);
    let soft = loss_soft_mlm(tape, student, teacher, batch, plan.temperature, plan.paper_exact)?;
    let mut layers = zero(tape);
    for l in 1..=plan.layer_map.student_layers() {
        let term = loss_compact_layer(
            tape,
            student,
            teacher,
            &plan.layer_map,
            l,
            batch,
            plan.swap_attention_kl,
        )?;
        layers = tape.add(&layers, &term);
    }
    Ok(tape.add(
        &tape.add(&tape.scale(&mlm.loss, a1), &tape.scale(&soft, a2)),
        &tape.scale(&layers, a3),
    ))
}

/// Same-depth per-layer loss: hidden MSE plus head-averaged,
/// position-summed attention KL against the same-index teacher layer.
pub fn loss_mobile_layer(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    layer: usize,
    batch: &MaskedBatch,
    swap_kl: bool,
) -> Result<Var> {
    let depth_s = student.hidden_states.len();
    let depth_t = teacher.hidden_states.len();
    if depth_s != depth_t {
        return Err(Error::IncompatiblePlan(format!(
            "same-depth loss requires equal depths (student {}, teacher {})",
            depth_s - 1,
            depth_t - 1
        )));
    }
    if layer == 0 || layer >= depth_s {
        return Err(Error::IncompatiblePlan(format!("layer index {layer} outside 1..{depth_s}")));
    }
    let hidden = mse_var(tape, &student.hidden_states[layer], &teacher.hidden_states[layer], None)?;
    let kl = attention_kl(
        tape,
        &student.attentions[layer - 1],
        &teacher.attentions[layer - 1],
        batch,
        swap_kl,
        false,
    )?;
    Ok(tape.add(&hidden, &kl))
}

/// Same-depth total: `alpha * mlm + (1 - alpha) * mean_l mobile(l)` with
/// `alpha` strictly inside (0, 1).
pub fn loss_mobile_total(
    tape: &Tape,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    batch: &MaskedBatch,
    plan: &DistillPlan,
) -> Result<Var> {
    if !(plan.mobile_alpha > 0.0 && plan.mobile_alpha < 1.0) {
        return Err(Error::InvalidHyperparameter {
            name: "mobile_alpha",
            message: format!("{} outside the open interval (0, 1)", plan.mobile_alpha),
        });
    }
    let m = student.hidden_states.len() - 1;
    let mlm = loss_mlm(tape, student, batch, plan.paper_exact);
    let mut layers = zero(tape);
    for l in 1..=m {
        let term = loss_mobile_layer(tape, student, teacher, l, batch, plan.swap_attention_kl)?;
        layers = tape.add(&layers, &term);
    }
    let mean_layers = tape.scale(&layers, 1.0 / m as f64);
    Ok(tape.add(
        &tape.scale(&mlm.loss, plan.mobile_alpha),
        &tape.scale(&mean_layers, 1.0 - plan.mobile_alpha),
    ))
}

/// Evaluate the plan's total loss for one batch.
///
/// The student outputs must carry full capture for the layer-wise suites;
/// the projections must be bound on the same tape as the student forward.
#[allow(clippy::too_many_arguments)]
pub fn plan_loss(
    tape: &Tape,
    plan: &DistillPlan,
    proj: &BoundProjections,
    student: &EncoderOutputs,
    teacher: &EncoderOutputs,
    student_table: &Var,
    teacher_table: &Var,
    batch: &MaskedBatch,
) -> Result<Var> {
    match plan.suite {
        DistillSuite::DistilTriple => loss_distil_triple(tape, student, teacher, batch, plan, proj),
        DistillSuite::TinyLayerwise => loss_tiny_total(
            tape,
            student,
            teacher,
            batch,
            plan,
            proj,
            student_table,
            teacher_table,
        ),
        DistillSuite::CompactHybrid => loss_compact_total(tape, student, teacher, batch, plan),
        DistillSuite::MobileLayerwise => loss_mobile_total(tape, student, teacher, batch, plan),
    }
}

// ----------------------------------------------------------------------
// Student initialization
// ----------------------------------------------------------------------

/// Initialize a student from a teacher: embedding tables and MLM head are
/// copied, and student layer `l` (0-based) receives teacher layer `2l` when
/// the teacher is exactly twice as deep, otherwise the uniform-map layer.
///
/// Fails when the shapes are incompatible; the caller should fall back to
/// random initialization in that case.
pub fn init_student_from_teacher(
    teacher: &ModelState,
    student_config: &EncoderConfig,
    seed: u64,
) -> Result<ModelState> {
    let tc = &teacher.config;
    let sc = student_config;
    let compatible = sc.hidden_dim == tc.hidden_dim
        && sc.embed_dim == tc.embed_dim
        && sc.vocab_size == tc.vocab_size
        && sc.num_heads == tc.num_heads
        && sc.ffn_expansion == tc.ffn_expansion
        && sc.max_position == tc.max_position
        && sc.variant == tc.variant
        && sc.num_ffn_blocks == tc.num_ffn_blocks
        && (sc.variant == Variant::Standard || sc.bottleneck_dim == tc.bottleneck_dim)
        && sc.num_layers <= tc.num_layers;
    if !compatible {
        return Err(Error::IncompatiblePlan(
            "student dimensions differ from the teacher; use random initialization".to_string(),
        ));
    }
    let mut student = ModelState::init(sc, seed)?;
    student.params.embedding = teacher.params.embedding.clone();
    student.params.mlm = teacher.params.mlm.clone();
    let m = sc.num_layers;
    let nt = tc.num_layers;
    let map = LayerMap::uniform(m, nt)?;
    for l in 0..m {
        let src = if nt == 2 * m { 2 * l } else { map.g(l + 1) - 1 };
        student.params.layers[l] = teacher.params.layers[src].clone();
    }
    Ok(student)
}
