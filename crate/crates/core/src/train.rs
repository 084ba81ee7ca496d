//! Optimization loops: distillation, continual MLM pretraining, and
//! downstream fine-tuning.
//!
//! All loops are deterministic given the run seed. Wall-clock timing and
//! checkpointing are injected through [`TrainObserver`] so the loops stay
//! free of IO.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::Tape;
use crate::corpus::{
    mask_batch, MaskPolicy, MaskedBatch, SeqClassRecord, TokenBlocks, TokenClassRecord,
};
use crate::distill::{init_student_from_teacher, plan_loss, BoundProjections, DistillPlan};
use crate::encoder::{
    forward, task_head_seq, task_head_token, Capture, Dropout, EncoderConfig, ModelState,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::{align_labels, encode, encode_words, Vocab};

// ----------------------------------------------------------------------
// Run configuration and reports
// ----------------------------------------------------------------------

/// What a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RunMode {
    Distill,
    PretrainMlm,
    FinetuneToken,
    FinetuneSeq,
}

/// Hyperparameters shared by every run type.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct RunConfig {
    pub mode: RunMode,
    /// Optimizer steps (distillation and pretraining).
    pub steps: usize,
    /// Passes over the dataset (fine-tuning).
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub mask_policy: MaskPolicy,
}

impl RunConfig {
    /// Distillation defaults at desk scale.
    pub fn distill_defaults(steps: usize, seed: u64) -> RunConfig {
        RunConfig {
            mode: RunMode::Distill,
            steps,
            epochs: 0,
            batch_size: 8,
            learning_rate: 5e-4,
            warmup_fraction: 0.06,
            seed,
            eval_every: 200,
            max_len: 32,
            dropout: 0.1,
            grad_clip: 1.0,
            weight_decay: 0.01,
            mask_policy: MaskPolicy::default(),
        }
    }

    /// Continual MLM pretraining defaults.
    pub fn pretrain_defaults(steps: usize, seed: u64) -> RunConfig {
        RunConfig { mode: RunMode::PretrainMlm, ..RunConfig::distill_defaults(steps, seed) }
    }

    /// Token-classification fine-tuning: 5 epochs, batch 16, lr 5e-5.
    pub fn finetune_token_defaults(seed: u64) -> RunConfig {
        RunConfig {
            mode: RunMode::FinetuneToken,
            steps: 0,
            epochs: 5,
            batch_size: 16,
            learning_rate: 5e-5,
            warmup_fraction: 0.06,
            seed,
            eval_every: 50,
            max_len: 32,
            dropout: 0.1,
            grad_clip: 1.0,
            weight_decay: 0.01,
            mask_policy: MaskPolicy::default(),
        }
    }

    /// Sequence-classification fine-tuning: 3 epochs, batch 16, lr 5e-5.
    pub fn finetune_seq_defaults(seed: u64) -> RunConfig {
        RunConfig { mode: RunMode::FinetuneSeq, epochs: 3, ..RunConfig::finetune_token_defaults(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidHyperparameter {
                name: "learning_rate",
                message: "must be positive".to_string(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidHyperparameter {
                name: "batch_size",
                message: "must be at least 1".to_string(),
            });
        }
        if !(0.0..=0.5).contains(&self.warmup_fraction) {
            return Err(Error::InvalidHyperparameter {
                name: "warmup_fraction",
                message: "must lie in [0, 0.5]".to_string(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidHyperparameter {
                name: "dropout",
                message: "must lie in [0, 1)".to_string(),
            });
        }
        Ok(())
    }
}

/// One logged evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub ms_per_step: f64,
}

/// Loss/accuracy trajectory plus final metrics of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub points: Vec<EvalPoint>,
    pub final_metrics: Vec<(String, f64)>,
}

impl TrainReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.final_metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn push_point(&mut self, point: EvalPoint) -> Result<()> {
        if !(point.loss.is_finite() && point.accuracy.is_finite() && point.ms_per_step.is_finite())
        {
            return Err(Error::NonFinite { context: "training report" });
        }
        if let Some(last) = self.points.last() {
            debug_assert!(point.step > last.step, "report steps must increase");
        }
        self.points.push(point);
        Ok(())
    }

    fn finish(&mut self) {
        if let Some(last) = self.points.last() {
            self.final_metrics.push(("loss".to_string(), last.loss));
            self.final_metrics.push(("accuracy".to_string(), last.accuracy));
        }
    }
}

/// Hook for wall-clock timing and checkpointing; the default implementation
/// does nothing (reported step times are then zero).
pub trait TrainObserver {
    /// Monotonic clock in milliseconds, if one is available.
    fn now_ms(&mut self) -> Option<f64> {
        None
    }
    /// Called at every evaluation point with the current state.
    fn on_eval(&mut self, _state: &ModelState, _point: &EvalPoint) {}
}

/// No timing, no checkpoints.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

// ----------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------

/// Decoupled-weight-decay adaptive-moment optimizer (beta 0.9/0.999,
/// epsilon 1e-8) with a linear warmup/decay schedule.
pub struct AdamW {
    base_lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    warmup_steps: usize,
    total_steps: usize,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    step: usize,
    lr_now: f64,
    bias1: f64,
    bias2: f64,
}

impl AdamW {
    pub fn new(config: &RunConfig, total_steps: usize, n_params: usize) -> AdamW {
        let warmup_steps = libm::round(config.warmup_fraction * total_steps as f64) as usize;
        AdamW {
            base_lr: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: config.weight_decay,
            warmup_steps,
            total_steps,
            m: alloc::vec![None; n_params],
            v: alloc::vec![None; n_params],
            step: 0,
            lr_now: 0.0,
            bias1: 1.0,
            bias2: 1.0,
        }
    }

    /// Linear warmup to the base rate, then linear decay to zero; clamped
    /// at zero beyond the schedule horizon.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let rest =
            (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * rest
    }

    /// Prepare the step's learning rate and bias corrections.
    pub fn begin_step(&mut self) {
        self.lr_now = self.lr_at(self.step);
        self.step += 1;
        self.bias1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        self.bias2 = 1.0 - libm::pow(self.beta2, self.step as f64);
    }

    /// Update one parameter tensor in place. `decay` is false for biases
    /// and norm parameters; `scale` is the global gradient-clipping factor.
    pub fn update_one(
        &mut self,
        idx: usize,
        param: &mut Tensor,
        grad: Option<&Tensor>,
        decay: bool,
        scale: f64,
    ) {
        let Some(grad) = grad else { return };
        let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(grad.shape()));
        let wd = if decay { self.weight_decay } else { 0.0 };
        for i in 0..param.numel() {
            let g = grad.data()[i] * scale;
            let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / self.bias1;
            let vhat = vi / self.bias2;
            let p = &mut param.data_mut()[i];
            *p -= self.lr_now * (mhat / (libm::sqrt(vhat) + self.epsilon) + wd * *p);
        }
    }
}

/// Whether a parameter participates in weight decay; norm gains/biases and
/// plain biases do not.
pub fn decays(name: &str) -> bool {
    !(name.contains("norm.") || name.ends_with("_b") || name.ends_with("bias"))
}

/// Global L2 norm over present gradients.
fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    libm::sqrt(sq)
}

fn clip_scale(grads: &[Option<Tensor>], clip: f64) -> f64 {
    if clip <= 0.0 {
        return 1.0;
    }
    let norm = grad_norm(grads);
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

// ----------------------------------------------------------------------
// Batch assembly and evaluation helpers
// ----------------------------------------------------------------------

fn sample_block_batch(
    blocks: &TokenBlocks,
    batch_size: usize,
    rng: &mut Rng,
) -> (Vec<u32>, Vec<u8>) {
    let n = blocks.block_len();
    let mut ids = Vec::with_capacity(batch_size * n);
    for _ in 0..batch_size {
        let b = rng.next_below(blocks.len());
        ids.extend_from_slice(blocks.block(b));
    }
    let mask = alloc::vec![1u8; ids.len()];
    (ids, mask)
}

/// Top-1 accuracy over rows whose label is not the ignore sentinel.
fn label_top1(logits: &Tensor, labels: &[i64]) -> f64 {
    let c = logits.last_dim();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        if label < 0 {
            continue;
        }
        total += 1;
        let slice = &logits.data()[row * c..(row + 1) * c];
        let mut best = 0usize;
        for (i, &x) in slice.iter().enumerate() {
            if x > slice[best] {
                best = i;
            }
        }
        if best as i64 == label {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Deterministic masked-LM evaluation: mean normalized loss and masked
/// top-1 accuracy over `max_batches` batches drawn with a fixed seed.
pub fn evaluate_mlm(
    state: &ModelState,
    blocks: &TokenBlocks,
    vocab: &Vocab,
    policy: &MaskPolicy,
    batch_size: usize,
    seed: u64,
    max_batches: usize,
) -> Result<(f64, f64)> {
    if blocks.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = Rng::new(seed);
    let mut total_loss = 0.0;
    let mut total_acc = 0.0;
    let mut counted = 0usize;
    for i in 0..max_batches {
        let (ids, mask) = sample_block_batch(blocks, batch_size, &mut rng);
        let batch = mask_batch(
            &ids,
            &mask,
            batch_size,
            blocks.block_len(),
            vocab,
            policy,
            seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9),
        )?;
        if batch.masked_count() == 0 {
            continue;
        }
        let out = state.forward_infer(&batch, Capture::LogitsOnly)?;
        let tape = Tape::new();
        let logits = tape.constant(out.mlm_logits.value().clone());
        let head_stream = tape.constant(crate::tensor::Tensor::scalar(0.0));
        let outs = crate::encoder::EncoderOutputs {
            hidden_states: Vec::new(),
            attentions: Vec::new(),
            mlm_logits: logits,
            head_stream,
        };
        let loss = crate::distill::loss_mlm(&tape, &outs, &batch, false);
        total_loss += loss.loss.value().item();
        total_acc += label_top1(out.mlm_logits.value(), &batch.labels);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok((total_loss / counted as f64, total_acc / counted as f64))
}

struct StepTimer {
    last_ms: Option<f64>,
    last_step: usize,
}

impl StepTimer {
    fn new(observer: &mut dyn TrainObserver) -> StepTimer {
        StepTimer { last_ms: observer.now_ms(), last_step: 0 }
    }

    fn ms_per_step(&mut self, observer: &mut dyn TrainObserver, step: usize) -> f64 {
        let now = observer.now_ms();
        let out = match (self.last_ms, now) {
            (Some(prev), Some(cur)) if step > self.last_step => {
                (cur - prev) / (step - self.last_step) as f64
            }
            _ => 0.0,
        };
        self.last_ms = now;
        self.last_step = step;
        out
    }
}

// ----------------------------------------------------------------------
// Runs
// ----------------------------------------------------------------------

/// Continual MLM pretraining: minimizes the hard MLM loss only.
///
/// `heldout`, when given, supplies the accuracy trajectory; otherwise the
/// training batches do.
pub fn run_mlm_pretrain(
    init: ModelState,
    blocks: &TokenBlocks,
    vocab: &Vocab,
    config: &RunConfig,
    heldout: Option<&TokenBlocks>,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelState, TrainReport)> {
    config.validate()?;
    let mut state = init;
    let mut report = TrainReport::default();
    if config.steps == 0 {
        return Ok((state, report));
    }
    if blocks.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut root = Rng::new(config.seed);
    let mut data_rng = root.fork(1);
    let mut mask_rng = root.fork(2);
    let mut dropout_rng = root.fork(3);

    let n_params = state.param_count_leaves();
    let mut opt = AdamW::new(config, config.steps, n_params);
    let mut timer = StepTimer::new(observer);

    for step in 0..config.steps {
        let (ids, mask) = sample_block_batch(blocks, config.batch_size, &mut data_rng);
        let batch = mask_batch(
            &ids,
            &mask,
            config.batch_size,
            blocks.block_len(),
            vocab,
            &config.mask_policy,
            mask_rng.next_u64(),
        )?;
        let tape = Tape::new();
        let params = state.params.map(&mut |t| tape.param(t.clone()));
        let out = forward(
            &tape,
            &params,
            &state.config,
            &batch,
            Capture::LogitsOnly,
            Some(Dropout { rate: config.dropout, rng: &mut dropout_rng }),
        )?;
        let loss = crate::distill::loss_mlm(&tape, &out, &batch, false);
        let loss_value = loss.loss.value().item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { context: "pretraining loss" });
        }
        let batch_acc = label_top1(out.mlm_logits.value(), &batch.labels);
        let mut grads_store = tape.backward(&loss.loss);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n_params);
        params.visit(&mut |_, v| grads.push(grads_store.take(v)));
        let scale = clip_scale(&grads, config.grad_clip);
        opt.begin_step();
        let mut i = 0;
        state.params.visit_mut(&mut |name, t| {
            opt.update_one(i, t, grads[i].as_ref(), decays(&name), scale);
            i += 1;
        });

        let is_eval = (step + 1) % config.eval_every.max(1) == 0 || step + 1 == config.steps;
        if is_eval {
            let accuracy = match heldout {
                Some(h) => {
                    evaluate_mlm(
                        &state,
                        h,
                        vocab,
                        &config.mask_policy,
                        config.batch_size,
                        config.seed ^ 0xe0a1,
                        8,
                    )?
                    .1
                }
                None => batch_acc,
            };
            let point = EvalPoint {
                step: step + 1,
                loss: loss_value,
                accuracy,
                ms_per_step: timer.ms_per_step(observer, step + 1),
            };
            report.push_point(point.clone())?;
            observer.on_eval(&state, &point);
        }
    }
    report.finish();
    Ok((state, report))
}

/// Distillation run: initializes the student from the teacher when the
/// shapes permit (random initialization otherwise) and minimizes the plan's
/// total loss on freshly masked batches.
pub fn run_distillation(
    teacher: &ModelState,
    student_config: &EncoderConfig,
    mut plan: DistillPlan,
    blocks: &TokenBlocks,
    vocab: &Vocab,
    config: &RunConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelState, TrainReport)> {
    config.validate()?;
    plan.validate()?;
    let mut state = match init_student_from_teacher(teacher, student_config, config.seed) {
        Ok(student) => student,
        Err(Error::IncompatiblePlan(_)) => ModelState::init(student_config, config.seed)?,
        Err(other) => return Err(other),
    };
    let mut report = TrainReport::default();
    if config.steps == 0 {
        return Ok((state, report));
    }
    if blocks.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut root = Rng::new(config.seed);
    let mut data_rng = root.fork(1);
    let mut mask_rng = root.fork(2);
    let mut dropout_rng = root.fork(3);

    let n_model = state.param_count_leaves();
    let n_proj = plan.w_h.is_some() as usize + plan.w_e.is_some() as usize;
    let mut opt = AdamW::new(config, config.steps, n_model + n_proj);
    let mut timer = StepTimer::new(observer);

    for step in 0..config.steps {
        let (ids, mask) = sample_block_batch(blocks, config.batch_size, &mut data_rng);
        let batch = mask_batch(
            &ids,
            &mask,
            config.batch_size,
            blocks.block_len(),
            vocab,
            &config.mask_policy,
            mask_rng.next_u64(),
        )?;
        let tape = Tape::new();
        let svars = state.params.map(&mut |t| tape.param(t.clone()));
        let tvars = teacher.params.map(&mut |t| tape.constant(t.clone()));
        let sout = forward(
            &tape,
            &svars,
            &state.config,
            &batch,
            Capture::Full,
            Some(Dropout { rate: config.dropout, rng: &mut dropout_rng }),
        )?;
        // The teacher runs in inference mode: no dropout.
        let tout = forward(&tape, &tvars, &teacher.config, &batch, Capture::Full, None)?;
        let proj = BoundProjections::park(&tape, &plan);
        let teacher_table = tape.constant(teacher.params.embedding.token.clone());
        let loss = plan_loss(
            &tape,
            &plan,
            &proj,
            &sout,
            &tout,
            &svars.embedding.token,
            &teacher_table,
            &batch,
        )?;
        let loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { context: "distillation loss" });
        }
        let batch_acc = label_top1(sout.mlm_logits.value(), &batch.labels);
        let mut grads_store = tape.backward(&loss);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n_model + n_proj);
        svars.visit(&mut |_, v| grads.push(grads_store.take(v)));
        if let Some(w) = &proj.w_h {
            grads.push(grads_store.take(w));
        }
        if let Some(w) = &proj.w_e {
            grads.push(grads_store.take(w));
        }
        let scale = clip_scale(&grads, config.grad_clip);
        opt.begin_step();
        let mut i = 0;
        state.params.visit_mut(&mut |name, t| {
            opt.update_one(i, t, grads[i].as_ref(), decays(&name), scale);
            i += 1;
        });
        if let Some(w) = &mut plan.w_h {
            opt.update_one(i, w, grads[i].as_ref(), true, scale);
            i += 1;
        }
        if let Some(w) = &mut plan.w_e {
            opt.update_one(i, w, grads[i].as_ref(), true, scale);
        }

        let is_eval = (step + 1) % config.eval_every.max(1) == 0 || step + 1 == config.steps;
        if is_eval {
            let point = EvalPoint {
                step: step + 1,
                loss: loss_value,
                accuracy: batch_acc,
                ms_per_step: timer.ms_per_step(observer, step + 1),
            };
            report.push_point(point.clone())?;
            observer.on_eval(&state, &point);
        }
    }
    report.finish();
    Ok((state, report))
}

/// Fine-tuning dataset: pre-tokenized words with per-word labels, or whole
/// sequences with one label.
pub enum FinetuneTask<'a> {
    Token(&'a [TokenClassRecord]),
    Seq(&'a [SeqClassRecord]),
}

/// Sorted label inventory of a fine-tuning dataset.
pub fn task_label_set(task: &FinetuneTask<'_>) -> Vec<String> {
    let mut set = alloc::collections::BTreeSet::new();
    match task {
        FinetuneTask::Token(records) => {
            for r in *records {
                for l in &r.labels {
                    set.insert(l.clone());
                }
            }
        }
        FinetuneTask::Seq(records) => {
            for r in *records {
                set.insert(r.label.clone());
            }
        }
    }
    set.into_iter().collect()
}

struct EncodedExample {
    ids: Vec<u32>,
    attention: Vec<u8>,
    /// Per token (token task) or one entry (sequence task).
    labels: Vec<i64>,
}

fn encode_task(
    task: &FinetuneTask<'_>,
    vocab: &Vocab,
    max_len: usize,
    labels: &[String],
) -> Result<Vec<EncodedExample>> {
    let index_of = |label: &str| -> Result<i64> {
        labels
            .iter()
            .position(|l| l == label)
            .map(|i| i as i64)
            .ok_or_else(|| Error::LabelLengthMismatch { labels: labels.len(), expected: 0 })
    };
    let mut out = Vec::new();
    match task {
        FinetuneTask::Token(records) => {
            for r in *records {
                let enc = encode_words(&r.words, vocab, max_len);
                let word_labels: Vec<i64> =
                    r.labels[..enc.n_words].iter().map(|l| index_of(l)).collect::<Result<_>>()?;
                let token_labels = align_labels(&word_labels, &enc)?;
                out.push(EncodedExample {
                    ids: enc.token_ids,
                    attention: enc.attention_mask,
                    labels: token_labels,
                });
            }
        }
        FinetuneTask::Seq(records) => {
            for r in *records {
                let enc = encode(&r.text, vocab, max_len);
                out.push(EncodedExample {
                    ids: enc.token_ids,
                    attention: enc.attention_mask,
                    labels: alloc::vec![index_of(&r.label)?],
                });
            }
        }
    }
    Ok(out)
}

/// Fine-tune on a labelled dataset: token mode trains the per-token head on
/// sub-word propagated labels (ignore-sentinel excluded); sequence mode
/// trains the CLS head. Cross-entropy objective, epoch accounting.
pub fn run_finetune(
    init: ModelState,
    task: &FinetuneTask<'_>,
    vocab: &Vocab,
    config: &RunConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelState, TrainReport)> {
    config.validate()?;
    let mut state = init;
    let labels = match &state.task_labels {
        Some(existing) => {
            let data_labels = task_label_set(task);
            for l in &data_labels {
                if !existing.contains(l) {
                    return Err(Error::LabelLengthMismatch {
                        labels: existing.len(),
                        expected: data_labels.len(),
                    });
                }
            }
            existing.clone()
        }
        None => task_label_set(task),
    };
    let token_mode = matches!(task, FinetuneTask::Token(_));
    if token_mode && state.params.token_head.is_none() {
        state.attach_token_head(labels.clone(), config.seed ^ 0x7ead);
    }
    if !token_mode && state.params.seq_head.is_none() {
        state.attach_seq_head(labels.clone(), config.seed ^ 0x5e9);
    }

    let examples = encode_task(task, vocab, config.max_len, &labels)?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = config.max_len;
    let mut report = TrainReport::default();
    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    if total_steps == 0 {
        return Ok((state, report));
    }

    let mut root = Rng::new(config.seed);
    let mut order_rng = root.fork(1);
    let mut dropout_rng = root.fork(3);
    let n_params = state.param_count_leaves();
    let mut opt = AdamW::new(config, total_steps, n_params);
    let mut timer = StepTimer::new(observer);

    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let mut ids = Vec::with_capacity(b * n);
            let mut attention = Vec::with_capacity(b * n);
            let mut token_labels = Vec::with_capacity(b * n);
            let mut seq_labels = Vec::with_capacity(b);
            for &ex in chunk {
                let ex = &examples[ex];
                ids.extend_from_slice(&ex.ids);
                attention.extend_from_slice(&ex.attention);
                if token_mode {
                    token_labels.extend_from_slice(&ex.labels);
                } else {
                    seq_labels.push(ex.labels[0]);
                }
            }
            let batch = MaskedBatch::unmasked(&ids, &attention, b, n);
            let tape = Tape::new();
            let params = state.params.map(&mut |t| tape.param(t.clone()));
            let out = forward(
                &tape,
                &params,
                &state.config,
                &batch,
                Capture::Full,
                Some(Dropout { rate: config.dropout, rng: &mut dropout_rng }),
            )?;
            let (logits, used_labels) = if token_mode {
                (task_head_token(&tape, &params, &out)?, &token_labels)
            } else {
                (task_head_seq(&tape, &params, &out)?, &seq_labels)
            };
            let logp = tape.log_softmax_last(&logits);
            let counted = used_labels.iter().filter(|&&l| l >= 0).count().max(1);
            let loss = tape.scale(&tape.nll(&logp, used_labels), 1.0 / counted as f64);
            let loss_value = loss.value().item();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite { context: "fine-tuning loss" });
            }
            let accuracy = label_top1(logits.value(), used_labels);
            let mut grads_store = tape.backward(&loss);
            let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n_params);
            params.visit(&mut |_, v| grads.push(grads_store.take(v)));
            let scale = clip_scale(&grads, config.grad_clip);
            opt.begin_step();
            let mut i = 0;
            state.params.visit_mut(&mut |name, t| {
                opt.update_one(i, t, grads[i].as_ref(), decays(&name), scale);
                i += 1;
            });

            step += 1;
            let is_eval = step % config.eval_every.max(1) == 0 || step == total_steps;
            if is_eval {
                let point = EvalPoint {
                    step,
                    loss: loss_value,
                    accuracy,
                    ms_per_step: timer.ms_per_step(observer, step),
                };
                report.push_point(point.clone())?;
                observer.on_eval(&state, &point);
            }
        }
    }
    report.finish();
    Ok((state, report))
}

/// Word-level label predictions for token-classification records.
///
/// Sub-word logits are collapsed to one label per word by the first
/// sub-word's argmax, or by majority vote when `majority` is set.
pub fn predict_token_labels(
    state: &ModelState,
    records: &[TokenClassRecord],
    vocab: &Vocab,
    max_len: usize,
    majority: bool,
) -> Result<Vec<Vec<String>>> {
    let labels = state
        .task_labels
        .clone()
        .ok_or_else(|| Error::MissingParameter("task_labels".to_string()))?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let enc = encode_words(&r.words, vocab, max_len);
        let batch = MaskedBatch::unmasked(&enc.token_ids, &enc.attention_mask, 1, max_len);
        let tape = Tape::new();
        let params = state.params.map(&mut |t| tape.constant(t.clone()));
        let outs = forward(&tape, &params, &state.config, &batch, Capture::Full, None)?;
        let logits = task_head_token(&tape, &params, &outs)?;
        let c = labels.len();
        let mut token_preds: Vec<usize> = Vec::with_capacity(max_len);
        for row in logits.value().data().chunks(c) {
            let mut best = 0usize;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            token_preds.push(best);
        }
        let word_preds =
            crate::eval::collapse_subwords(&enc.word_index, &token_preds, enc.n_words, majority);
        // Words lost to truncation fall back to the first label.
        let mut sentence: Vec<String> = word_preds.into_iter().map(|i| labels[i].clone()).collect();
        while sentence.len() < r.words.len() {
            sentence.push(labels[0].clone());
        }
        out.push(sentence);
    }
    Ok(out)
}

/// Sequence-label predictions for pair records.
pub fn predict_seq_labels(
    state: &ModelState,
    records: &[SeqClassRecord],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<String>> {
    let labels = state
        .task_labels
        .clone()
        .ok_or_else(|| Error::MissingParameter("task_labels".to_string()))?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let enc = encode(&r.text, vocab, max_len);
        let batch = MaskedBatch::unmasked(&enc.token_ids, &enc.attention_mask, 1, max_len);
        let tape = Tape::new();
        let params = state.params.map(&mut |t| tape.constant(t.clone()));
        let outs = forward(&tape, &params, &state.config, &batch, Capture::Full, None)?;
        let logits = task_head_seq(&tape, &params, &outs)?;
        let row = logits.value().data();
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        out.push(labels[best].clone());
    }
    Ok(out)
}

impl ModelState {
    /// Number of parameter tensors (leaves), used to size optimizer state.
    pub fn param_count_leaves(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, _| n += 1);
        n
    }
}
