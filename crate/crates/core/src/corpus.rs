//! Corpus handling: MLM mask application, token/sequence classification
//! record parsing, synthetic corpus generation, and fixed-length packing.
//!
//! File IO lives in the companion crate; everything here parses from or
//! renders to in-memory text.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::{encode, Vocab, IGNORE_LABEL};

/// A batch of token ids with MLM corruption applied.
///
/// `labels` holds the original id at every selected position and
/// [`IGNORE_LABEL`] elsewhere, so positions with `mask_indicator == 1` are
/// exactly the positions carrying a real label.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// `[batch * seq_len]` corrupted input ids.
    pub input_ids: Vec<u32>,
    /// Original ids at selected positions, [`IGNORE_LABEL`] elsewhere.
    pub labels: Vec<i64>,
    /// 1 where a position was selected for prediction.
    pub mask_indicator: Vec<u8>,
    /// 1 for real tokens, 0 for padding; never altered by masking.
    pub attention_mask: Vec<u8>,
}

impl MaskedBatch {
    /// Number of selected (predicted) positions.
    pub fn masked_count(&self) -> usize {
        self.mask_indicator.iter().filter(|&&w| w == 1).count()
    }

    /// An uncorrupted batch: no masking, no labels. Used for inference and
    /// fine-tuning forward passes.
    pub fn unmasked(ids: &[u32], attention_mask: &[u8], batch: usize, seq_len: usize) -> MaskedBatch {
        MaskedBatch {
            batch,
            seq_len,
            input_ids: ids.to_vec(),
            labels: alloc::vec![IGNORE_LABEL; ids.len()],
            mask_indicator: alloc::vec![0; ids.len()],
            attention_mask: attention_mask.to_vec(),
        }
    }
}

/// Masking probabilities. The defaults follow the 15% selection rate with
/// an 80% mask-token / 20% random-word replacement split; setting
/// `keep_prob` above zero reproduces the 80/10/10 variant.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MaskPolicy {
    pub select_rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    pub keep_prob: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { select_rate: 0.15, mask_prob: 0.8, random_prob: 0.2, keep_prob: 0.0 }
    }
}

impl MaskPolicy {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.select_rate) {
            return Err(Error::InvalidHyperparameter {
                name: "select_rate",
                message: "must lie in (0, 1), or 0 for no masking".to_string(),
            });
        }
        for (name, v) in [
            ("mask_prob", self.mask_prob),
            ("random_prob", self.random_prob),
            ("keep_prob", self.keep_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidHyperparameter {
                    name,
                    message: "must lie in [0, 1]".to_string(),
                });
            }
        }
        let total = self.mask_prob + self.random_prob + self.keep_prob;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidHyperparameter {
                name: "mask_prob",
                message: format!("mask/random/keep probabilities sum to {total}, expected 1"),
            });
        }
        Ok(())
    }
}

/// Apply MLM corruption to a batch of token ids.
///
/// Each non-special position with attention is selected independently with
/// probability `policy.select_rate`. A selected token is replaced by
/// `[MASK]`, by a uniformly random *different* non-special token, or kept,
/// according to the policy split. Deterministic given the seed; the
/// attention mask and special-token positions are never altered.
pub fn mask_batch(
    ids: &[u32],
    attention_mask: &[u8],
    batch: usize,
    seq_len: usize,
    vocab: &Vocab,
    policy: &MaskPolicy,
    seed: u64,
) -> Result<MaskedBatch> {
    assert_eq!(ids.len(), batch * seq_len, "mask_batch: id count");
    assert_eq!(ids.len(), attention_mask.len(), "mask_batch: mask count");
    policy.validate()?;
    let pool = vocab.maskable_ids();
    if policy.random_prob > 0.0 && pool.len() < 2 {
        return Err(Error::VocabNoReplacement);
    }
    for &id in ids {
        if id as usize >= vocab.size() {
            return Err(Error::TokenIdOutOfRange { id, vocab_size: vocab.size() });
        }
    }
    let mut pool_pos = alloc::collections::BTreeMap::new();
    for (i, &id) in pool.iter().enumerate() {
        pool_pos.insert(id, i);
    }

    let mut rng = Rng::new(seed);
    let mut input_ids = ids.to_vec();
    let mut labels = alloc::vec![IGNORE_LABEL; ids.len()];
    let mut mask_indicator = alloc::vec![0u8; ids.len()];
    for (i, &orig) in ids.iter().enumerate() {
        if attention_mask[i] == 0 || vocab.is_special(orig) {
            continue;
        }
        if rng.next_f64() >= policy.select_rate {
            continue;
        }
        labels[i] = orig as i64;
        mask_indicator[i] = 1;
        let roll = rng.next_f64();
        if roll < policy.mask_prob {
            input_ids[i] = vocab.mask_id();
        } else if roll < policy.mask_prob + policy.random_prob {
            // Uniform over the pool minus the original token: draw from the
            // first len-1 entries and map a hit on the original to the last.
            let j = rng.next_below(pool.len() - 1);
            let candidate = pool[j];
            input_ids[i] = if candidate == orig { pool[pool.len() - 1] } else { candidate };
            debug_assert!(pool_pos.contains_key(&orig));
        }
        // keep branch: input unchanged, label still set
    }
    Ok(MaskedBatch {
        batch,
        seq_len,
        input_ids,
        labels,
        mask_indicator,
        attention_mask: attention_mask.to_vec(),
    })
}

/// One sentence of a token-classification (NER) dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenClassRecord {
    pub words: Vec<String>,
    pub labels: Vec<String>,
}

/// One record of a sequence-classification (RE) dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqClassRecord {
    pub text: String,
    pub label: String,
}

/// Parse CoNLL-style text: one `token<TAB or SPACE>label` pair per line,
/// blank lines separating sentences. A trailing blank line is optional.
pub fn parse_conll(text: &str) -> Result<Vec<TokenClassRecord>> {
    let mut records = Vec::new();
    let mut words = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !words.is_empty() {
                records.push(TokenClassRecord {
                    words: core::mem::take(&mut words),
                    labels: core::mem::take(&mut labels),
                });
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 'token label', found {} fields", fields.len()),
            });
        }
        words.push(fields[0].to_string());
        labels.push(fields[1].to_string());
    }
    if !words.is_empty() {
        records.push(TokenClassRecord { words, labels });
    }
    Ok(records)
}

/// Parse tab-separated `text<TAB>label` records, one per line.
pub fn parse_pairs(text: &str) -> Result<Vec<SeqClassRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((body, label)) = line.rsplit_once('\t') else {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "missing label column ('text<TAB>label')".to_string(),
            });
        };
        let body = body.trim();
        let label = label.trim();
        if body.is_empty() {
            return Err(Error::Parse { line: lineno + 1, message: "empty text field".to_string() });
        }
        if label.is_empty() {
            return Err(Error::Parse { line: lineno + 1, message: "empty label field".to_string() });
        }
        records.push(SeqClassRecord { text: body.to_string(), label: label.to_string() });
    }
    Ok(records)
}

/// Collect the sorted label inventory of a token-classification dataset.
pub fn conll_label_set(records: &[TokenClassRecord]) -> Vec<String> {
    let mut set = alloc::collections::BTreeSet::new();
    for r in records {
        for l in &r.labels {
            set.insert(l.clone());
        }
    }
    set.into_iter().collect()
}

/// Collect the sorted label inventory of a sequence-classification dataset.
pub fn pair_label_set(records: &[SeqClassRecord]) -> Vec<String> {
    let mut set = alloc::collections::BTreeSet::new();
    for r in records {
        set.insert(r.label.clone());
    }
    set.into_iter().collect()
}

// ----------------------------------------------------------------------
// Synthetic corpora
// ----------------------------------------------------------------------

/// An entity type with its surface forms (surfaces may be multi-word).
#[derive(Debug, Clone)]
pub struct EntityType {
    pub name: String,
    pub surfaces: Vec<String>,
}

/// One template token: a literal word or an entity slot.
#[derive(Debug, Clone)]
pub enum TemplateTok {
    Word(String),
    /// Index into [`SynthSpec::entity_types`].
    Slot(usize),
}

/// Grammar parameters for synthetic corpus generation.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub entity_types: Vec<EntityType>,
    pub templates: Vec<Vec<TemplateTok>>,
    pub sentences: usize,
    /// Fraction of sentences held out (taken from the end).
    pub holdout: f64,
}

/// A generated sentence with gold BIO labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub words: Vec<String>,
    pub labels: Vec<String>,
}

impl AnnotatedSentence {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Train/held-out split of generated sentences.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<AnnotatedSentence>,
    pub heldout: Vec<AnnotatedSentence>,
}

impl SynthCorpus {
    pub fn train_text(&self) -> String {
        render_text(&self.train)
    }

    pub fn heldout_text(&self) -> String {
        render_text(&self.heldout)
    }
}

fn render_text(sentences: &[AnnotatedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.text());
        out.push('\n');
    }
    out
}

impl SynthSpec {
    /// Parse templates written as `"treatment with {CHEM} reduces {DIS}"`.
    pub fn from_template_strings(
        entity_types: Vec<EntityType>,
        templates: &[&str],
        sentences: usize,
        holdout: f64,
    ) -> Result<SynthSpec> {
        let mut parsed = Vec::new();
        for raw in templates {
            let mut toks = Vec::new();
            for word in raw.split_whitespace() {
                if let Some(name) = word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                    let idx = entity_types
                        .iter()
                        .position(|t| t.name == name)
                        .ok_or_else(|| Error::InvalidConfig(format!("unknown slot {{{name}}}")))?;
                    toks.push(TemplateTok::Slot(idx));
                } else {
                    toks.push(TemplateTok::Word(word.to_string()));
                }
            }
            parsed.push(toks);
        }
        Ok(SynthSpec { entity_types, templates: parsed, sentences, holdout })
    }

    /// The full BIO label set for this grammar: `O` plus `B-`/`I-` per type
    /// (2k + 1 labels for k entity types).
    pub fn label_set(&self) -> Vec<String> {
        let mut labels = alloc::vec!["O".to_string()];
        for t in &self.entity_types {
            labels.push(format!("B-{}", t.name));
            labels.push(format!("I-{}", t.name));
        }
        labels
    }

    /// Everyday-register grammar used as the "general" pretraining domain.
    pub fn general(sentences: usize, holdout: f64) -> SynthSpec {
        let entity_types = alloc::vec![
            EntityType {
                name: "PER".to_string(),
                surfaces: ["mira", "talen", "joris", "hedda", "ansel", "petra meyer", "old varek"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            },
            EntityType {
                name: "CITY".to_string(),
                surfaces: ["velden", "marrow", "kirova", "south brenne", "tassel bay", "ordu"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            },
            EntityType {
                name: "ANIMAL".to_string(),
                surfaces: ["heron", "marten", "lynx", "grey owl", "river otter", "stoat"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            },
        ];
        let templates = [
            "{PER} walked through {CITY} before sunrise",
            "the market in {CITY} sells fresh bread daily",
            "{PER} saw a {ANIMAL} near the old bridge",
            "a {ANIMAL} lives by the river outside {CITY}",
            "{PER} wrote a long letter to {PER} yesterday",
            "travelers from {CITY} reached {CITY} after nine days",
            "the {ANIMAL} watched {PER} from the tall grass",
            "{PER} keeps a small boat in {CITY} harbor",
        ];
        SynthSpec::from_template_strings(entity_types, &templates, sentences, holdout)
            .expect("builtin grammar is well-formed")
    }

    /// Clinical-register grammar used as the shifted pretraining and NER
    /// fine-tuning domain.
    pub fn biomedical(sentences: usize, holdout: f64) -> SynthSpec {
        let entity_types = alloc::vec![
            EntityType {
                name: "DIS".to_string(),
                surfaces: [
                    "carditis",
                    "neuropathy",
                    "gastritis",
                    "fibrosis",
                    "velkane syndrome",
                    "chronic dermatitis",
                    "osteitis",
                    "renal myopathy",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            },
            EntityType {
                name: "CHEM".to_string(),
                surfaces: [
                    "oxamide",
                    "benzalol",
                    "treduline",
                    "ketophan",
                    "silvarin",
                    "methyl oxamide",
                    "parvexine",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            },
            EntityType {
                name: "GENE".to_string(),
                surfaces: ["varx", "tolm", "redka", "senf two", "apxl", "dorin"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            },
        ];
        let templates = [
            "clinical records describe that treatment with {CHEM} steadily reduces {DIS} in most adult patients",
            "laboratory screens confirmed that mutations near {GENE} are strongly linked to early {DIS} onset",
            "repeated assays show that {CHEM} selectively inhibits {GENE} expression in cultured cell lines",
            "admitted patients with advanced {DIS} received oral {CHEM} twice daily during the trial",
            "published surveys indicate the {GENE} pathway tightly regulates cellular response to {CHEM} exposure",
            "untreated chronic {DIS} usually worsens without sustained {CHEM} therapy over several months",
            "elevated {GENE} activity in blood samples reliably predicts severe {DIS} progression",
            "ongoing clinical trials of {CHEM} for refractory {DIS} continue across seven regional centers",
        ];
        SynthSpec::from_template_strings(entity_types, &templates, sentences, holdout)
            .expect("builtin grammar is well-formed")
    }
}

/// Generate a deterministic synthetic corpus with gold entity annotations.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    if spec.templates.is_empty() {
        return Err(Error::InvalidConfig("empty template set".to_string()));
    }
    if !(0.0..1.0).contains(&spec.holdout) {
        return Err(Error::InvalidHyperparameter {
            name: "holdout",
            message: "must lie in [0, 1)".to_string(),
        });
    }
    let mut rng = Rng::new(seed);
    let mut sentences = Vec::with_capacity(spec.sentences);
    for _ in 0..spec.sentences {
        let template = &spec.templates[rng.next_below(spec.templates.len())];
        let mut words = Vec::new();
        let mut labels = Vec::new();
        for tok in template {
            match tok {
                TemplateTok::Word(w) => {
                    words.push(w.clone());
                    labels.push("O".to_string());
                }
                TemplateTok::Slot(t) => {
                    let ty = &spec.entity_types[*t];
                    let surface = &ty.surfaces[rng.next_below(ty.surfaces.len())];
                    for (i, w) in surface.split_whitespace().enumerate() {
                        words.push(w.to_string());
                        let prefix = if i == 0 { "B" } else { "I" };
                        labels.push(format!("{prefix}-{}", ty.name));
                    }
                }
            }
        }
        sentences.push(AnnotatedSentence { words, labels });
    }
    let holdout_count = libm::round(spec.sentences as f64 * spec.holdout) as usize;
    let split = spec.sentences - holdout_count;
    let heldout = sentences.split_off(split);
    Ok(SynthCorpus { train: sentences, heldout })
}

/// Render annotated sentences in CoNLL form (`word<TAB>label`, blank line
/// between sentences).
pub fn render_conll(sentences: &[AnnotatedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (w, l) in s.words.iter().zip(&s.labels) {
            out.push_str(w);
            out.push('\t');
            out.push_str(l);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

// ----------------------------------------------------------------------
// Packing
// ----------------------------------------------------------------------

/// Fixed-length MLM blocks.
#[derive(Debug, Clone)]
pub struct TokenBlocks {
    data: Vec<u32>,
    block_len: usize,
}

impl TokenBlocks {
    pub fn len(&self) -> usize {
        if self.block_len == 0 { 0 } else { self.data.len() / self.block_len }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn block(&self, i: usize) -> &[u32] {
        &self.data[i * self.block_len..(i + 1) * self.block_len]
    }
}

/// Pack text into fixed-length blocks of exactly `block_len` tokens:
/// sentences are tokenized, concatenated with `[SEP]` separators, chunked,
/// and each chunk prefixed with `[CLS]`. A trailing partial chunk is
/// dropped so every block is full (no padding anywhere).
pub fn pack_corpus(text: &str, vocab: &Vocab, block_len: usize) -> TokenBlocks {
    assert!(block_len >= 4, "block_len too small to be useful");
    let mut stream: Vec<u32> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        // encode() bounds content; feed it a generous budget then strip the
        // frame tokens so the stream carries content + SEP only.
        let enc = encode(line, vocab, line.len() + 2);
        for &id in &enc.token_ids {
            if id != vocab.cls_id() && id != vocab.pad_id() {
                stream.push(id);
            }
        }
    }
    let payload = block_len - 1;
    let full_blocks = stream.len() / payload;
    let mut data = Vec::with_capacity(full_blocks * block_len);
    for b in 0..full_blocks {
        data.push(vocab.cls_id());
        data.extend_from_slice(&stream[b * payload..(b + 1) * payload]);
    }
    TokenBlocks { data, block_len }
}
