//! WordPiece-style sub-word tokenization.
//!
//! Vocabulary induction is frequency-ranked: all single characters seen in
//! the corpus become pieces (word-initial and `##`-continuation forms), then
//! the highest-frequency multi-character substrings fill the remaining slots
//! up to the target size. Encoding is greedy longest-match-first; a word
//! that cannot be tokenized becomes a single `[UNK]`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// The five special tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
/// Continuation marker for non-initial sub-word pieces.
pub const CONTINUATION: &str = "##";
/// Label value excluded from losses and metrics (special tokens, unmasked
/// positions).
pub const IGNORE_LABEL: i64 = -100;

/// Longest substring considered during vocabulary induction.
const MAX_PIECE_CHARS: usize = 16;

/// Sub-word vocabulary with fixed special ids `[PAD]=0, [UNK]=1, [CLS]=2,
/// [SEP]=3, [MASK]=4`.
#[derive(Debug, Clone)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, u32>,
    cased: bool,
}

impl Vocab {
    /// Induce a vocabulary of `target_size` pieces from a corpus.
    ///
    /// Deterministic: candidates are ranked by frequency with lexicographic
    /// tie-breaks. Fails on an empty corpus or when `target_size` cannot hold
    /// the specials plus every single-character piece.
    pub fn build(corpus: &str, target_size: usize, cased: bool) -> Result<Vocab> {
        let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus.lines() {
            for word in split_words(line, cased) {
                *word_counts.entry(word).or_insert(0) += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let mut alphabet: BTreeSet<String> = BTreeSet::new();
        for word in word_counts.keys() {
            for (i, ch) in word.chars().enumerate() {
                if i == 0 {
                    alphabet.insert(ch.to_string());
                } else {
                    let mut piece = String::from(CONTINUATION);
                    piece.push(ch);
                    alphabet.insert(piece);
                }
            }
        }
        let needed = SPECIAL_TOKENS.len() + alphabet.len();
        if target_size < needed {
            return Err(Error::VocabTooSmall { requested: target_size, needed });
        }

        // Candidate pieces: every substring of every word, counted with the
        // word's frequency. Single characters are already in the alphabet.
        let mut piece_counts: BTreeMap<String, u64> = BTreeMap::new();
        for (word, &count) in &word_counts {
            let chars: Vec<char> = word.chars().collect();
            for start in 0..chars.len() {
                let max_end = (start + MAX_PIECE_CHARS).min(chars.len());
                for end in (start + 2)..=max_end {
                    let mut piece = String::new();
                    if start > 0 {
                        piece.push_str(CONTINUATION);
                    }
                    piece.extend(&chars[start..end]);
                    *piece_counts.entry(piece).or_insert(0) += count;
                }
            }
        }
        // Whole words outrank fragments: every occurrence of a word also
        // counts all of its substrings, so ranking raw counts alone floods
        // the vocabulary with one word's fragment family before the next
        // word gets a slot. Within each class: frequency, then longer
        // pieces, then lexicographic for determinism.
        let mut ranked: Vec<(String, u64)> = piece_counts.into_iter().collect();
        let content_len = |piece: &str| piece.trim_start_matches(CONTINUATION).chars().count();
        let is_word = |piece: &str| !piece.starts_with(CONTINUATION) && word_counts.contains_key(piece);
        ranked.sort_by(|a, b| {
            is_word(&b.0)
                .cmp(&is_word(&a.0))
                .then_with(|| b.1.cmp(&a.1))
                .then_with(|| content_len(&b.0).cmp(&content_len(&a.0)))
                .then_with(|| a.0.cmp(&b.0))
        });

        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(alphabet.into_iter());
        for (piece, _) in ranked {
            if id_to_token.len() >= target_size {
                break;
            }
            id_to_token.push(piece);
        }
        Vocab::from_tokens(id_to_token, cased)
    }

    /// Assemble a vocabulary from an ordered token list (line number = id in
    /// the serialized form). All five specials must be present and distinct.
    pub fn from_tokens(id_to_token: Vec<String>, cased: bool) -> Result<Vocab> {
        let mut token_to_id = BTreeMap::new();
        for (id, token) in id_to_token.iter().enumerate() {
            if token_to_id.insert(token.clone(), id as u32).is_some() {
                return Err(Error::InvalidConfig(alloc::format!(
                    "duplicate vocabulary token {token:?}"
                )));
            }
        }
        for special in SPECIAL_TOKENS {
            if !token_to_id.contains_key(special) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "vocabulary missing special token {special}"
                )));
            }
        }
        Ok(Vocab { id_to_token, token_to_id, cased })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn cased(&self) -> bool {
        self.cased
    }

    /// Ordered token list; serializing one token per line reproduces the
    /// vocabulary exactly.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        self.token_to_id[SPECIAL_TOKENS[0]]
    }

    pub fn unk_id(&self) -> u32 {
        self.token_to_id[SPECIAL_TOKENS[1]]
    }

    pub fn cls_id(&self) -> u32 {
        self.token_to_id[SPECIAL_TOKENS[2]]
    }

    pub fn sep_id(&self) -> u32 {
        self.token_to_id[SPECIAL_TOKENS[3]]
    }

    pub fn mask_id(&self) -> u32 {
        self.token_to_id[SPECIAL_TOKENS[4]]
    }

    /// Whether `id` is one of the five special tokens.
    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad_id()
            || id == self.unk_id()
            || id == self.cls_id()
            || id == self.sep_id()
            || id == self.mask_id()
    }

    /// Ids eligible for masking and random replacement.
    pub fn maskable_ids(&self) -> Vec<u32> {
        (0..self.size() as u32).filter(|&id| !self.is_special(id)).collect()
    }

    /// Greedy longest-match pieces for one word, or `None` if the word
    /// cannot be covered (the caller substitutes `[UNK]`).
    fn word_pieces(&self, word: &str) -> Option<Vec<u32>> {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut matched = None;
            for end in (start + 1..=chars.len()).rev() {
                let mut piece = String::new();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.extend(&chars[start..end]);
                if let Some(id) = self.id(&piece) {
                    matched = Some((id, end));
                    break;
                }
            }
            let (id, end) = matched?;
            pieces.push(id);
            start = end;
        }
        Some(pieces)
    }

    /// Reassemble a word from its piece ids, dropping continuation markers.
    pub fn decode_pieces(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if let Some(token) = self.token(id) {
                if self.is_special(id) {
                    continue;
                }
                out.push_str(token.strip_prefix(CONTINUATION).unwrap_or(token));
            }
        }
        out
    }
}

/// Tokenized text aligned back to its source words.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// `[CLS] pieces... [SEP] [PAD]...`, exactly `max_len` long.
    pub token_ids: Vec<u32>,
    /// Source-word ordinal per token; `-1` for CLS/SEP/PAD.
    pub word_index: Vec<i32>,
    /// 1 for real tokens (including CLS/SEP), 0 for padding.
    pub attention_mask: Vec<u8>,
    /// Number of source words with at least one surviving piece.
    pub n_words: usize,
}

/// Greedy WordPiece encoding: CLS prepended, SEP appended, hard truncation
/// at `max_len - 1` before the SEP, padded to `max_len`.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Encoding {
    let words = split_words(text, vocab.cased());
    encode_words(&words, vocab, max_len)
}

/// Encode pre-tokenized words (one unit each, no re-splitting), as required
/// when labels are aligned to dataset tokens. Case is still folded for
/// uncased vocabularies.
pub fn encode_words(words: &[String], vocab: &Vocab, max_len: usize) -> Encoding {
    assert!(max_len >= 2, "max_len must fit CLS and SEP");
    let words: Vec<String> = if vocab.cased() {
        words.to_vec()
    } else {
        words.iter().map(|w| w.to_lowercase()).collect()
    };
    let mut token_ids = alloc::vec![vocab.cls_id()];
    let mut word_index = alloc::vec![-1i32];
    let content_cap = max_len - 1; // CLS plus content; SEP appended after
    let mut n_words = 0;
    'outer: for (wi, word) in words.iter().enumerate() {
        let pieces = vocab.word_pieces(word).unwrap_or_else(|| alloc::vec![vocab.unk_id()]);
        let mut placed = false;
        for id in pieces {
            if token_ids.len() >= content_cap {
                if placed {
                    n_words += 1;
                }
                break 'outer;
            }
            token_ids.push(id);
            word_index.push(wi as i32);
            placed = true;
        }
        if placed {
            n_words += 1;
        }
    }
    token_ids.truncate(content_cap);
    word_index.truncate(content_cap);
    token_ids.push(vocab.sep_id());
    word_index.push(-1);
    let real = token_ids.len();
    let mut attention_mask = alloc::vec![1u8; real];
    while token_ids.len() < max_len {
        token_ids.push(vocab.pad_id());
        word_index.push(-1);
        attention_mask.push(0);
    }
    Encoding { token_ids, word_index, attention_mask, n_words }
}

/// Propagate word labels to sub-words: every piece of a word carries the
/// word's label; CLS/SEP/PAD carry [`IGNORE_LABEL`].
pub fn align_labels(word_labels: &[i64], enc: &Encoding) -> Result<Vec<i64>> {
    if word_labels.len() != enc.n_words {
        return Err(Error::LabelLengthMismatch {
            labels: word_labels.len(),
            expected: enc.n_words,
        });
    }
    Ok(enc
        .word_index
        .iter()
        .map(|&wi| if wi < 0 { IGNORE_LABEL } else { word_labels[wi as usize] })
        .collect())
}

/// Whitespace split with punctuation separated into its own words; folds
/// case when `cased` is false.
pub fn split_words(text: &str, cased: bool) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        let ch = if cased {
            ch
        } else {
            // Case folding only; no accent stripping.
            ch.to_lowercase().next().unwrap_or(ch)
        };
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(core::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                words.push(core::mem::take(&mut current));
            }
            words.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}
