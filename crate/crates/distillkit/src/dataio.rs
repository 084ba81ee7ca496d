//! File-backed data access: vocabularies, corpora, and labelled datasets.

use std::fs;
use std::path::Path;

use distillkit_core::corpus::{
    parse_conll, parse_pairs, render_conll, SeqClassRecord, SynthCorpus, TokenClassRecord,
};
use distillkit_core::tokenizer::Vocab;

use crate::{IoError, Result};

/// Serialize a vocabulary: one token per line, line number = id, `\n`
/// terminated.
pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut text = String::new();
    for token in vocab.tokens() {
        text.push_str(token);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| IoError::file(path.display().to_string(), e))
}

/// Load a vocabulary file. Case handling is inferred: a vocabulary with no
/// uppercase token is treated as uncased; `force_cased` overrides.
pub fn load_vocab(path: &Path, force_cased: Option<bool>) -> Result<Vocab> {
    let text =
        fs::read_to_string(path).map_err(|e| IoError::file(path.display().to_string(), e))?;
    let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    let cased = force_cased
        .unwrap_or_else(|| tokens.iter().any(|t| t.chars().any(|c| c.is_uppercase())));
    Vocab::from_tokens(tokens, cased)
        .map_err(|e| IoError::format(path.display().to_string(), e.to_string()))
}

/// Read a plain-text corpus.
pub fn load_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| IoError::file(path.display().to_string(), e))
}

/// Load a CoNLL token-classification file (`token<TAB or SPACE>label`,
/// blank-line sentence separators).
pub fn load_conll(path: &Path) -> Result<Vec<TokenClassRecord>> {
    let text = load_text(path)?;
    parse_conll(&text).map_err(|e| IoError::format(path.display().to_string(), e.to_string()))
}

/// Load a `text<TAB>label` sequence-classification file.
pub fn load_pairs(path: &Path) -> Result<Vec<SeqClassRecord>> {
    let text = load_text(path)?;
    parse_pairs(&text).map_err(|e| IoError::format(path.display().to_string(), e.to_string()))
}

/// Write a generated corpus: plain text plus CoNLL annotations for both
/// splits (held-out files only when the split is nonempty).
pub fn save_synth_corpus(dir: &Path, corpus: &SynthCorpus) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| IoError::file(dir.display().to_string(), e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| IoError::file(path.display().to_string(), e))?;
        written.push(path);
        Ok(())
    };
    emit("corpus.txt", corpus.train_text())?;
    emit("corpus.conll", render_conll(&corpus.train))?;
    if !corpus.heldout.is_empty() {
        emit("heldout.txt", corpus.heldout_text())?;
        emit("heldout.conll", render_conll(&corpus.heldout))?;
    }
    Ok(written)
}

/// Gold answers and ranked predictions for the ranking metrics, parsed from
/// a TSV with pipe-separated cells: `gold1|gold2<TAB>cand1|cand2|cand3`.
pub fn load_qa_rankings(path: &Path) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let text = load_text(path)?;
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((g, p)) = line.split_once('\t') else {
            return Err(IoError::format(
                path.display().to_string(),
                format!("line {}: expected gold<TAB>ranked", lineno + 1),
            ));
        };
        let split = |s: &str| -> Vec<String> {
            s.split('|').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
        };
        let answers = split(g);
        if answers.is_empty() {
            return Err(IoError::format(
                path.display().to_string(),
                format!("line {}: empty gold answer set", lineno + 1),
            ));
        }
        gold.push(answers);
        pred.push(split(p));
    }
    Ok((gold, pred))
}
