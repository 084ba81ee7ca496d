//! Task metrics: entity-level span F1 for token classification, binary and
//! macro-averaged P/R/F for sequence classification, and strict/lenient
//! accuracy plus mean reciprocal rank for ranked answers.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Per-class precision/recall/F1 row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrf {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Metric bundle in one of the two reporting modes.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricReport {
    Classification {
        precision: f64,
        recall: f64,
        f1: f64,
        per_class: Vec<ClassPrf>,
    },
    Ranking {
        strict_acc: f64,
        lenient_acc: f64,
        mrr: f64,
    },
}

impl MetricReport {
    pub fn f1(&self) -> f64 {
        match self {
            MetricReport::Classification { f1, .. } => *f1,
            MetricReport::Ranking { mrr, .. } => *mrr,
        }
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Extract `(start, end_inclusive, type)` spans from a BIO sequence.
///
/// Malformed input (`I-` without a matching head) is repaired by promoting
/// the stray tag to `B-`, so every tagging decodes to some span set.
pub fn bio_spans(labels: &[String]) -> Vec<(usize, usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, label) in labels.iter().enumerate() {
        let (head, class) = match label.split_once('-') {
            Some((prefix, class)) if prefix == "B" || prefix == "I" => (prefix, class),
            _ => ("O", ""),
        };
        let continues = head == "I"
            && open.as_ref().is_some_and(|(_, c)| c == class);
        if continues {
            continue;
        }
        if let Some((start, class)) = open.take() {
            spans.push((start, i - 1, class));
        }
        if head == "B" || head == "I" {
            // A stray I- opens a new span (promotion to B-).
            open = Some((i, class.to_string()));
        }
    }
    if let Some((start, class)) = open {
        spans.push((start, labels.len() - 1, class));
    }
    spans
}

/// Entity-level micro precision/recall/F1 over BIO-tagged sentences with
/// exact span matching.
pub fn entity_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<MetricReport> {
    if gold.len() != pred.len() {
        return Err(Error::LabelLengthMismatch { labels: pred.len(), expected: gold.len() });
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(Error::LabelLengthMismatch { labels: p.len(), expected: g.len() });
        }
        let gs = bio_spans(g);
        let ps = bio_spans(p);
        for span in &ps {
            if gs.contains(span) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        for span in &gs {
            if !ps.contains(span) {
                fn_ += 1;
            }
        }
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    Ok(MetricReport::Classification { precision, recall, f1, per_class: Vec::new() })
}

/// Unweighted macro-averaged P/R/F over the class inventory.
///
/// Predicted classes outside `classes` are appended as their own class with
/// zero gold support, contributing zero F.
pub fn macro_prf(gold: &[String], pred: &[String], classes: &[String]) -> Result<MetricReport> {
    if gold.len() != pred.len() {
        return Err(Error::LabelLengthMismatch { labels: pred.len(), expected: gold.len() });
    }
    let mut inventory: Vec<String> = classes.to_vec();
    for p in pred {
        // A prediction outside the inventory with no gold support becomes
        // its own zero-support class. Classes the caller deliberately
        // restricted away (present in gold) are not resurrected, so a
        // single-class inventory behaves exactly like binary mode.
        if !inventory.contains(p) && !gold.contains(p) {
            inventory.push(p.clone());
        }
    }
    let mut per_class = Vec::with_capacity(inventory.len());
    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    let mut sum_f = 0.0;
    for class in &inventory {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        let mut support = 0;
        for (g, p) in gold.iter().zip(pred) {
            let g_is = g == class;
            let p_is = p == class;
            support += g_is as usize;
            match (g_is, p_is) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let (precision, recall, f1) = prf(tp, fp, fn_);
        sum_p += precision;
        sum_r += recall;
        sum_f += f1;
        per_class.push(ClassPrf { class: class.clone(), precision, recall, f1, support });
    }
    let k = inventory.len().max(1) as f64;
    Ok(MetricReport::Classification {
        precision: sum_p / k,
        recall: sum_r / k,
        f1: sum_f / k,
        per_class,
    })
}

/// Binary-mode P/R/F: the positive class only.
pub fn binary_prf(gold: &[String], pred: &[String], positive: &str) -> Result<MetricReport> {
    if gold.len() != pred.len() {
        return Err(Error::LabelLengthMismatch { labels: pred.len(), expected: gold.len() });
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut support = 0;
    for (g, p) in gold.iter().zip(pred) {
        let g_is = g == positive;
        let p_is = p == positive;
        support += g_is as usize;
        match (g_is, p_is) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    Ok(MetricReport::Classification {
        precision,
        recall,
        f1,
        per_class: alloc::vec![ClassPrf {
            class: positive.to_string(),
            precision,
            recall,
            f1,
            support,
        }],
    })
}

/// Ranked-answer metrics: strict accuracy (gold at rank 1), lenient
/// accuracy (gold anywhere in the list), and mean reciprocal rank of the
/// first gold answer (0 when absent). Empty candidate lists count as
/// misses.
pub fn ranked_qa(gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<MetricReport> {
    if gold.len() != pred.len() {
        return Err(Error::LabelLengthMismatch { labels: pred.len(), expected: gold.len() });
    }
    if gold.is_empty() {
        return Ok(MetricReport::Ranking { strict_acc: 0.0, lenient_acc: 0.0, mrr: 0.0 });
    }
    let mut strict = 0usize;
    let mut lenient = 0usize;
    let mut mrr = 0.0;
    for (answers, ranked) in gold.iter().zip(pred) {
        let first_hit = ranked.iter().position(|candidate| answers.contains(candidate));
        if let Some(idx) = first_hit {
            lenient += 1;
            if idx == 0 {
                strict += 1;
            }
            mrr += 1.0 / (idx + 1) as f64;
        }
    }
    let n = gold.len() as f64;
    Ok(MetricReport::Ranking {
        strict_acc: strict as f64 / n,
        lenient_acc: lenient as f64 / n,
        mrr: mrr / n,
    })
}

/// Collapse per-token predictions to one label index per word.
///
/// `word_index` comes from the encoding (-1 for special tokens). The first
/// sub-word's prediction decides by default; `majority` switches to a
/// majority vote with ties broken towards the earliest sub-word's label.
pub fn collapse_subwords(
    word_index: &[i32],
    token_preds: &[usize],
    n_words: usize,
    majority: bool,
) -> Vec<usize> {
    let mut grouped: Vec<Vec<usize>> = alloc::vec![Vec::new(); n_words];
    for (&wi, &pred) in word_index.iter().zip(token_preds) {
        if wi >= 0 && (wi as usize) < n_words {
            grouped[wi as usize].push(pred);
        }
    }
    grouped
        .into_iter()
        .map(|preds| {
            if preds.is_empty() {
                return 0;
            }
            if !majority {
                return preds[0];
            }
            let mut best = preds[0];
            let mut best_count = 0usize;
            for &candidate in &preds {
                let count = preds.iter().filter(|&&p| p == candidate).count();
                if count > best_count {
                    best_count = count;
                    best = candidate;
                }
            }
            best
        })
        .collect()
}
