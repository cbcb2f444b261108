//! Exact match, corpus BLEU-4 and unlabeled attachment score.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::corpus::EncodedExample;
use crate::error::{Error, Result};
use crate::graph::{extract_heads, Head};
use crate::model::Model;

/// Fraction of positions whose predicted head equals the gold head.
pub fn uas(pred: &[Head], gold: &[Head]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "uas over {} predicted and {} gold heads",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Ok(1.0);
    }
    Ok(matching_heads(pred, gold) as f64 / gold.len() as f64)
}

fn matching_heads(pred: &[Head], gold: &[Head]) -> usize {
    pred.iter().zip(gold).filter(|(p, g)| p == g).count()
}

fn ngram_counts<T: Ord + Clone>(s: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with uniform 1..4-gram weights and brevity penalty.
/// With `smooth`, add-one is applied to the 2..4-gram precisions.
pub fn bleu4<T: Ord + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], smooth: bool) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Invalid("bleu over an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!(
            "bleu over {} hypotheses and {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, &k) in &hc {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let (m, t) = if smooth && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_p += libm::log(m as f64 / t as f64) / 4.0;
    }
    let bp = if c >= r { 1.0 } else { libm::exp(1.0 - r as f64 / c as f64) };
    Ok(bp * libm::exp(log_p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRecord {
    pub index: usize,
    pub tokens: Vec<usize>,
    pub reference: Vec<usize>,
    pub heads: Vec<Head>,
    pub gold_heads: Vec<Head>,
    /// Mean per-token log-probability of the output (0 in forced mode).
    pub score: f64,
    pub exact: bool,
    /// Gold heads recovered; 0 when the output length differs from the
    /// reference.
    pub correct_heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub exact_match: f64,
    pub bleu4: f64,
    /// Token-level over the whole corpus.
    pub uas: f64,
    pub forced: bool,
    pub beam: usize,
    pub sentences: Vec<SentenceRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub beam: usize,
    pub max_len: usize,
    /// Feed gold tokens and score only the emitted graphs.
    pub forced: bool,
    pub smooth_bleu: bool,
}

pub fn evaluate(model: &Model, data: &[EncodedExample], opts: EvalOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid("evaluation corpus is empty".into()));
    }
    let mut sentences = Vec::with_capacity(data.len());
    for (index, ex) in data.iter().enumerate() {
        let (tokens, heads, score) = if opts.forced {
            let g = model.forced_graph(&ex.src, &ex.src_heads, &ex.tgt)?;
            (ex.tgt.clone(), extract_heads(&g, false), 0.0)
        } else {
            let h = model.beam(&ex.src, &ex.src_heads, opts.beam, opts.max_len)?;
            let heads = h.graph().heads;
            let score = h.score();
            (h.tokens, heads, score)
        };
        let correct_heads = if heads.len() == ex.tgt_heads.len() {
            matching_heads(&heads, &ex.tgt_heads)
        } else {
            0
        };
        sentences.push(SentenceRecord {
            index,
            exact: tokens == ex.tgt,
            tokens,
            reference: ex.tgt.clone(),
            heads,
            gold_heads: ex.tgt_heads.clone(),
            score,
            correct_heads,
        });
    }
    let n = sentences.len() as f64;
    let exact_match = sentences.iter().filter(|s| s.exact).count() as f64 / n;
    let gold_tokens: usize = sentences.iter().map(|s| s.gold_heads.len()).sum();
    let correct: usize = sentences.iter().map(|s| s.correct_heads).sum();
    let hyps: Vec<Vec<usize>> = sentences.iter().map(|s| s.tokens.clone()).collect();
    let refs: Vec<Vec<usize>> = sentences.iter().map(|s| s.reference.clone()).collect();
    Ok(EvalReport {
        exact_match,
        bleu4: bleu4(&hyps, &refs, opts.smooth_bleu)?,
        uas: if gold_tokens == 0 { 1.0 } else { correct as f64 / gold_tokens as f64 },
        forced: opts.forced,
        beam: opts.beam,
        sentences,
    })
}
