//! Corpus BLEU-4 and ROUGE-L over multi-reference caption sets.
//!
//! BLEU: modified n-gram precision for `n = 1..4`, clipped by the maximum
//! count of each n-gram in any single reference, pooled over the corpus,
//! combined by geometric mean. A zero (or undefined) precision is replaced
//! by `1e-9`. Brevity penalty `exp(1 - r / c)` when `c <= r`, where `c` is
//! the total candidate length and `r` sums, per item, the reference length
//! closest to the candidate length (ties to the shorter one).
//!
//! ROUGE-L: LCS precision `P = lcs / |cand|`, recall `R = lcs / |ref|`,
//! `F = (1 + b2) P R / (R + b2 P)` with `b2 = 1.2`, maximised over the
//! references of an item. The corpus score is the mean over items.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA_SQUARED: f64 = 1.2;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus<C, R>(candidates: &[C], references: &[Vec<R>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::Data(format!("reference set {i} is empty")));
    }
    Ok(())
}

/// Corpus BLEU-4 in `[0, 1]`.
pub fn bleu4<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty reference set");
        for n in 1..=4 {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cand_counts {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let log_mean = (0..4)
        .map(|i| {
            let p = if matched[i] == 0 {
                BLEU_EPSILON
            } else {
                matched[i] as f64 / total[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_mean.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-measure, maximised over `references`.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Data("empty reference set".into()));
    }
    let mut best = 0.0f64;
    for r in references {
        let lcs = lcs_len(candidate, r);
        if lcs == 0 {
            continue;
        }
        let p = lcs as f64 / candidate.len() as f64;
        let rec = lcs as f64 / r.len() as f64;
        let f = (1.0 + ROUGE_BETA_SQUARED) * p * rec / (rec + ROUGE_BETA_SQUARED * p);
        best = best.max(f);
    }
    Ok(best)
}

/// Mean sentence ROUGE-L over the corpus.
pub fn corpus_rouge_l<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
) -> Result<f64> {
    check_corpus(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge_l(c, r)?;
    }
    Ok(sum / candidates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub n_items: usize,
}

pub fn evaluate<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
) -> Result<EvalReport> {
    Ok(EvalReport {
        bleu4: bleu4(candidates, references)?,
        rouge_l: corpus_rouge_l(candidates, references)?,
        n_items: candidates.len(),
    })
}
