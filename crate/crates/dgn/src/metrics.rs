//! Evaluation suite: perplexity identity, corpus BLEU with pinned smoothing,
//! ROUGE-L, and corpus statistics.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty reference for hypothesis {0}")]
    EmptyReference(usize),
    #[error("hypothesis/reference count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Scores reported per evaluation run. `rouge_l` is in [0, 1]; multiply by
/// 100 when comparing against published tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub avg_length: f64,
    pub vocab_size: usize,
}

/// `exp` of the mean per-token negative log-likelihood.
pub fn perplexity_from_nll(total_nll: f64, n_tokens: usize) -> Result<f64, MetricError> {
    if n_tokens == 0 {
        return Err(MetricError::EmptyCorpus);
    }
    Ok((total_nll / n_tokens as f64).exp())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in [0, 100]: geometric mean of clipped n-gram
/// precisions for n = 1..4 with brevity penalty. Precisions for n ≥ 2 are
/// smoothed by adding 1 to numerator and denominator.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch(
            hypotheses.len(),
            references.len(),
        ));
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    for (i, r) in references.iter().enumerate() {
        if r.is_empty() {
            return Err(MetricError::EmptyReference(i));
        }
    }

    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let hc = ngram_counts(hyp, n);
            let rc = ngram_counts(reference, n);
            for (gram, &count) in &hc {
                matched[n - 1] += count.min(*rc.get(gram).unwrap_or(&0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (num, den) = if n == 1 {
            (matched[0] as f64, total[0] as f64)
        } else {
            ((matched[n - 1] + 1) as f64, (total[n - 1] + 1) as f64)
        };
        if num == 0.0 || den == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let precision = (log_sum / 4.0).exp();
    let bp = if hyp_len >= ref_len || hyp_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * precision)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { prev + 1 } else { row[j + 1].max(row[j]) };
            prev = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F-score for one pair, recall-weighted with β² = 12.
pub fn rouge_l(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    let beta_sq = 12.0;
    (1.0 + beta_sq) * p * r / (r + beta_sq * p)
}

/// Mean ROUGE-L over aligned pairs.
pub fn rouge_l_corpus(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<f64, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch(
            hypotheses.len(),
            references.len(),
        ));
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let sum: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| rouge_l(h, r))
        .sum();
    Ok(sum / hypotheses.len() as f64)
}

/// Mean token count and number of distinct token types.
pub fn corpus_stats(texts: &[Vec<String>]) -> (f64, usize) {
    if texts.is_empty() {
        return (0.0, 0);
    }
    let total: usize = texts.iter().map(|t| t.len()).sum();
    let types: HashSet<&String> = texts.iter().flatten().collect();
    (total as f64 / texts.len() as f64, types.len())
}
