//! Corpus BLEU over token id sequences: clipped n-gram precisions (n = 1..4),
//! geometric mean, brevity penalty. No smoothing; a zero precision at any
//! order zeroes the score.

use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in [0, 100].
pub fn corpus_bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::shape(
            "corpus_bleu",
            format!("{} hypotheses vs {} references", hypotheses.len(), references.len()),
        ));
    }
    if references.is_empty() {
        return Err(Error::EmptyInput("corpus_bleu with no sentence pairs".into()));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyInput("corpus_bleu with an empty reference".into()));
    }

    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(hyp, n);
            let rc = ngram_counts(rf, n);
            for (gram, &c) in &hc {
                total[n - 1] += c;
                matched[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_prec_sum = 0.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 || matched[n] == 0 {
            return Ok(0.0);
        }
        log_prec_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_prec_sum / MAX_ORDER as f64).exp())
}
