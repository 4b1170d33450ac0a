use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

/// Corpus-level BLEU against a single reference per hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuScore {
    /// With add-one smoothing of zero-match precisions for n >= 2.
    pub bleu: f64,
    pub unsmoothed: f64,
    /// Clipped matches and candidate n-gram counts for n = 1..=4.
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    counts
}

/// Geometric mean of clipped 1-4-gram precisions times the brevity penalty
/// `min(1, exp(1 - r/c))`, accumulated over the whole corpus.
pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "bleu: {} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let reference = ngram_counts(rf, n);
            for (gram, count) in ngram_counts(h, n) {
                matches[n - 1] += count.min(reference.get(&gram).copied().unwrap_or(0));
            }
            totals[n - 1] += (h.len() + 1).saturating_sub(n);
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = |smooth: bool| -> f64 {
        if c == 0 || matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            if matches[n] == 0 {
                if !smooth {
                    return 0.0;
                }
                log_sum += (1.0 / (totals[n] + 1) as f64).ln();
            } else {
                log_sum += (matches[n] as f64 / totals[n] as f64).ln();
            }
        }
        brevity_penalty * (log_sum / MAX_ORDER as f64).exp()
    };
    Ok(BleuScore {
        bleu: score(true),
        unsmoothed: score(false),
        matches,
        totals,
        brevity_penalty,
        hypothesis_length: c,
        reference_length: r,
    })
}

/// [`bleu`] over whitespace-tokenized lines.
pub fn bleu_lines<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<BleuScore> {
    let split = |xs: &[S]| -> Vec<Vec<String>> {
        xs.iter()
            .map(|l| l.as_ref().split_whitespace().map(String::from).collect())
            .collect()
    };
    bleu(&split(hypotheses), &split(references))
}
