//! Negative sampling over batch representations and the contrastive loss
//! between clean and perturbed representations.
//!
//! For an anchor `h`, its perturbed counterpart `h'` and negatives `h_n`:
//!
//! ```text
//! loss = -log( exp(cos(h, h') / tau) / sum_n exp(cos(h, h_n) / tau) )
//! ```
//!
//! By default the denominator holds only the negatives, so the loss is
//! unbounded below; `include_positive` adds the positive term (InfoNCE).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::ops::logsumexp;
use crate::autodiff::cosine;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub use crate::autodiff::cosine as cosine_similarity;

/// Negatives drawn for one anchor row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSet {
    pub anchor: usize,
    pub negatives: Vec<usize>,
    /// Fewer than the requested number of positions were available.
    pub short: bool,
}

/// Samples `n` rows without replacement from the unpadded positions of the
/// flat `pad` grid, excluding each anchor's own row. Anchors are served in
/// order.
pub fn sample_negatives<R: Rng>(pad: &[bool], anchors: &[usize], n: usize, rng: &mut R) -> Result<Vec<NegativeSet>> {
    if n == 0 {
        return Err(Error::invalid("sample_negatives: n must be at least 1"));
    }
    anchors
        .iter()
        .map(|&anchor| {
            if anchor >= pad.len() || pad[anchor] {
                return Err(Error::invalid(format!("sample_negatives: anchor row {anchor} is padded or out of range")));
            }
            let pool: Vec<usize> = (0..pad.len()).filter(|&i| i != anchor && !pad[i]).collect();
            if pool.is_empty() {
                return Err(Error::invalid("sample_negatives: no unpadded position besides the anchor"));
            }
            let short = pool.len() < n;
            let negatives = if short {
                pool
            } else {
                pool.choose_multiple(rng, n).copied().collect()
            };
            Ok(NegativeSet { anchor, negatives, short })
        })
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {tau}")))
    }
}

/// Per-anchor loss on plain vectors.
pub fn contrastive_loss_values(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
    include_positive: bool,
) -> Result<f64> {
    check_tau(tau)?;
    if negatives.is_empty() {
        return Err(Error::invalid("contrastive loss needs at least one negative"));
    }
    let pos = cosine(anchor, positive) / tau;
    let mut logits: Vec<f64> = negatives.iter().map(|n| cosine(anchor, n) / tau).collect();
    if include_positive {
        logits.push(pos);
    }
    Ok(logsumexp(&logits) - pos)
}

/// Sum of per-anchor losses inside `g`. Anchor and negative rows index
/// `clean`; positives are the same rows of `perturbed`.
pub fn contrastive_loss(
    g: &mut Graph,
    clean: Var,
    perturbed: Var,
    sets: &[NegativeSet],
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    check_tau(tau)?;
    if sets.is_empty() {
        return Err(Error::invalid("contrastive loss needs at least one anchor"));
    }
    let rows = g.value(clean).rows();
    if g.value(perturbed).shape() != g.value(clean).shape() {
        return Err(Error::invalid("clean and perturbed representations differ in shape"));
    }
    // Pair layout per anchor: (h, h') then (h, h_n) for every negative.
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut segments = Vec::with_capacity(sets.len());
    let mut positives = Vec::with_capacity(sets.len());
    for set in sets {
        if set.negatives.is_empty() {
            return Err(Error::invalid("contrastive loss needs at least one negative per anchor"));
        }
        let start = left.len();
        positives.push(start);
        left.push(set.anchor);
        right.push(rows + set.anchor);
        for &n in &set.negatives {
            left.push(set.anchor);
            right.push(n);
        }
        segments.push(if include_positive {
            (start, 1 + set.negatives.len())
        } else {
            (start + 1, set.negatives.len())
        });
    }
    let stacked = g.concat_rows(clean, perturbed)?;
    let a = g.gather_rows(stacked, &left)?;
    let b = g.gather_rows(stacked, &right)?;
    let sims = g.cosine_rows(a, b)?;
    let logits = g.scale(sims, 1.0 / tau);
    let denominators = g.segment_logsumexp(logits, &segments)?;
    let numerators = g.gather_elems(logits, &positives)?;
    let den = g.sum(denominators);
    let num = g.sum(numerators);
    let neg_num = g.scale(num, -1.0);
    g.add(den, neg_num)
}
