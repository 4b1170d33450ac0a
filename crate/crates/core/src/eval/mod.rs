//! Perplexity, BLEU, greedy decoding and the embedding-space probes.

mod bleu;
mod probes;
mod report;

pub use bleu::{bleu, bleu_lines, BleuScore};
pub use probes::{
    embedding_gradient, nearest_neighbors, robustness_divergence, targeted_attack_completion, AttackReport, Neighbor,
};
pub use report::ProbeReport;

use crate::autodiff::{log_softmax_rows, Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::text::vocab::{BOS_ID, EOS_ID, PAD_ID};
use crate::text::{make_lm_eval_batches, Batch, TokenMatrix};

/// Summed negative log-likelihood and number of scored tokens.
pub fn total_nll(model: &Model, batches: &[Batch]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for batch in batches {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let f = model.forward(&mut g, &b, batch)?;
        let n = match &batch.targets {
            crate::text::Targets::NextToken(t) => t.valid_count(),
            crate::text::Targets::Translation { decoder_output, .. } => decoder_output.valid_count(),
        };
        total += g.value(f.loss).item() * n as f64;
        count += n;
    }
    Ok((total, count))
}

/// `exp` of the mean token negative log-likelihood.
pub fn perplexity(model: &Model, batches: &[Batch]) -> Result<f64> {
    let (total, count) = total_nll(model, batches)?;
    if count == 0 {
        return Err(Error::invalid("perplexity: no tokens to score"));
    }
    Ok((total / count as f64).exp())
}

/// Perplexity of every predictable token of a stream, in windows of `seq_len`.
pub fn stream_perplexity(model: &Model, stream: &[usize], seq_len: usize, batch_size: usize) -> Result<f64> {
    if stream.len() < 2 {
        return Err(Error::invalid("perplexity: corpus is empty"));
    }
    perplexity(model, &make_lm_eval_batches(stream, batch_size, seq_len)?)
}

/// Generated tokens with their log-probabilities under the generating pass.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Continuation {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

impl Continuation {
    pub fn mean_nll(&self) -> f64 {
        if self.log_probs.is_empty() {
            return 0.0;
        }
        -self.log_probs.iter().sum::<f64>() / self.log_probs.len() as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prefix`, stopping after `</s>` or `cap` tokens.
/// `shift` adds a constant vector to the embedded row at a given position.
pub fn greedy_continue(model: &Model, prefix: &[usize], cap: usize, shift: Option<(usize, &[f64])>) -> Result<Continuation> {
    if prefix.is_empty() {
        return Err(Error::invalid("greedy_continue: empty prefix"));
    }
    if let Some((pos, v)) = shift {
        if pos >= prefix.len() || v.len() != model.config.d_model {
            return Err(Error::invalid("greedy_continue: shift outside the prefix"));
        }
    }
    let mut seq = prefix.to_vec();
    let mut out = Continuation { tokens: Vec::new(), log_probs: Vec::new() };
    for _ in 0..cap {
        let logits = lm_logits(model, &seq, shift)?;
        let last = Tensor::matrix(1, logits.cols(), logits.row(seq.len() - 1).to_vec())?;
        let lp = log_softmax_rows(&last);
        let next = argmax(&lp);
        out.tokens.push(next);
        out.log_probs.push(lp[next]);
        if next == EOS_ID {
            break;
        }
        seq.push(next);
    }
    Ok(out)
}

/// Output logits `[len, V]` of a language model over one sequence, with an
/// optional constant added to one embedded row.
pub(crate) fn lm_logits(model: &Model, seq: &[usize], shift: Option<(usize, &[f64])>) -> Result<Tensor> {
    let d = model.config.d_model;
    let tokens = TokenMatrix::from_rows(&[seq.to_vec()])?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let mut e = model.embed(&mut g, &b, &tokens)?;
    if let Some((pos, v)) = shift {
        let mut delta = vec![0.0; seq.len() * d];
        delta[pos * d..(pos + 1) * d].copy_from_slice(v);
        let c = g.constant(Tensor::matrix(seq.len(), d, delta)?);
        e = g.add(e, c)?;
    }
    let (_, logits) = model.lm_from_embedded(&mut g, &b, &tokens, e)?;
    Ok(g.value(logits).clone())
}

/// Batched greedy translation. Sources are given without `</s>`; outputs
/// stop before `</s>` or after `max_len` tokens.
pub fn translate_greedy(model: &Model, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let src: Vec<Vec<usize>> = sources
        .iter()
        .map(|s| s.iter().copied().chain(std::iter::once(EOS_ID)).collect())
        .collect();
    let source = TokenMatrix::from_rows(&src)?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let e = model.embed(&mut g, &b, &source)?;
    let memory = model.encode_from_embedded(&mut g, &b, &source, e)?;
    let rows = sources.len();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS_ID]; rows];
    let mut done = vec![false; rows];
    for _ in 0..max_len {
        let dec = TokenMatrix::from_rows(&prefixes)?;
        let (_, logits) = model.decode(&mut g, &b, &source, memory, &dec)?;
        let lv = g.value(logits);
        let t = dec.cols - 1;
        for r in 0..rows {
            let next = if done[r] { PAD_ID } else { argmax(lv.row(r * dec.cols + t)) };
            if next == EOS_ID {
                done[r] = true;
            }
            prefixes[r].push(next);
        }
        if done.iter().all(|&x| x) {
            break;
        }
    }
    Ok(prefixes
        .into_iter()
        .map(|p| p[1..].iter().copied().take_while(|&t| t != EOS_ID && t != PAD_ID).collect())
        .collect())
}
