use rand::Rng;
use serde::Serialize;

use super::{greedy_continue, lm_logits, Continuation};
use crate::adversarial::{fgm_delta, select_candidates, FgmSign};
use crate::autodiff::{log_softmax_rows, Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::text::vocab::EOS_ID;
use crate::text::{Batch, Targets, TokenMatrix, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Neighbor {
    pub token: String,
    pub id: usize,
    pub distance: f64,
}

/// The `k` non-special tokens whose input embeddings are closest to `word`
/// in Euclidean distance, nearest first. Ties go to the lower id.
pub fn nearest_neighbors(model: &Model, vocab: &Vocabulary, word: &str, k: usize) -> Result<Vec<Neighbor>> {
    let query = vocab
        .get(word)
        .filter(|&id| !vocab.is_special(id))
        .ok_or_else(|| Error::invalid(format!("'{word}' is not in the vocabulary")))?;
    let table = model
        .params
        .get("embed.source")
        .ok_or_else(|| Error::Internal("model has no source embedding".into()))?;
    if table.rows() != vocab.len() {
        return Err(Error::invalid(format!(
            "vocabulary has {} entries but the model embeds {}",
            vocab.len(),
            table.rows()
        )));
    }
    let q = table.row(query);
    let mut scored: Vec<(f64, usize)> = (0..vocab.len())
        .filter(|&id| id != query && !vocab.is_special(id))
        .map(|id| {
            let d2: f64 = table.row(id).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), id)
        })
        .collect();
    if k == 0 || k > scored.len() {
        return Err(Error::invalid(format!("k must be in 1..={}, got {k}", scored.len())));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(distance, id)| Neighbor { token: vocab.token(id).to_string(), id, distance })
        .collect())
}

/// Embedded rows of one sentence and the gradient of its language-model
/// loss (next tokens, closed by `</s>`) with respect to them.
pub fn embedding_gradient(model: &Model, sentence: &[usize]) -> Result<(Tensor, Tensor)> {
    if sentence.is_empty() {
        return Err(Error::invalid("empty sentence"));
    }
    let targets: Vec<usize> = sentence[1..].iter().copied().chain(std::iter::once(EOS_ID)).collect();
    let batch = Batch {
        source: TokenMatrix::from_rows(&[sentence.to_vec()])?,
        targets: Targets::NextToken(TokenMatrix::from_rows(&[targets])?),
    };
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let e0 = model.embed(&mut g, &b, &batch.source)?;
    let embedded = g.value(e0).clone();
    let e = g.leaf(embedded.clone());
    let f = model.forward_embedded(&mut g, &b, &batch, e)?;
    let grads = g.backward(f.loss)?;
    Ok((embedded, grads.tensor(e)))
}

fn perturbation(model: &Model, sentence: &[usize], pos: usize, epsilon: f64, sign: FgmSign) -> Result<Option<Vec<f64>>> {
    let (_, grad) = embedding_gradient(model, sentence)?;
    Ok(fgm_delta(grad.row(pos), epsilon, sign))
}

/// Clean and perturbed greedy completions after one word of a sentence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackReport {
    pub prefix: Vec<usize>,
    pub position: usize,
    pub epsilon: f64,
    pub sign: FgmSign,
    pub clean: Continuation,
    pub perturbed: Continuation,
    /// The loss gradient at the target vanished, so nothing was moved.
    pub degenerate: bool,
}

/// Moves the embedding of `sentence[position]` by the FGM step of the
/// sentence's language-model loss, then greedily completes the sentence
/// after that word. Perplexities are scored by the generating pass.
#[allow(clippy::too_many_arguments)]
pub fn targeted_attack_completion(
    model: &Model,
    vocab: &Vocabulary,
    sentence: &[usize],
    position: usize,
    epsilon: f64,
    sign: FgmSign,
    cap: usize,
) -> Result<AttackReport> {
    if !model.config.is_lm() {
        return Err(Error::invalid("attack probe needs a language model"));
    }
    if position >= sentence.len() {
        return Err(Error::invalid(format!("position {position} is past the sentence end")));
    }
    if !vocab.is_restricted(sentence[position]) {
        return Err(Error::invalid(format!(
            "'{}' is not a perturbable word",
            vocab.token(sentence[position])
        )));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::config(format!("epsilon must be finite and non-negative, got {epsilon}")));
    }
    let prefix = sentence[..=position].to_vec();
    let delta = perturbation(model, sentence, position, epsilon, sign)?;
    let clean = greedy_continue(model, &prefix, cap, None)?;
    let perturbed = match &delta {
        Some(d) => greedy_continue(model, &prefix, cap, Some((position, d)))?,
        None => clean.clone(),
    };
    Ok(AttackReport {
        prefix,
        position,
        epsilon,
        sign,
        clean,
        perturbed,
        degenerate: delta.is_none(),
    })
}

/// Mean over `samples` draws of KL(clean || perturbed) between next-token
/// distributions at a perturbed word. Each draw picks a sentence with at
/// least one perturbable word, then a word within it, both uniformly.
#[allow(clippy::too_many_arguments)]
pub fn robustness_divergence<R: Rng>(
    model: &Model,
    mask: &[bool],
    sentences: &[Vec<usize>],
    epsilon: f64,
    sign: FgmSign,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if !model.config.is_lm() {
        return Err(Error::invalid("robustness probe needs a language model"));
    }
    if samples == 0 {
        return Err(Error::invalid("robustness probe needs at least one sample"));
    }
    let eligible: Vec<&Vec<usize>> = sentences
        .iter()
        .filter(|s| s.iter().any(|&t| mask.get(t).copied().unwrap_or(false)))
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid("no sentence has a perturbable word"));
    }
    let mut total = 0.0;
    for _ in 0..samples {
        let sentence = eligible[rng.gen_range(0..eligible.len())];
        let tokens = TokenMatrix::from_rows(std::slice::from_ref(sentence))?;
        let pos = select_candidates(&tokens, mask, rng)[0]
            .ok_or_else(|| Error::Internal("eligible sentence yielded no candidate".into()))?;
        let Some(delta) = perturbation(model, sentence, pos, epsilon, sign)? else {
            continue;
        };
        let p = log_softmax_rows(&row_of(&lm_logits(model, sentence, None)?, pos)?);
        let q = log_softmax_rows(&row_of(&lm_logits(model, sentence, Some((pos, &delta)))?, pos)?);
        total += p.iter().zip(&q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum::<f64>();
    }
    Ok(total / samples as f64)
}

fn row_of(t: &Tensor, r: usize) -> Result<Tensor> {
    Tensor::matrix(1, t.cols(), t.row(r).to_vec())
}
