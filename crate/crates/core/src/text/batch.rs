use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};

/// Row-major `rows x cols` token ids with a padding flag per entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<usize>,
    /// `true` marks a padded position.
    pub pad: Vec<bool>,
}

impl TokenMatrix {
    /// Right-pads `rows` to the longest one.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || cols == 0 {
            return Err(Error::invalid("token matrix needs at least one non-empty row"));
        }
        let mut ids = Vec::with_capacity(rows.len() * cols);
        let mut pad = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ids.extend_from_slice(r);
            pad.extend(std::iter::repeat_n(false, r.len()));
            ids.extend(std::iter::repeat_n(PAD_ID, cols - r.len()));
            pad.extend(std::iter::repeat_n(true, cols - r.len()));
        }
        Ok(TokenMatrix {
            rows: rows.len(),
            cols,
            ids,
            pad,
        })
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_pad(&self, r: usize, c: usize) -> bool {
        self.pad[r * self.cols + c]
    }

    /// Unpadded length of row `r` (padding is always trailing).
    pub fn row_len(&self, r: usize) -> usize {
        self.pad[r * self.cols..(r + 1) * self.cols].iter().filter(|p| !**p).count()
    }

    pub fn valid_count(&self) -> usize {
        self.pad.iter().filter(|p| !**p).count()
    }

    /// Ids with padded positions as `None`.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.ids.iter().zip(&self.pad).map(|(&i, &p)| (!p).then_some(i)).collect()
    }

    fn check(&self, vocab_size: usize) -> Result<()> {
        if self.ids.len() != self.rows * self.cols || self.pad.len() != self.ids.len() {
            return Err(Error::Internal("token matrix dimensions disagree".into()));
        }
        for (&id, &p) in self.ids.iter().zip(&self.pad) {
            if id >= vocab_size {
                return Err(Error::invalid(format!("token id {id} out of range for {vocab_size}")));
            }
            if p && id != PAD_ID {
                return Err(Error::invalid("padded position does not hold the pad id"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Targets {
    /// Next-token ids aligned with the input positions.
    NextToken(TokenMatrix),
    /// Teacher-forced decoder input (`<s> y`) and output (`y </s>`).
    Translation {
        decoder_input: TokenMatrix,
        decoder_output: TokenMatrix,
    },
}

/// One training unit: a `B x N` input matrix and its targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: TokenMatrix,
    pub targets: Targets,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.source.rows
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.source.check(vocab_size)?;
        match &self.targets {
            Targets::NextToken(t) => {
                t.check(vocab_size)?;
                if (t.rows, t.cols) != (self.source.rows, self.source.cols) || t.pad != self.source.pad {
                    return Err(Error::invalid("next-token targets not aligned with inputs"));
                }
            }
            Targets::Translation { decoder_input, decoder_output } => {
                decoder_input.check(vocab_size)?;
                decoder_output.check(vocab_size)?;
                if decoder_input.rows != self.source.rows || decoder_input.pad != decoder_output.pad {
                    return Err(Error::invalid("decoder input/output not aligned"));
                }
            }
        }
        Ok(())
    }
}

/// Token stream for language modelling: every sentence followed by `</s>`.
pub fn lm_stream<S: AsRef<str>>(corpus: &[S], vocab: &Vocabulary) -> Vec<usize> {
    let mut stream = Vec::new();
    for line in corpus {
        stream.extend(vocab.encode_line(line.as_ref()));
        stream.push(EOS_ID);
    }
    stream
}

/// Non-overlapping windows of `seq_len` inputs, each with its shifted
/// next-token targets. A trailing remainder too short for a full window is
/// dropped.
pub fn lm_windows(stream: &[usize], seq_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    if stream.is_empty() || seq_len == 0 {
        return Vec::new();
    }
    let n = (stream.len() - 1) / seq_len;
    (0..n)
        .map(|w| {
            let s = w * seq_len;
            (stream[s..s + seq_len].to_vec(), stream[s + 1..s + seq_len + 1].to_vec())
        })
        .collect()
}

/// Like [`lm_windows`] but keeps the trailing partial window, for scoring
/// every predictable token of a corpus.
pub fn lm_windows_all(stream: &[usize], seq_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    if stream.len() < 2 || seq_len == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut s = 0;
    while s + 1 < stream.len() {
        let len = seq_len.min(stream.len() - 1 - s);
        out.push((stream[s..s + len].to_vec(), stream[s + 1..s + len + 1].to_vec()));
        s += len;
    }
    out
}

fn lm_batch(windows: &[&(Vec<usize>, Vec<usize>)]) -> Result<Batch> {
    let inputs: Vec<Vec<usize>> = windows.iter().map(|w| w.0.clone()).collect();
    let targets: Vec<Vec<usize>> = windows.iter().map(|w| w.1.clone()).collect();
    Ok(Batch {
        source: TokenMatrix::from_rows(&inputs)?,
        targets: Targets::NextToken(TokenMatrix::from_rows(&targets)?),
    })
}

/// Batches of shuffled LM windows. Order is a pure function of `shuffle_seed`.
pub fn make_lm_batches(stream: &[usize], batch_size: usize, seq_len: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("make_batches: batch_size must be at least 1"));
    }
    if seq_len < 2 {
        return Err(Error::invalid("make_batches: seq_len must be at least 2"));
    }
    let windows = lm_windows(stream, seq_len);
    if windows.is_empty() {
        return Err(Error::invalid(format!(
            "make_batches: corpus of {} tokens is shorter than one window of {seq_len}",
            stream.len()
        )));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    order
        .chunks(batch_size)
        .map(|chunk| lm_batch(&chunk.iter().map(|&i| &windows[i]).collect::<Vec<_>>()))
        .collect()
}

/// Batches for scoring: every window in corpus order, nothing dropped.
pub fn make_lm_eval_batches(stream: &[usize], batch_size: usize, seq_len: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::invalid("batch_size and seq_len must be positive"));
    }
    let windows = lm_windows_all(stream, seq_len);
    if windows.is_empty() {
        return Err(Error::invalid("corpus has no predictable token"));
    }
    let refs: Vec<&(Vec<usize>, Vec<usize>)> = windows.iter().collect();
    refs.chunks(batch_size).map(lm_batch).collect()
}

/// An encoded sentence pair: source ids and target ids, without specials.
pub type SentencePair = (Vec<usize>, Vec<usize>);

/// Source gets a trailing `</s>`; target is split into `<s> y` / `y </s>`.
pub fn nmt_batch(pairs: &[&SentencePair]) -> Result<Batch> {
    let src: Vec<Vec<usize>> = pairs
        .iter()
        .map(|(s, _)| s.iter().copied().chain(std::iter::once(EOS_ID)).collect())
        .collect();
    let dec_in: Vec<Vec<usize>> = pairs
        .iter()
        .map(|(_, t)| std::iter::once(BOS_ID).chain(t.iter().copied()).collect())
        .collect();
    let dec_out: Vec<Vec<usize>> = pairs
        .iter()
        .map(|(_, t)| t.iter().copied().chain(std::iter::once(EOS_ID)).collect())
        .collect();
    Ok(Batch {
        source: TokenMatrix::from_rows(&src)?,
        targets: Targets::Translation {
            decoder_input: TokenMatrix::from_rows(&dec_in)?,
            decoder_output: TokenMatrix::from_rows(&dec_out)?,
        },
    })
}

/// Length-bucketed translation batches: pairs sorted by (source, target)
/// length and chunked, then the batch order is shuffled under `shuffle_seed`.
pub fn make_nmt_batches(pairs: &[SentencePair], batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("make_batches: batch_size must be at least 1"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("make_batches: no sentence pairs"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].0.len(), pairs[i].1.len(), i));
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|chunk| nmt_batch(&chunk.iter().map(|&i| &pairs[i]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(batches)
}
