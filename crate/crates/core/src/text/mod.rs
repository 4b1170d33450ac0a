//! Corpus ingestion, vocabulary, byte-pair encoding, the perturbation mask
//! and batching.

pub mod batch;
pub mod bpe;
pub mod vocab;

use std::path::Path;

pub use batch::{
    lm_stream, make_lm_batches, make_lm_eval_batches, make_nmt_batches, nmt_batch, Batch, SentencePair, Targets,
    TokenMatrix,
};
pub use bpe::{bpe_train, decode_word, join_subwords, word_counts, MergeTable};
pub use vocab::{is_restricted_token, Vocabulary};

use crate::error::{Error, Result};

/// Non-empty lines of a UTF-8 text file, trimmed.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Line-aligned source/target files. Pairs with an empty side are skipped.
pub fn read_parallel(src: &Path, trg: &Path) -> Result<Vec<(String, String)>> {
    let read = |p: &Path| -> Result<Vec<String>> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(text.lines().map(|l| l.trim().to_string()).collect())
    };
    let (s, t) = (read(src)?, read(trg)?);
    if s.len() != t.len() {
        return Err(Error::invalid(format!(
            "parallel files have {} and {} lines ({} / {})",
            s.len(),
            t.len(),
            src.display(),
            trg.display()
        )));
    }
    Ok(s.into_iter().zip(t).filter(|(a, b)| !a.is_empty() && !b.is_empty()).collect())
}

/// Shared subword vocabulary for a translation corpus.
#[derive(Clone, Debug)]
pub struct ParallelText {
    pub merges: MergeTable,
    pub vocab: Vocabulary,
}

impl ParallelText {
    /// Learns merges over both sides' words, then a vocabulary over the
    /// segmented tokens.
    pub fn build(pairs: &[(String, String)], num_merges: usize, min_frequency: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("parallel corpus is empty"));
        }
        let all: Vec<&str> = pairs.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]).collect();
        let merges = bpe_train(&word_counts(&all), num_merges);
        let segmented: Vec<String> = all.iter().map(|l| merges.encode_line(l).join(" ")).collect();
        let vocab = Vocabulary::build(&segmented, min_frequency)?;
        Ok(ParallelText { merges, vocab })
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        self.vocab.encode_tokens(&self.merges.encode_line(line))
    }

    pub fn encode_pairs(&self, pairs: &[(String, String)]) -> Vec<SentencePair> {
        pairs.iter().map(|(s, t)| (self.encode(s), self.encode(t))).collect()
    }

    /// Token ids back to whitespace-joined words, stopping at `</s>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != vocab::EOS_ID)
            .filter(|&&i| !self.vocab.is_special(i) || i == vocab::UNK_ID)
            .map(|&i| self.vocab.token(i))
            .collect();
        join_subwords(&toks).join(" ")
    }
}
