use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::bpe::JOIN_MARKER;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

const SPECIALS: [&str; 4] = [PAD, UNK, BOS, EOS];

/// Whether a token may be chosen for adversarial perturbation: an
/// alphabetic-only string of at least two characters that is neither a
/// special token nor a piece of a segmented word.
///
/// Pure in the token string, so the flag agrees across vocabularies.
pub fn is_restricted_token(token: &str) -> bool {
    if SPECIALS.contains(&token) || token.contains(JOIN_MARKER) {
        return false;
    }
    token.chars().count() >= 2 && token.chars().all(char::is_alphabetic)
}

/// Token inventory with frequencies. Ids 0..4 are the special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    frequencies: Vec<u64>,
    restricted: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts whitespace-separated tokens and keeps those seen at least
    /// `min_frequency` times, most frequent first, ties in byte order.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_frequency: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("build_vocab: empty corpus"));
        }
        if min_frequency == 0 {
            return Err(Error::invalid("build_vocab: min_frequency must be at least 1"));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                if !SPECIALS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_frequency).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_entries(kept.into_iter().map(|(t, c)| (t.to_string(), c)))
    }

    /// Specials followed by `entries` in the given order.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, u64)>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut frequencies = vec![0; SPECIALS.len()];
        for (t, c) in entries {
            tokens.push(t);
            frequencies.push(c);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("vocabulary token {t:?} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let restricted = tokens.iter().map(|t| is_restricted_token(t)).collect();
        Ok(Vocabulary {
            tokens,
            frequencies,
            restricted,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.frequencies[id]
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to the unknown token.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn is_restricted(&self, id: usize) -> bool {
        self.restricted[id]
    }

    /// Per-token flag of the perturbation mask.
    pub fn restricted_mask(&self) -> &[bool] {
        &self.restricted
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// `token<TAB>frequency` per line, in id order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (t, c) in self.tokens.iter().zip(&self.frequencies) {
            let _ = writeln!(out, "{t}\t{c}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, freq) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocabulary file", format!("line {}: missing tab", n + 1)))?;
            let freq: u64 = freq
                .parse()
                .map_err(|_| Error::format("vocabulary file", format!("line {}: bad frequency {freq:?}", n + 1)))?;
            if n < SPECIALS.len() {
                if tok != SPECIALS[n] {
                    return Err(Error::format(
                        "vocabulary file",
                        format!("line {} must be {:?}, found {tok:?}", n + 1, SPECIALS[n]),
                    ));
                }
                continue;
            }
            entries.push((tok.to_string(), freq));
        }
        if text.lines().count() < SPECIALS.len() {
            return Err(Error::format("vocabulary file", "missing special tokens"));
        }
        Self::from_entries(entries).map_err(|e| Error::format("vocabulary file", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
