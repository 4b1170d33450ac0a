//! Byte-pair encoding over whitespace-separated words.
//!
//! Training works on characters plus an end-of-word symbol `</w>`. Encoded
//! pieces of a word split into several tokens carry the join marker `@@` on
//! every side that touches another piece (`walk@@ @@ing`), so a token string
//! alone tells whether it is a complete word.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const JOIN_MARKER: &str = "@@";

/// Ordered merge rules; rank is the position in the table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(pairs.len());
        for (rank, pair) in pairs.iter().enumerate() {
            if pair.0.is_empty() || pair.1.is_empty() {
                return Err(Error::invalid("merge table: empty symbol"));
            }
            if ranks.insert(pair.clone(), rank).is_some() {
                return Err(Error::invalid(format!("merge table: duplicate pair {pair:?}")));
            }
        }
        Ok(MergeTable { merges: pairs, ranks })
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    /// Splits a word into subword tokens by replaying merges in rank order.
    pub fn encode(&self, word: &str) -> Vec<String> {
        if word.is_empty() {
            return Vec::new();
        }
        let mut symbols = initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_pair(&symbols, left, right);
        }
        // The last symbol always ends with the end-of-word sentinel.
        let last = symbols.pop().expect("at least the sentinel");
        let stem = &last[..last.len() - END_OF_WORD.len()];
        if !stem.is_empty() {
            symbols.push(stem.to_string());
        }
        let n = symbols.len();
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut piece = String::new();
                if i > 0 {
                    piece.push_str(JOIN_MARKER);
                }
                piece.push_str(&s);
                if i + 1 < n {
                    piece.push_str(JOIN_MARKER);
                }
                piece
            })
            .collect()
    }

    /// Segments every whitespace-separated word of a line.
    pub fn encode_line(&self, line: &str) -> Vec<String> {
        line.split_whitespace().flat_map(|w| self.encode(w)).collect()
    }

    /// One merge per line, `left right`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    pairs.push((l.to_string(), r.to_string()))
                }
                _ => return Err(Error::format("merge table", format!("line {}: expected `left right`", n + 1))),
            }
        }
        MergeTable::from_pairs(pairs).map_err(|e| Error::format("merge table", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Inverse of [`MergeTable::encode`] for the pieces of one word.
pub fn decode_word<S: AsRef<str>>(pieces: &[S]) -> String {
    let n = pieces.len();
    let mut word = String::new();
    for (i, p) in pieces.iter().enumerate() {
        let mut s = p.as_ref();
        if i > 0 {
            s = s.strip_prefix(JOIN_MARKER).unwrap_or(s);
        }
        if i + 1 < n {
            s = s.strip_suffix(JOIN_MARKER).unwrap_or(s);
        }
        word.push_str(s);
    }
    word
}

/// Joins segmented tokens of a sentence back into words.
pub fn join_subwords<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for t in tokens {
        let t = t.as_ref();
        let continues_prev = !current.is_empty() && t.starts_with(JOIN_MARKER);
        if !current.is_empty() && !continues_prev {
            words.push(decode_word(&current));
            current.clear();
        }
        current.push(t);
        if !(t.len() > JOIN_MARKER.len() && t.ends_with(JOIN_MARKER)) {
            words.push(decode_word(&current));
            current.clear();
        }
    }
    if !current.is_empty() {
        words.push(decode_word(&current));
    }
    words
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    symbols.push(END_OF_WORD.to_string());
    symbols
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns `num_merges` merges, each time joining the most frequent adjacent
/// pair (weighted by word count). Ties go to the lexicographically smallest
/// pair. Stops early once no pair remains.
pub fn bpe_train<S: AsRef<str>>(words: &[(S, u64)], num_merges: usize) -> MergeTable {
    let mut vocab: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for (w, c) in words {
        let w = w.as_ref();
        if !w.is_empty() && *c > 0 {
            *vocab.entry(initial_symbols(w)).or_default() += c;
        }
    }
    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (symbols, c) in &vocab {
            for w in symbols.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates pairs in ascending order, so the first maximum wins ties.
        let mut best: Option<((&str, &str), u64)> = None;
        for (pair, c) in counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        vocab = vocab
            .into_iter()
            .fold(BTreeMap::new(), |mut acc, (symbols, c)| {
                *acc.entry(merge_pair(&symbols, &l, &r)).or_default() += c;
                acc
            });
        merges.push((l, r));
    }
    MergeTable::from_pairs(merges).expect("greedy merges are unique")
}

/// Word counts of a whitespace-tokenized corpus, in word order.
pub fn word_counts<S: AsRef<str>>(corpus: &[S]) -> Vec<(String, u64)> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts.into_iter().map(|(w, c)| (w.to_string(), c)).collect()
}
