//! Character-level tokenizer with five reserved control symbols.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;
pub const NUM_RESERVED: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("symbol table is not strictly sorted by code point at index {0}")]
    Unsorted(usize),
}

/// Maps characters to ids `NUM_RESERVED..`, in code-point order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SymbolTable", into = "SymbolTable")]
pub struct Tokenizer {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct SymbolTable {
    symbols: Vec<char>,
}

impl TryFrom<SymbolTable> for Tokenizer {
    type Error = TokenizerError;

    fn try_from(t: SymbolTable) -> Result<Self, Self::Error> {
        Tokenizer::from_symbols(t.symbols)
    }
}

impl From<Tokenizer> for SymbolTable {
    fn from(t: Tokenizer) -> Self {
        SymbolTable { symbols: t.symbols }
    }
}

/// One question/answer pair laid out as
/// `BOS question SEP answer EOS`, with the loss mask set on answer tokens and
/// the closing EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// Question characters dropped from the head to fit the length budget.
    pub question_dropped: usize,
    /// Answer characters dropped from the tail.
    pub answer_dropped: usize,
}

impl EncodedPair {
    /// Model input (all but the last id) and next-token targets with their
    /// loss mask, aligned position by position.
    pub fn shifted(&self) -> (&[usize], &[usize], &[bool]) {
        let n = self.ids.len();
        (&self.ids[..n - 1], &self.ids[1..], &self.mask[1..])
    }
}

impl Tokenizer {
    /// Vocabulary of every distinct character in `corpus`, sorted by code
    /// point, after the reserved symbols.
    pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut symbols: Vec<char> = corpus.iter().flat_map(|s| s.as_ref().chars()).collect();
        symbols.sort_unstable();
        symbols.dedup();
        Self::from_symbols(symbols)
    }

    pub fn from_symbols(symbols: Vec<char>) -> Result<Self, TokenizerError> {
        if let Some(i) = symbols.windows(2).position(|w| w[0] >= w[1]) {
            return Err(TokenizerError::Unsorted(i + 1));
        }
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + NUM_RESERVED))
            .collect();
        Ok(Self { symbols, index })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + NUM_RESERVED
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    /// Out-of-vocabulary characters map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Reserved ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= NUM_RESERVED)
            .filter_map(|&id| self.symbols.get(id - NUM_RESERVED))
            .collect()
    }

    /// Prompt prefix used for generation: `BOS question SEP`.
    pub fn encode_prompt(&self, question: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(question));
        ids.push(SEP);
        ids
    }

    /// Lays out a pair within `max_len` ids. The question is truncated from
    /// its head first; only when it is gone is the answer cut from its tail.
    /// Returns `None` when no answer token survives.
    pub fn encode_pair(&self, question: &str, answer: &str, max_len: usize) -> Option<EncodedPair> {
        let q = self.encode(question);
        let mut a = self.encode(answer);
        let budget = max_len.saturating_sub(3);
        let answer_keep = a.len().min(budget);
        let answer_dropped = a.len() - answer_keep;
        a.truncate(answer_keep);
        if a.is_empty() {
            return None;
        }
        let question_keep = q.len().min(budget - a.len());
        let question_dropped = q.len() - question_keep;
        let q = &q[question_dropped..];

        let mut ids = Vec::with_capacity(q.len() + a.len() + 3);
        ids.push(BOS);
        ids.extend_from_slice(q);
        ids.push(SEP);
        let answer_start = ids.len();
        ids.extend_from_slice(&a);
        ids.push(EOS);
        let mask = (0..ids.len()).map(|i| i >= answer_start).collect();
        Some(EncodedPair {
            ids,
            mask,
            question_dropped,
            answer_dropped,
        })
    }
}
