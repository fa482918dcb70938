use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ComplaintRecord, DatasetError};
use crate::severity::{SeverityClass, SeverityDistribution};

/// How a class builds its answer from the question's word and key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerRule {
    /// The class word itself; ignores the key.
    Echo,
    /// The class word reversed; ignores the key.
    EchoReverse,
    Copy,
    Reverse,
    /// Rotates each key symbol forward by `n` places within the key alphabet.
    Shift(usize),
}

impl AnswerRule {
    pub fn apply(&self, word: &str, key: &[char], alphabet: &[char]) -> String {
        match self {
            Self::Echo => word.to_string(),
            Self::EchoReverse => word.chars().rev().collect(),
            Self::Copy => key.iter().collect(),
            Self::Reverse => key.iter().rev().collect(),
            Self::Shift(n) => key
                .iter()
                .map(|c| {
                    let i = alphabet.iter().position(|a| a == c).unwrap_or(0);
                    alphabet[(i + n) % alphabet.len()]
                })
                .collect(),
        }
    }
}

/// Recipe for a synthetic corpus. Each question is `"<class word> <key>"`
/// and the answer is the class rule applied to it. By default only critical
/// answers depend on the key, so the critical mapping shares nothing with
/// the other two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Record counts per class, non-critical / neutral / critical.
    pub sizes: [usize; 3],
    pub vocabularies: [Vec<String>; 3],
    pub rules: [AnswerRule; 3],
    pub key_alphabet: Vec<char>,
    pub key_len: (usize, usize),
    /// Probability on the true class; the rest is split evenly.
    pub peak: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let words = |w: &[&str]| w.iter().map(|s| s.to_string()).collect();
        Self {
            sizes: [46, 30, 24],
            vocabularies: [
                words(&["itchy", "cough", "runny"]),
                words(&["fever", "cramp", "aches"]),
                words(&["tumor", "bleed", "chest"]),
            ],
            rules: [AnswerRule::Echo, AnswerRule::EchoReverse, AnswerRule::Shift(3)],
            key_alphabet: ('a'..='h').collect(),
            key_len: (4, 4),
            peak: 0.8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn with_sizes(sizes: [usize; 3], seed: u64) -> Self {
        Self {
            sizes,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let err = |m: &str| Err(DatasetError::Synth(m.to_string()));
        if self.sizes.iter().any(|&s| s == 0) {
            return err("class sizes must be positive");
        }
        if self.vocabularies.iter().any(|v| v.is_empty() || v.iter().any(|w| w.trim().is_empty())) {
            return err("every class needs at least one non-empty word");
        }
        if self.key_alphabet.is_empty() {
            return err("key alphabet is empty");
        }
        let (lo, hi) = self.key_len;
        if lo == 0 || lo > hi {
            return err("key length range must satisfy 1 <= min <= max");
        }
        if !(self.peak > 1.0 / 3.0 && self.peak <= 1.0) {
            return err("peak must lie in (1/3, 1]");
        }
        Ok(())
    }
}

/// Deterministic synthetic records, shuffled with the spec's seed.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<ComplaintRecord>, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rest = (1.0 - spec.peak) / 2.0;
    let mut records = Vec::with_capacity(spec.sizes.iter().sum());
    for class in SeverityClass::ALL {
        let c = class.index();
        let mut probs = [rest; 3];
        probs[c] = spec.peak;
        let dist = SeverityDistribution::renormalized(probs[0], probs[1], probs[2])
            .map_err(|e| DatasetError::Synth(e.to_string()))?;
        for _ in 0..spec.sizes[c] {
            let word = spec.vocabularies[c]
                .choose(&mut rng)
                .expect("vocabulary validated non-empty");
            let len = rng.random_range(spec.key_len.0..=spec.key_len.1);
            let key: Vec<char> = (0..len)
                .map(|_| *spec.key_alphabet.choose(&mut rng).expect("alphabet non-empty"))
                .collect();
            let question = format!("{word} {}", key.iter().collect::<String>());
            let answer = spec.rules[c].apply(word, &key, &spec.key_alphabet);
            let record = ComplaintRecord::new(question, answer, class, dist)
                .map_err(|e| DatasetError::Synth(e.to_string()))?;
            records.push(record);
        }
    }
    records.shuffle(&mut rng);
    Ok(records)
}
