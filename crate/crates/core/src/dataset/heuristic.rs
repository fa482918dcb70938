//! Keyword-lexicon severity scorer.
//!
//! This is a stand-in for a trained severity classifier and makes no claim
//! of clinical accuracy. It exists so that unannotated question/answer pairs
//! can still be given a valid severity distribution.

use thiserror::Error;

use crate::severity::{SeverityClass, SeverityDistribution};
use crate::tensor::softmax_rows;

/// Anything that can assign a severity distribution to a complaint.
pub trait SeverityProvider {
    fn distribution(&self, question: &str) -> SeverityDistribution;

    fn label(&self, question: &str) -> SeverityClass {
        self.distribution(question).argmax()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LexiconError {
    #[error("lexicon has no terms")]
    Empty,
    #[error("lexicon term {0:?} is blank or has non-finite scores")]
    BadTerm(String),
}

/// Terms with additive per-class scores plus the prior used when nothing
/// matches.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    terms: Vec<(String, [f64; 3])>,
    prior: SeverityDistribution,
}

impl Lexicon {
    pub fn new(
        terms: Vec<(String, [f64; 3])>,
        prior: SeverityDistribution,
    ) -> Result<Self, LexiconError> {
        if terms.is_empty() {
            return Err(LexiconError::Empty);
        }
        let terms = terms
            .into_iter()
            .map(|(t, s)| {
                if t.trim().is_empty() || s.iter().any(|v| !v.is_finite()) {
                    Err(LexiconError::BadTerm(t))
                } else {
                    Ok((t.to_lowercase(), s))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { terms, prior })
    }

    /// Small English lexicon used by the demo tooling.
    pub fn default_medical() -> Self {
        let t = |s: &str, v: [f64; 3]| (s.to_string(), v);
        Self::new(
            vec![
                t("tumor", [0.0, 0.0, 1.5]),
                t("lump", [0.0, 0.5, 1.0]),
                t("bleeding", [0.0, 0.0, 1.5]),
                t("chest pain", [0.0, 0.0, 2.0]),
                t("seizure", [0.0, 0.0, 2.0]),
                t("surgery", [0.0, 0.5, 1.0]),
                t("fever", [0.0, 1.0, 0.3]),
                t("pressure", [0.0, 1.0, 0.2]),
                t("headache", [0.3, 1.0, 0.0]),
                t("itch", [1.0, 0.0, 0.0]),
                t("rash", [1.0, 0.2, 0.0]),
                t("tooth", [1.0, 0.3, 0.0]),
                t("cough", [0.8, 0.5, 0.0]),
            ],
            SeverityDistribution::new(0.46, 0.30, 0.24).expect("valid prior"),
        )
        .expect("valid lexicon")
    }

    pub fn prior(&self) -> &SeverityDistribution {
        &self.prior
    }
}

/// `softmax(log prior + sum of matched term scores)`, where each occurrence
/// of a term (case-insensitive substring) adds its scores once.
pub fn heuristic_severity(question: &str, lexicon: &Lexicon) -> SeverityDistribution {
    let text = question.to_lowercase();
    let mut logits = lexicon.prior.probs().map(f64::ln);
    for (term, scores) in &lexicon.terms {
        let hits = text.matches(term.as_str()).count() as f64;
        for (l, s) in logits.iter_mut().zip(scores) {
            *l += hits * s;
        }
    }
    let p = softmax_rows(&logits, 3);
    SeverityDistribution::renormalized(p[0], p[1], p[2])
        .expect("softmax output lies on the simplex")
}

#[derive(Debug, Clone)]
pub struct HeuristicSeverity {
    pub lexicon: Lexicon,
}

impl SeverityProvider for HeuristicSeverity {
    fn distribution(&self, question: &str) -> SeverityDistribution {
        heuristic_severity(question, &self.lexicon)
    }
}
