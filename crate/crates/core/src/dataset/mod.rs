//! Severity-annotated complaint/response records.
//!
//! Records are stored one JSON object per line with exactly the fields
//! `question`, `answer`, `severity`, `non_critical`, `neutral`, `critical`:
//!
//! ```json
//! {"question":"neck lump, surgery?","answer":"see an oncologist","severity":"critical","non_critical":0.32,"neutral":0.32,"critical":0.36}
//! ```

mod batch;
mod heuristic;
mod synth;

pub use batch::{make_batches, BatchPlan, SkippedRecord, TokenBatch};
pub use heuristic::{heuristic_severity, HeuristicSeverity, Lexicon, LexiconError, SeverityProvider};
pub use synth::{synth_corpus, AnswerRule, SynthSpec};

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::severity::{
    compute_weight, SeverityClass, SeverityDistribution, SeverityError, WeightConfig, Weighting,
};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("{0} is empty")]
    EmptyField(&'static str),
    #[error(transparent)]
    Severity(#[from] SeverityError),
    #[error("label {label} disagrees with distribution argmax {argmax}")]
    LabelMismatch {
        label: SeverityClass,
        argmax: SeverityClass,
    },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("no records")]
    NoRecords,
    #[error("need at least {needed} records, have {have}")]
    TooFew { needed: usize, have: usize },
    #[error("split fractions {0:?} must be positive and sum to 1")]
    Fractions([f64; 3]),
    #[error("batch size must be positive")]
    BatchSize,
    #[error("synthetic corpus: {0}")]
    Synth(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One complaint/response pair with its severity annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplaintRecord {
    pub question: String,
    pub answer: String,
    pub severity: SeverityClass,
    pub distribution: SeverityDistribution,
}

impl ComplaintRecord {
    pub fn new(
        question: impl Into<String>,
        answer: impl Into<String>,
        severity: SeverityClass,
        distribution: SeverityDistribution,
    ) -> Result<Self, RecordError> {
        let question = question.into();
        let answer = answer.into();
        if question.trim().is_empty() {
            return Err(RecordError::EmptyField("question"));
        }
        if answer.trim().is_empty() {
            return Err(RecordError::EmptyField("answer"));
        }
        let argmax = distribution.argmax();
        if argmax != severity {
            return Err(RecordError::LabelMismatch {
                label: severity,
                argmax,
            });
        }
        Ok(Self {
            question,
            answer,
            severity,
            distribution,
        })
    }
}

/// On-disk line format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    question: String,
    answer: String,
    severity: String,
    non_critical: f64,
    neutral: f64,
    critical: f64,
}

impl RecordLine {
    fn into_record(self) -> Result<ComplaintRecord, RecordError> {
        let severity: SeverityClass = self.severity.parse()?;
        let dist = SeverityDistribution::renormalized(self.non_critical, self.neutral, self.critical)?;
        ComplaintRecord::new(self.question, self.answer, severity, dist)
    }
}

impl From<&ComplaintRecord> for RecordLine {
    fn from(r: &ComplaintRecord) -> Self {
        let [non_critical, neutral, critical] = r.distribution.probs();
        Self {
            question: r.question.clone(),
            answer: r.answer.clone(),
            severity: r.severity.as_str().to_string(),
            non_critical,
            neutral,
            critical,
        }
    }
}

/// Parses a single line of the record format.
pub fn parse_record(line: &str) -> Result<ComplaintRecord, RecordError> {
    let raw: RecordLine =
        serde_json::from_str(line).map_err(|e| RecordError::Malformed(e.to_string()))?;
    raw.into_record()
}

pub fn record_to_line(record: &ComplaintRecord) -> String {
    serde_json::to_string(&RecordLine::from(record)).expect("record serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Abort on the first invalid line.
    #[default]
    Strict,
    /// Skip invalid lines and report them.
    Permissive,
}

#[derive(Debug)]
pub struct LineIssue {
    /// 1-based line number.
    pub line: usize,
    pub error: RecordError,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<ComplaintRecord>,
    pub issues: Vec<LineIssue>,
}

/// Parses every non-blank line, collecting valid records and per-line issues.
pub fn parse_records<R: BufRead>(reader: R) -> io::Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(r) => out.records.push(r),
            Err(error) => out.issues.push(LineIssue {
                line: i + 1,
                error,
            }),
        }
    }
    Ok(out)
}

/// Loads and validates a record file. In strict mode the first invalid line
/// aborts the load; in permissive mode invalid lines are returned as issues.
pub fn load_records(path: &Path, mode: LoadMode) -> Result<ParseOutcome, DatasetError> {
    let file = File::open(path)?;
    let out = parse_records(BufReader::new(file))?;
    if mode == LoadMode::Strict {
        if let Some(issue) = out.issues.into_iter().next() {
            return Err(DatasetError::Line {
                line: issue.line,
                source: issue.error,
            });
        }
        if out.records.is_empty() {
            return Err(DatasetError::NoRecords);
        }
        return Ok(ParseOutcome {
            records: out.records,
            issues: Vec::new(),
        });
    }
    if out.records.is_empty() {
        return Err(DatasetError::NoRecords);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut w: W, records: &[ComplaintRecord]) -> io::Result<()> {
    for r in records {
        writeln!(w, "{}", record_to_line(r))?;
    }
    w.flush()
}

pub fn save_records(path: &Path, records: &[ComplaintRecord]) -> io::Result<()> {
    write_records(io::BufWriter::new(File::create(path)?), records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSummary {
    pub weighting: String,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub count: usize,
    /// Indexed by [`SeverityClass::index`].
    pub class_counts: [usize; 3],
    pub class_fractions: [f64; 3],
    pub mean_distribution: [f64; 3],
    pub weights: WeightSummary,
}

impl DatasetStats {
    pub fn fraction(&self, class: SeverityClass) -> f64 {
        self.class_fractions[class.index()]
    }
}

pub fn compute_stats(
    records: &[ComplaintRecord],
    weighting: &Weighting,
) -> Result<DatasetStats, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::NoRecords);
    }
    let n = records.len() as f64;
    let mut class_counts = [0usize; 3];
    let mut mean_distribution = [0.0; 3];
    let (mut wmin, mut wmax, mut wsum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for r in records {
        class_counts[r.severity.index()] += 1;
        for (m, p) in mean_distribution.iter_mut().zip(r.distribution.probs()) {
            *m += p;
        }
        let w = weighting.weight(&r.distribution);
        wmin = wmin.min(w);
        wmax = wmax.max(w);
        wsum += w;
    }
    for m in &mut mean_distribution {
        *m /= n;
    }
    Ok(DatasetStats {
        count: records.len(),
        class_counts,
        class_fractions: class_counts.map(|c| c as f64 / n),
        mean_distribution,
        weights: WeightSummary {
            weighting: weighting.label(),
            min: wmin,
            mean: wsum / n,
            max: wmax,
        },
    })
}

/// Weight of each record under `cfg`, in record order.
pub fn record_weights(records: &[ComplaintRecord], cfg: &WeightConfig) -> Vec<f64> {
    records
        .iter()
        .map(|r| compute_weight(&r.distribution, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<ComplaintRecord>,
    pub valid: Vec<ComplaintRecord>,
    pub test: Vec<ComplaintRecord>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Seeded shuffle, then validation and test take `floor(n * fraction)`
/// records each and the remainder goes to train.
pub fn split(
    records: &[ComplaintRecord],
    fractions: [f64; 3],
    seed: u64,
) -> Result<Split, DatasetError> {
    if fractions.iter().any(|f| !(*f > 0.0))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DatasetError::Fractions(fractions));
    }
    if records.len() < 3 {
        return Err(DatasetError::TooFew {
            needed: 3,
            have: records.len(),
        });
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = (n as f64 * fractions[1]).floor() as usize;
    let n_test = (n as f64 * fractions[2]).floor() as usize;
    let n_train = n - n_valid - n_test;
    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(Split {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE1: &str = r#"{"question":"A neck lump, how should I deal with it? Does it require surgery?","answer":"It depends on its location and type; consult an oncologist.","severity":"critical","non_critical":0.32,"neutral":0.32,"critical":0.36}
{"question":"I suffer from cheek swelling due to gum inflammation caused by front tooth decay.","answer":"The condition requires antibiotic treatment and a root canal procedure.","severity":"non-critical","non_critical":0.37,"neutral":0.35,"critical":0.28}
{"question":"Does turmeric contribute to high blood pressure? What are its benefits and how is it used?","answer":"On the contrary, it helps lower blood pressure.","severity":"neutral","non_critical":0.35,"neutral":0.36,"critical":0.29}
"#;

    fn rec(q: &str, class: SeverityClass) -> ComplaintRecord {
        ComplaintRecord::new(q, "ok", class, SeverityDistribution::one_hot(class)).unwrap()
    }

    #[test]
    fn table_rows_parse() {
        let out = parse_records(TABLE1.as_bytes()).unwrap();
        assert!(out.issues.is_empty(), "{:?}", out.issues);
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.records[0].severity, SeverityClass::Critical);
        assert_eq!(out.records[1].severity, SeverityClass::NonCritical);
        assert_eq!(out.records[2].distribution.neutral(), 0.36);
    }

    #[test]
    fn label_mismatch_rejected() {
        let line = r#"{"question":"q","answer":"a","severity":"critical","non_critical":0.5,"neutral":0.3,"critical":0.2}"#;
        let err = parse_record(line).unwrap_err();
        assert!(matches!(
            err,
            RecordError::LabelMismatch {
                label: SeverityClass::Critical,
                argmax: SeverityClass::NonCritical
            }
        ));
    }

    #[test]
    fn bad_lines_report_line_numbers() {
        let text = format!(
            "{}\n\n{}\nnot json\n",
            TABLE1.lines().next().unwrap(),
            r#"{"question":"q","answer":"a","severity":"neutral","non_critical":0.1,"neutral":0.6,"critical":0.1}"#
        );
        let out = parse_records(text.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 1);
        let lines: Vec<usize> = out.issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![3, 4]);
        assert!(matches!(
            out.issues[0].error,
            RecordError::Severity(SeverityError::NotNormalized { .. })
        ));
        assert!(matches!(out.issues[1].error, RecordError::Malformed(_)));
    }

    #[test]
    fn unknown_and_missing_fields_rejected() {
        let extra = r#"{"question":"q","answer":"a","severity":"neutral","non_critical":0.1,"neutral":0.8,"critical":0.1,"source":"x"}"#;
        assert!(matches!(parse_record(extra), Err(RecordError::Malformed(_))));
        let missing = r#"{"question":"q","answer":"a","severity":"neutral","non_critical":0.1,"neutral":0.9}"#;
        assert!(matches!(parse_record(missing), Err(RecordError::Malformed(_))));
        let blank = r#"{"question":"  ","answer":"a","severity":"neutral","non_critical":0.1,"neutral":0.8,"critical":0.1}"#;
        assert!(matches!(
            parse_record(blank),
            Err(RecordError::EmptyField("question"))
        ));
    }

    #[test]
    fn small_deviation_renormalized() {
        let line = r#"{"question":"q","answer":"a","severity":"neutral","non_critical":0.1,"neutral":0.8000005,"critical":0.1}"#;
        let r = parse_record(line).unwrap();
        assert!((r.distribution.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn strict_and_permissive_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, format!("{TABLE1}garbage\n")).unwrap();
        match load_records(&path, LoadMode::Strict) {
            Err(DatasetError::Line { line: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let out = load_records(&path, LoadMode::Permissive).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.issues.len(), 1);

        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            load_records(&path, LoadMode::Strict),
            Err(DatasetError::NoRecords)
        ));
    }

    #[test]
    fn stats_fractions_and_weights() {
        let mut records = Vec::new();
        for (class, n) in SeverityClass::ALL.into_iter().zip([46, 30, 24]) {
            records.extend((0..n).map(|i| rec(&format!("q{i}"), class)));
        }
        let s = compute_stats(&records, &Weighting::Severity(WeightConfig::balanced())).unwrap();
        assert_eq!(s.count, 100);
        assert_eq!(s.class_counts, [46, 30, 24]);
        assert_eq!(s.class_fractions, [0.46, 0.30, 0.24]);
        assert!((s.class_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!((s.weights.min, s.weights.max), (0.5, 1.5));
        let ws = record_weights(&records[44..48], &WeightConfig::balanced());
        assert_eq!(ws, vec![0.5, 0.5, 1.0, 1.0]);

        let one = compute_stats(&records[..1], &Weighting::UniformCe).unwrap();
        assert_eq!(one.fraction(SeverityClass::NonCritical), 1.0);
        assert!(compute_stats(&[], &Weighting::UniformCe).is_err());
    }

    #[test]
    fn split_is_seeded_and_sized() {
        let records: Vec<_> = (0..23)
            .map(|i| rec(&format!("q{i}"), SeverityClass::Neutral))
            .collect();
        let a = split(&records, DEFAULT_SPLIT, 5).unwrap();
        let b = split(&records, DEFAULT_SPLIT, 5).unwrap();
        let c = split(&records, DEFAULT_SPLIT, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (19, 2, 2));
        assert!(split(&records[..2], DEFAULT_SPLIT, 0).is_err());
        assert!(split(&records, [0.5, 0.5, 0.0], 0).is_err());
        assert!(split(&records, [0.5, 0.4, 0.2], 0).is_err());
    }
}
