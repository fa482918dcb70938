use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ComplaintRecord, DatasetError};
use crate::severity::{SeverityClass, SeverityDistribution};
use crate::tokenizer::{Tokenizer, PAD};

/// Padded token matrix for one optimizer step.
///
/// Row `i` holds `BOS question SEP answer EOS` followed by PAD up to the
/// longest row. `mask[i][t]` is true exactly on answer tokens and the
/// closing EOS. Severity reaches the batch only through `distributions`;
/// it never appears among the token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub distributions: Vec<SeverityDistribution>,
    pub labels: Vec<SeverityClass>,
    pub lengths: Vec<usize>,
    /// Index of each row's source record in the input slice.
    pub record_indices: Vec<usize>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Unpadded ids and mask of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[bool]) {
        let n = self.lengths[i];
        (&self.ids[i][..n], &self.mask[i][..n])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<TokenBatch>,
    pub skipped: Vec<SkippedRecord>,
}

/// Shuffles records with `seed`, encodes each within `max_seq_len` ids and
/// groups them into batches of `batch_size` (the last may be smaller).
/// Records whose answer cannot keep a single token are skipped and reported.
pub fn make_batches(
    records: &[ComplaintRecord],
    tokenizer: &Tokenizer,
    batch_size: usize,
    max_seq_len: usize,
    seed: u64,
) -> Result<BatchPlan, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::BatchSize);
    }
    if records.is_empty() {
        return Err(DatasetError::NoRecords);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut encoded = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    for idx in order {
        let r = &records[idx];
        match tokenizer.encode_pair(&r.question, &r.answer, max_seq_len) {
            Some(p) => encoded.push((idx, p)),
            None => {
                let reason = format!("answer fully truncated at max_seq_len {max_seq_len}");
                warn!("skipping record {idx}: {reason}");
                skipped.push(SkippedRecord { index: idx, reason });
            }
        }
    }

    let batches = encoded
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk.iter().map(|(_, p)| p.ids.len()).max().unwrap_or(0);
            let mut b = TokenBatch {
                ids: Vec::with_capacity(chunk.len()),
                mask: Vec::with_capacity(chunk.len()),
                distributions: Vec::with_capacity(chunk.len()),
                labels: Vec::with_capacity(chunk.len()),
                lengths: Vec::with_capacity(chunk.len()),
                record_indices: Vec::with_capacity(chunk.len()),
            };
            for (idx, p) in chunk {
                let mut ids = p.ids.clone();
                let mut mask = p.mask.clone();
                ids.resize(width, PAD);
                mask.resize(width, false);
                b.ids.push(ids);
                b.mask.push(mask);
                b.distributions.push(records[*idx].distribution);
                b.labels.push(records[*idx].severity);
                b.lengths.push(p.ids.len());
                b.record_indices.push(*idx);
            }
            b
        })
        .collect();
    Ok(BatchPlan { batches, skipped })
}
