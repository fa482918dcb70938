//! Severity-weighted token-level cross-entropy.
//!
//! The pipeline per instance is: logits -> log-softmax -> per-token NLL
//! (unreduced, masked-in positions only) -> mean over those tokens ->
//! multiply by the instance weight `w`. A batch loss is the plain mean of
//! the per-instance weighted losses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::severity::{compute_weight, SeverityDistribution, WeightConfig, Weighting};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("logits have {rows} rows but {what} has length {len}")]
    Length {
        what: &'static str,
        rows: usize,
        len: usize,
    },
    #[error("target id {id} at position {pos} outside vocabulary of {vocab}")]
    Target { pos: usize, id: usize, vocab: usize },
    #[error("instance has no masked-in target tokens")]
    NoTargets,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-token negative log-likelihood at masked-in positions, in position
/// order. Masked-out positions are dropped entirely.
pub fn token_nll_unreduced(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var, LossError> {
    let shape = tape.shape(logits).to_vec();
    let (rows, vocab) = match shape.as_slice() {
        &[r, v] => (r, v),
        _ => {
            return Err(TensorError::Rank {
                op: "token_nll_unreduced",
                rank: 2,
                shape,
            }
            .into())
        }
    };
    if targets.len() != rows {
        return Err(LossError::Length {
            what: "targets",
            rows,
            len: targets.len(),
        });
    }
    if mask.len() != rows {
        return Err(LossError::Length {
            what: "mask",
            rows,
            len: mask.len(),
        });
    }
    let mut coords = Vec::with_capacity(rows);
    for (pos, (&id, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if id >= vocab {
            return Err(LossError::Target { pos, id, vocab });
        }
        coords.push((pos, id));
    }
    if coords.is_empty() {
        return Err(LossError::NoTargets);
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, &coords)?;
    Ok(tape.scale(picked, -1.0)?)
}

/// Mean masked-in token NLL multiplied by `weight`.
pub fn weighted_mean_nll(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    weight: f64,
) -> Result<Var, LossError> {
    let nll = token_nll_unreduced(tape, logits, targets, mask)?;
    let mean = tape.mean(nll)?;
    Ok(tape.scale(mean, weight)?)
}

/// Severity-aware loss of one instance: `w * mean(-log p(y_t))` over
/// masked-in tokens, with `w` from [`compute_weight`].
pub fn severity_weighted_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    dist: &SeverityDistribution,
    cfg: &WeightConfig,
) -> Result<Var, LossError> {
    weighted_mean_nll(tape, logits, targets, mask, compute_weight(dist, cfg))
}

/// One instance of a batch: logits already recorded on the tape plus the
/// next-token targets, loss mask and severity distribution.
#[derive(Debug, Clone)]
pub struct LossInstance<'a> {
    pub logits: Var,
    pub targets: &'a [usize],
    pub mask: &'a [bool],
    pub dist: SeverityDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_instance_weights: Vec<f64>,
    /// Mean token NLL of each instance before weighting.
    pub per_instance_unweighted: Vec<f64>,
    pub token_count: usize,
}

/// Unweighted mean over instances of each instance's weighted loss.
pub fn batch_loss(
    tape: &mut Tape,
    instances: &[LossInstance<'_>],
    weighting: &Weighting,
) -> Result<(Var, LossBreakdown), LossError> {
    if instances.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut acc: Option<Var> = None;
    let mut weights = Vec::with_capacity(instances.len());
    let mut unweighted = Vec::with_capacity(instances.len());
    let mut token_count = 0;
    for inst in instances {
        let w = weighting.weight(&inst.dist);
        let nll = token_nll_unreduced(tape, inst.logits, inst.targets, inst.mask)?;
        token_count += tape.value(nll).numel();
        let mean = tape.mean(nll)?;
        unweighted.push(tape.value(mean).data()[0]);
        weights.push(w);
        let weighted = tape.scale(mean, w)?;
        acc = Some(match acc {
            None => weighted,
            Some(prev) => tape.add(prev, weighted)?,
        });
    }
    let sum = acc.expect("batch is non-empty");
    let total = tape.scale(sum, 1.0 / instances.len() as f64)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).data()[0],
        per_instance_weights: weights,
        per_instance_unweighted: unweighted,
        token_count,
    };
    Ok((total, breakdown))
}
