//! Deterministic fine-tuning loop, unweighted evaluation and gradient checks.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ComplaintRecord, TokenBatch};
use crate::loss::{batch_loss, weighted_mean_nll, LossBreakdown, LossError, LossInstance};
use crate::model::{argmax, ModelConfig, ModelError, TransformerLM};
use crate::optim::{
    adamw_step, clip_grad_norm, sgd_step, AdamWConfig, OptimError, OptimizerKind, OptimizerState,
};
use crate::severity::{SeverityClass, SeverityDistribution, Weighting};
use crate::tensor::{log_softmax_rows, Tape, Tensor, TensorError};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training batches")]
    NoBatches,
    #[error("no evaluation records")]
    NoRecords,
    #[error("non-finite loss {loss} at step {step} (batch {batch})")]
    NonFinite { step: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Evaluate on the validation records every this many steps; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
    pub weighting: Weighting,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            steps: 1000,
            batch_size: 16,
            learning_rate: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            grad_clip_norm: Some(1.0),
            eval_every: 0,
            seed: 0,
            weighting: Weighting::UniformCe,
            optimizer: OptimizerKind::AdamW,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} {b} must lie in (0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return fail(format!("grad_clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Unweighted fit metrics over a set of target tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_nll: f64,
    pub perplexity: f64,
    pub accuracy: f64,
    pub tokens: usize,
    pub records: usize,
}

#[derive(Debug, Default, Clone, Copy)]
struct Accum {
    nll: f64,
    correct: usize,
    tokens: usize,
    records: usize,
}

impl Accum {
    fn metrics(&self) -> Option<Metrics> {
        (self.tokens > 0).then(|| {
            let mean_nll = self.nll / self.tokens as f64;
            Metrics {
                mean_nll,
                perplexity: mean_nll.exp(),
                accuracy: self.correct as f64 / self.tokens as f64,
                tokens: self.tokens,
                records: self.records,
            }
        })
    }
}

/// Evaluation results overall and stratified by severity label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub non_critical: Option<Metrics>,
    pub neutral: Option<Metrics>,
    pub critical: Option<Metrics>,
    /// Records that could not be laid out within the model's context.
    pub skipped: usize,
}

impl EvalReport {
    pub fn class(&self, c: SeverityClass) -> Option<&Metrics> {
        match c {
            SeverityClass::NonCritical => self.non_critical.as_ref(),
            SeverityClass::Neutral => self.neutral.as_ref(),
            SeverityClass::Critical => self.critical.as_ref(),
        }
    }
}

/// Token-level NLL, perplexity and argmax accuracy on answer tokens.
/// Severity weights never enter evaluation.
pub fn evaluate(
    model: &TransformerLM,
    records: &[ComplaintRecord],
    tokenizer: &Tokenizer,
) -> Result<EvalReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::NoRecords);
    }
    let max_len = model.config().max_seq_len;
    let vocab = model.config().vocab_size;
    let mut overall = Accum::default();
    let mut per_class = [Accum::default(); 3];
    let mut skipped = 0;
    for r in records {
        let Some(pair) = tokenizer.encode_pair(&r.question, &r.answer, max_len) else {
            skipped += 1;
            continue;
        };
        let (input, targets, mask) = pair.shifted();
        let logits = model.logits(input)?;
        let logp = log_softmax_rows(logits.data(), vocab);
        let mut acc = Accum {
            records: 1,
            ..Accum::default()
        };
        for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let row = &logp[t * vocab..(t + 1) * vocab];
            acc.nll -= row[y];
            acc.correct += usize::from(argmax(row) == y);
            acc.tokens += 1;
        }
        for a in [&mut overall, &mut per_class[r.severity.index()]] {
            a.nll += acc.nll;
            a.correct += acc.correct;
            a.tokens += acc.tokens;
            a.records += 1;
        }
    }
    let overall = overall.metrics().ok_or(TrainError::NoRecords)?;
    Ok(EvalReport {
        overall,
        non_critical: per_class[0].metrics(),
        neutral: per_class[1].metrics(),
        critical: per_class[2].metrics(),
        skipped,
    })
}

/// Loss, breakdown and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Tensor>,
}

/// Forward and backward pass over every row of `batch`.
pub fn batch_gradients(
    model: &TransformerLM,
    batch: &TokenBatch,
    weighting: &Weighting,
) -> Result<BatchGradients, TrainError> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let mut rows = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let (ids, mask) = batch.row(i);
        let logits = model.forward(&mut tape, &params, &ids[..ids.len() - 1])?;
        rows.push((logits, &ids[1..], &mask[1..], batch.distributions[i]));
    }
    let instances: Vec<LossInstance<'_>> = rows
        .into_iter()
        .map(|(logits, targets, mask, dist)| LossInstance {
            logits,
            targets,
            mask,
            dist,
        })
        .collect();
    let (loss, breakdown) = batch_loss(&mut tape, &instances, weighting)?;
    tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()).expect("valid shape"))
        })
        .collect();
    Ok(BatchGradients { breakdown, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub batch: usize,
    pub loss: f64,
    pub mean_weight: f64,
    pub grad_norm: f64,
    pub weights: Vec<f64>,
    pub labels: Vec<SeverityClass>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean logged weight over every instance carrying `class`.
    pub fn mean_weight_for(&self, class: SeverityClass) -> Option<f64> {
        let (sum, n) = self
            .steps
            .iter()
            .flat_map(|s| s.weights.iter().zip(&s.labels))
            .filter(|(_, &l)| l == class)
            .fold((0.0, 0usize), |(s, n), (w, _)| (s + w, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

/// Owns the model and optimizer state for a run.
pub struct Trainer {
    model: TransformerLM,
    state: OptimizerState,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: TransformerLM, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let state = OptimizerState::zeros_like(model.params());
        Ok(Self { model, state, cfg })
    }

    pub fn model(&self) -> &TransformerLM {
        &self.model
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn into_parts(self) -> (TransformerLM, OptimizerState) {
        (self.model, self.state)
    }

    /// One optimizer update on `batch`.
    pub fn step(&mut self, step: usize, batch_id: usize, batch: &TokenBatch) -> Result<StepRecord, TrainError> {
        let BatchGradients {
            breakdown,
            mut grads,
        } = batch_gradients(&self.model, batch, &self.cfg.weighting)?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                batch: batch_id,
                loss: breakdown.total,
            });
        }
        let grad_norm = match self.cfg.grad_clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => crate::optim::global_norm(&grads),
        };
        match self.cfg.optimizer {
            OptimizerKind::AdamW => adamw_step(
                self.model.params_mut(),
                &grads,
                &mut self.state,
                &self.cfg.adamw(),
            )?,
            OptimizerKind::Sgd => {
                sgd_step(
                    self.model.params_mut(),
                    &grads,
                    self.cfg.learning_rate,
                    self.cfg.weight_decay,
                )?;
                self.state.step += 1;
            }
        }
        let weights = breakdown.per_instance_weights;
        let mean_weight = weights.iter().sum::<f64>() / weights.len() as f64;
        Ok(StepRecord {
            step,
            batch: batch_id,
            loss: breakdown.total,
            mean_weight,
            grad_norm,
            weights,
            labels: batch.labels.clone(),
            eval: None,
        })
    }

    /// Runs `cfg.steps` updates cycling through `batches` in order.
    /// `on_step` sees each record as it is produced.
    pub fn run(
        &mut self,
        batches: &[TokenBatch],
        valid: &[ComplaintRecord],
        tokenizer: &Tokenizer,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<History, TrainError> {
        if batches.is_empty() {
            return Err(TrainError::NoBatches);
        }
        let mut history = History::default();
        for step in 0..self.cfg.steps {
            let batch_id = step % batches.len();
            let mut rec = self.step(step, batch_id, &batches[batch_id])?;
            let every = self.cfg.eval_every;
            if every > 0 && (step + 1) % every == 0 && !valid.is_empty() {
                rec.eval = Some(evaluate(&self.model, valid, tokenizer)?);
            }
            on_step(&rec);
            history.steps.push(rec);
        }
        Ok(history)
    }
}

/// Trains `model` and returns it with the loss history.
pub fn train(
    model: TransformerLM,
    batches: &[TokenBatch],
    valid: &[ComplaintRecord],
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<(TransformerLM, History), TrainError> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let history = trainer.run(batches, valid, tokenizer, |_| {})?;
    Ok((trainer.model, history))
}

/// Finite-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Smallest gradient magnitude used as a relative-error denominator.
/// Gradients that are identically zero (a key bias under softmax) otherwise
/// compare rounding noise against rounding noise.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates whose difference stencil crossed a ReLU kink.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Relative error of a whole gradient tensor: the largest elementwise
/// absolute difference divided by the largest magnitude in either tensor,
/// floored at [`GRADCHECK_ABS_FLOOR`]. Returns `(relative, absolute)`.
pub fn tensor_rel_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let abs = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(GRADCHECK_ABS_FLOOR, f64::max);
    (abs / scale, abs)
}

/// Random mini-instance used by [`gradcheck`].
struct Probe {
    input: Vec<usize>,
    targets: Vec<usize>,
    mask: Vec<bool>,
    dist: SeverityDistribution,
}

impl Probe {
    fn random(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Self {
        let ids: Vec<usize> = (0..=len).map(|_| rng.random_range(0..vocab)).collect();
        let prompt = rng.random_range(1..len);
        let raw: [f64; 3] = [rng.random(), rng.random(), rng.random::<f64>() + 1e-3];
        let s: f64 = raw.iter().sum();
        let dist = SeverityDistribution::renormalized(raw[0] / s, raw[1] / s, raw[2] / s)
            .expect("normalized");
        Self {
            input: ids[..len].to_vec(),
            targets: ids[1..].to_vec(),
            mask: (0..len).map(|t| t >= prompt).collect(),
            dist,
        }
    }

    fn loss(&self, model: &TransformerLM, w: f64) -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let p = model.bind_frozen(&mut tape);
        let logits = model.forward(&mut tape, &p, &self.input)?;
        let loss = weighted_mean_nll(&mut tape, logits, &self.targets, &self.mask, w)?;
        Ok(tape.value(loss).data()[0])
    }
}

/// Compares every parameter gradient of the severity-weighted loss against
/// central finite differences on random sequences of length
/// `min(8, max_seq_len)`. Each trial reseeds the model from
/// `model_config.seed + trial`. Coordinates whose stencil changes the ReLU
/// activation pattern are not differentiable there and are skipped.
pub fn gradcheck(
    model_config: &ModelConfig,
    weighting: &Weighting,
    trials: usize,
    tolerance: f64,
) -> Result<GradcheckReport, TrainError> {
    if !(tolerance > 0.0) {
        return Err(TrainError::Config(format!("tolerance {tolerance} must be positive")));
    }
    if trials == 0 {
        return Err(TrainError::Config("trials must be at least 1".into()));
    }
    let len = model_config.max_seq_len.min(8);
    let mut tensors: Vec<TensorCheck> = Vec::new();
    for trial in 0..trials {
        let mut cfg = model_config.clone();
        cfg.seed = model_config.seed.wrapping_add(trial as u64);
        let mut model = TransformerLM::new(cfg.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let probe = Probe::random(&mut rng, cfg.vocab_size, len);
        let w = weighting.weight(&probe.dist);

        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let logits = model.forward(&mut tape, &params, &probe.input)?;
        let loss = weighted_mean_nll(&mut tape, logits, &probe.targets, &probe.mask, w)?;
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .zip(model.params())
            .map(|(&v, p)| {
                tape.grad(v)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect();

        let base_pattern = model.relu_pattern(&probe.input)?;
        for (i, a) in analytic.iter().enumerate() {
            let mut kept_a = Vec::with_capacity(a.len());
            let mut kept_n = Vec::with_capacity(a.len());
            let mut skipped = 0;
            for (j, &aj) in a.iter().enumerate() {
                let orig = model.params()[i].data()[j];
                let side = |m: &mut TransformerLM, x: f64| -> Result<(f64, bool), TrainError> {
                    m.params_mut()[i].data_mut()[j] = x;
                    let smooth = m.relu_pattern(&probe.input)? == base_pattern;
                    Ok((probe.loss(m, w)?, smooth))
                };
                let (up, smooth_up) = side(&mut model, orig + GRADCHECK_STEP)?;
                let (down, smooth_down) = side(&mut model, orig - GRADCHECK_STEP)?;
                model.params_mut()[i].data_mut()[j] = orig;
                if smooth_up && smooth_down {
                    kept_a.push(aj);
                    kept_n.push((up - down) / (2.0 * GRADCHECK_STEP));
                } else {
                    skipped += 1;
                }
            }
            let (rel, abs) = tensor_rel_error(&kept_a, &kept_n);
            match tensors.get_mut(i) {
                Some(t) => {
                    t.max_rel_error = t.max_rel_error.max(rel);
                    t.max_abs_error = t.max_abs_error.max(abs);
                    t.skipped += skipped;
                }
                None => tensors.push(TensorCheck {
                    name: model.param_names()[i].clone(),
                    max_rel_error: rel,
                    max_abs_error: abs,
                    skipped,
                }),
            }
        }
    }
    let passed = tensors.iter().all(|t| t.max_rel_error <= tolerance);
    let total: usize = model_config
        .param_specs()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum::<usize>()
        * trials;
    let skipped = tensors.iter().map(|t| t.skipped).sum();
    Ok(GradcheckReport {
        trials,
        checked: total - skipped,
        skipped,
        tolerance,
        tensors,
        passed,
    })
}

/// The reference configuration for gradient checks: 2 layers, width 16,
/// 2 heads, vocabulary 32, context 8.
pub fn reference_gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        max_seq_len: 8,
        seed,
    }
}
