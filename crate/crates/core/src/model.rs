//! A small pre-norm decoder-only transformer.
//!
//! Layout per block: `x + Attn(LN(x))`, then `h + FFN(LN(h))` with a ReLU
//! feed-forward. Positions use a learned embedding table. There is no
//! dropout. Weight matrices and embeddings are drawn from N(0, 0.02²)
//! with a ChaCha8 generator seeded by [`ModelConfig::seed`]; biases start at
//! zero and layer-norm gains at one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::tokenizer::{Tokenizer, EOS};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("token id {id} at position {pos} outside vocabulary of {vocab}")]
    TokenOutOfRange { pos: usize, id: usize, vocab: usize },
    #[error("expected {expected} parameter tensors, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("parameter {name}: expected shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut specs = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ff.w1"), vec![d, f]),
                (p("ff.b1"), vec![f]),
                (p("ff.w2"), vec![f, d]),
                (p("ff.b2"), vec![d]),
            ]);
        }
        specs.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, v]),
            ("head.b".to_string(), vec![v]),
        ]);
        specs
    }
}

const PER_LAYER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLM {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl TransformerLM {
    /// Seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_specs() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a model from stored tensors, checking count and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(ModelError::ParamCount {
                expected: specs.len(),
                actual: params.len(),
            });
        }
        for ((name, shape), t) in specs.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            names: specs.into_iter().map(|(n, _)| n).collect(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some((pos, &id)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &id)| id >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                pos,
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Next-token logits `[tokens.len(), vocab_size]` using parameters
    /// previously bound on `tape` by [`Self::bind`] or [`Self::bind_frozen`].
    pub fn forward(&self, tape: &mut Tape, p: &[Var], tokens: &[usize]) -> Result<Var, ModelError> {
        self.forward_inner(tape, p, tokens, None)
    }

    /// Which feed-forward pre-activations are positive, layer by layer, for
    /// `tokens`. Two parameter settings with equal patterns lie on the same
    /// smooth piece of the network.
    pub fn relu_pattern(&self, tokens: &[usize]) -> Result<Vec<bool>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let mut pattern = Vec::new();
        self.forward_inner(&mut tape, &p, tokens, Some(&mut pattern))?;
        Ok(pattern)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        p: &[Var],
        tokens: &[usize],
        mut pattern: Option<&mut Vec<bool>>,
    ) -> Result<Var, ModelError> {
        self.check_tokens(tokens)?;
        if p.len() != self.params.len() {
            return Err(ModelError::ParamCount {
                expected: self.params.len(),
                actual: p.len(),
            });
        }
        let cfg = &self.config;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.gather_rows(p[0], tokens)?;
        let pos = tape.gather_rows(p[1], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        for l in 0..cfg.n_layers {
            let w = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let h = tape.layer_norm(x, w[0], w[1])?;
            let q = linear(tape, h, w[2], w[3])?;
            let k = linear(tape, h, w[4], w[5])?;
            let v = linear(tape, h, w[6], w[7])?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let start = head * cfg.head_dim();
                let qh = tape.slice_cols(q, start, cfg.head_dim())?;
                let kh = tape.slice_cols(k, start, cfg.head_dim())?;
                let vh = tape.slice_cols(v, start, cfg.head_dim())?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.causal_mask(scores)?;
                let attn = tape.softmax(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn_out = linear(tape, merged, w[8], w[9])?;
            x = tape.add(x, attn_out)?;

            let h = tape.layer_norm(x, w[10], w[11])?;
            let f = linear(tape, h, w[12], w[13])?;
            if let Some(pat) = pattern.as_deref_mut() {
                pat.extend(tape.value(f).data().iter().map(|&v| v > 0.0));
            }
            let f = tape.relu(f)?;
            let f = linear(tape, f, w[14], w[15])?;
            x = tape.add(x, f)?;
        }
        let tail = 2 + cfg.n_layers * PER_LAYER;
        let h = tape.layer_norm(x, p[tail], p[tail + 1])?;
        Ok(linear(tape, h, p[tail + 2], p[tail + 3])?)
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, tokens)?;
        Ok(tape.value(out).clone())
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy completion of `prompt` laid out as `BOS prompt SEP`. Stops at EOS,
/// after `max_new` tokens, or when the context reaches `max_seq_len`.
pub fn generate(
    model: &TransformerLM,
    tokenizer: &Tokenizer,
    prompt: &str,
    max_new: usize,
) -> Result<String, ModelError> {
    if max_new == 0 {
        return Err(ModelError::Config("max_new must be at least 1".into()));
    }
    let mut ids = tokenizer.encode_prompt(prompt);
    let max = model.config().max_seq_len;
    if ids.len() > max {
        return Err(ModelError::TooLong {
            len: ids.len(),
            max,
        });
    }
    let start = ids.len();
    while ids.len() - start < max_new && ids.len() < max {
        let logits = model.logits(&ids)?;
        let next = argmax(logits.row(ids.len() - 1));
        if next == EOS {
            break;
        }
        ids.push(next);
    }
    Ok(tokenizer.decode(&ids[start..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_seq_len: 8,
            seed,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(0);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(0);
        c.max_seq_len = 1;
        assert!(c.validate().is_err());
        let mut c = tiny(0);
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_shape() {
        let m = TransformerLM::new(tiny(1)).unwrap();
        let out = m.logits(&[1, 5, 6]).unwrap();
        assert_eq!(out.shape(), &[3, 12]);
    }

    #[test]
    fn rejects_bad_sequences() {
        let m = TransformerLM::new(tiny(1)).unwrap();
        assert!(matches!(
            m.logits(&[1; 9]),
            Err(ModelError::TooLong { len: 9, max: 8 })
        ));
        assert!(matches!(
            m.logits(&[1, 12]),
            Err(ModelError::TokenOutOfRange { pos: 1, id: 12, .. })
        ));
        assert!(matches!(m.logits(&[]), Err(ModelError::Empty)));
    }

    #[test]
    fn init_is_seeded() {
        let a = TransformerLM::new(tiny(3)).unwrap();
        let b = TransformerLM::new(tiny(3)).unwrap();
        let c = TransformerLM::new(tiny(4)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_statistics() {
        let mut cfg = tiny(9);
        cfg.vocab_size = 200;
        cfg.d_model = 32;
        let m = TransformerLM::new(cfg).unwrap();
        let emb = m.params()[0].data();
        let mean = emb.iter().sum::<f64>() / emb.len() as f64;
        let var = emb.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / emb.len() as f64;
        assert!(mean.abs() < 0.002, "{mean}");
        assert!((var.sqrt() - INIT_STD).abs() < 0.002, "{}", var.sqrt());
        for (name, t) in m.param_names().iter().zip(m.params()) {
            if name.ends_with(".gain") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            } else if t.shape().len() == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = TransformerLM::new(tiny(1)).unwrap();
        let mut params = m.params().to_vec();
        assert!(TransformerLM::from_params(tiny(1), params.clone()).is_ok());
        params[3] = Tensor::zeros(vec![7]).unwrap();
        assert!(matches!(
            TransformerLM::from_params(tiny(1), params.clone()),
            Err(ModelError::ParamShape { .. })
        ));
        params.pop();
        assert!(matches!(
            TransformerLM::from_params(tiny(1), params),
            Err(ModelError::ParamCount { .. })
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn generate_respects_limits() {
        let tok = Tokenizer::build_vocab(&["abcdefg"]).unwrap();
        let mut cfg = tiny(2);
        cfg.vocab_size = tok.vocab_size();
        let m = TransformerLM::new(cfg).unwrap();
        let out = generate(&m, &tok, "ab", 3).unwrap();
        assert!(out.chars().count() <= 3);
        assert!(generate(&m, &tok, "ab", 0).is_err());
        assert!(matches!(
            generate(&m, &tok, "abcdefg", 1),
            Err(ModelError::TooLong { .. })
        ));
    }
}
