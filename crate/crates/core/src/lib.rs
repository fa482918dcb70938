//! Severity-weighted cross-entropy fine-tuning for small autoregressive
//! language models.
//!
//! Each training instance carries a probability distribution over three
//! severity classes (non-critical, neutral, critical). Its token-level
//! negative log-likelihood, averaged over answer tokens, is scaled by
//! `w = alpha * p_nc + beta * p_n + gamma * p_c` before the batch mean.
//!
//! ```
//! use sevloss::{compute_weight, SeverityDistribution, WeightConfig};
//!
//! let d = SeverityDistribution::new(0.32, 0.32, 0.36).unwrap();
//! let w = compute_weight(&d, &WeightConfig::balanced());
//! assert!((w - 1.02).abs() < 1e-12);
//! ```

pub mod checkpoint;
pub mod dataset;
pub mod loss;
pub mod model;
pub mod optim;
pub mod severity;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use dataset::{ComplaintRecord, DatasetError};
pub use loss::{batch_loss, severity_weighted_loss, LossBreakdown, LossInstance};
pub use model::{generate, ModelConfig, TransformerLM};
pub use severity::{
    compute_weight, SeverityClass, SeverityDistribution, WeightConfig, Weighting,
};
pub use tensor::{Tape, Tensor, Var};
pub use tokenizer::Tokenizer;
pub use trainer::{evaluate, gradcheck, train, EvalReport, History, TrainConfig};
