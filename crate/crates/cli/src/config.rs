//! Run configuration: a TOML file merged with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sevloss::dataset::DEFAULT_SPLIT;
use sevloss::optim::OptimizerKind;
use sevloss::{ModelConfig, TrainConfig, WeightConfig, Weighting};

/// A weighting written as a name (`"balanced"`, `"uniform-ce"`), an
/// `"a,b,c"` string, or an `[a, b, c]` array.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum WeightsSpec {
    Text(String),
    Triple([f64; 3]),
}

impl WeightsSpec {
    pub fn resolve(&self) -> Result<Weighting> {
        match self {
            Self::Text(s) => Weighting::from_str(s).with_context(|| format!("weights {s:?}")),
            Self::Triple([a, b, c]) => Ok(Weighting::Severity(WeightConfig::new(*a, *b, *c)?)),
        }
    }
}

impl Default for WeightsSpec {
    fn default() -> Self {
        Self::Text("uniform-ce".into())
    }
}

/// `grad_clip_norm = 1.0` or `grad_clip_norm = "none"`.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum ClipSpec {
    Norm(f64),
    Off(String),
}

impl ClipSpec {
    fn resolve(&self) -> Result<Option<f64>> {
        match self {
            Self::Norm(v) => Ok(Some(*v)),
            Self::Off(s) if s == "none" => Ok(None),
            Self::Off(s) => bail!("grad_clip_norm must be a number or \"none\", got {s:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training records (JSONL). Exclusive with `synth_sizes`.
    pub train: Option<PathBuf>,
    /// Generate a synthetic corpus with these class sizes from the run seed.
    pub synth_sizes: Option<[usize; 3]>,
    /// Validation records. When absent, `train` is split by `split`.
    pub valid: Option<PathBuf>,
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: None,
            synth_sizes: None,
            valid: None,
            split: DEFAULT_SPLIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_seq_len: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: ClipSpec,
    pub eval_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            grad_clip_norm: ClipSpec::Norm(1.0),
            eval_every: t.eval_every,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            checkpoint: "model.ckpt".into(),
            history: "history.jsonl".into(),
        }
    }
}

/// Everything a training run needs. Paths in a file are relative to the
/// file's directory.
#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub weights: WeightsSpec,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub weights: Option<String>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub eval_every: Option<usize>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg =
            Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.data.train);
        rebase(base, &mut cfg.data.valid);
        for p in [&mut cfg.output.checkpoint, &mut cfg.output.history] {
            let mut o = Some(std::mem::take(p));
            rebase(base, &mut o);
            *p = o.expect("set above");
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.weights {
            self.weights = WeightsSpec::Text(v.clone());
        }
        if let Some(v) = o.steps {
            self.train.steps = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.eval_every {
            self.train.eval_every = v;
        }
        if let Some(v) = &o.train {
            self.data.train = Some(v.clone());
            self.data.synth_sizes = None;
        }
        if let Some(v) = &o.valid {
            self.data.valid = Some(v.clone());
        }
        if let Some(v) = &o.checkpoint {
            self.output.checkpoint = v.clone();
        }
        if let Some(v) = &o.history {
            self.output.history = v.clone();
        }
    }

    /// Validates every field and produces the typed configs.
    pub fn resolve(&self) -> Result<Resolved> {
        match (&self.data.train, &self.data.synth_sizes) {
            (Some(_), Some(_)) => bail!("data.train and data.synth_sizes are mutually exclusive"),
            (None, None) => bail!("one of data.train or data.synth_sizes is required"),
            _ => {}
        }
        let weighting = self.weights.resolve()?;
        let t = &self.train;
        let train = TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            grad_clip_norm: t.grad_clip_norm.resolve()?,
            eval_every: t.eval_every,
            seed: self.seed,
            weighting,
            optimizer: t.optimizer,
        };
        train.validate()?;
        let m = &self.model;
        // Vocabulary size is fixed later by the tokenizer; 1 passes validation.
        let model = ModelConfig {
            vocab_size: 1,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
            seed: self.seed,
        };
        model.validate()?;
        if self.data.split.iter().any(|f| !(*f >= 0.0)) || self.data.split[0] <= 0.0 {
            bail!("data.split {:?} must be non-negative with a positive train share", self.data.split);
        }
        Ok(Resolved { train, model })
    }
}

/// Typed view of a validated [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl fmt::Display for Resolved {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.train;
        let m = &self.model;
        match &t.weighting {
            Weighting::UniformCe => writeln!(f, "weights = \"uniform-ce\"")?,
            Weighting::Severity(c) => {
                writeln!(f, "weights = \"{}\"", c.name.as_deref().unwrap_or("custom"))?;
                writeln!(f, "alpha = {:?}", c.alpha)?;
                writeln!(f, "beta = {:?}", c.beta)?;
                writeln!(f, "gamma = {:?}", c.gamma)?;
            }
        }
        writeln!(f, "seed = {}", t.seed)?;
        writeln!(f, "steps = {}", t.steps)?;
        writeln!(f, "batch_size = {}", t.batch_size)?;
        writeln!(f, "learning_rate = {:?}", t.learning_rate)?;
        let opt = serde_json::to_string(&t.optimizer).map_err(|_| fmt::Error)?;
        writeln!(f, "optimizer = {opt}")?;
        match t.grad_clip_norm {
            Some(c) => writeln!(f, "grad_clip_norm = {c:?}")?,
            None => writeln!(f, "grad_clip_norm = \"none\"")?,
        }
        write!(
            f,
            "model = {{ d_model = {}, n_heads = {}, n_layers = {}, d_ff = {}, max_seq_len = {} }}",
            m.d_model, m.n_heads, m.n_layers, m.d_ff, m.max_seq_len
        )
    }
}
