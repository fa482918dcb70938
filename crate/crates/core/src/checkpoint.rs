//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` seed, `u64` header
//! length, JSON header, then every parameter followed by every first and
//! second moment, all as little-endian `f64` in header order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, TransformerLM};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

pub const MAGIC: &[u8; 8] = b"SEVLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 1 << 26;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint header is corrupt: {0}")]
    Header(String),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("trailing bytes after checkpoint payload")]
    Trailing,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Self::Truncated
        } else {
            Self::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tokenizer: Tokenizer,
    params: Vec<(String, Vec<usize>)>,
    optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub model: TransformerLM,
    pub tokenizer: Tokenizer,
    pub optimizer: OptimizerState,
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor, CheckpointError> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape.to_vec(), data).map_err(|e| CheckpointError::Header(e.to_string()))
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let model = &ckpt.model;
    let header = Header {
        model: model.config().clone(),
        tokenizer: ckpt.tokenizer.clone(),
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(n, p)| (n.clone(), p.shape().to_vec()))
            .collect(),
        optimizer_step: ckpt.optimizer.step,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&ckpt.seed.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in model
        .params()
        .iter()
        .chain(&ckpt.optimizer.m)
        .chain(&ckpt.optimizer.v)
    {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8);
    if len > MAX_HEADER_BYTES {
        return Err(CheckpointError::Header(format!("header length {len} too large")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    header.model.validate()?;
    if header.params != header.model.param_specs() {
        return Err(CheckpointError::Header(
            "parameter list does not match model config".into(),
        ));
    }
    if header.tokenizer.vocab_size() != header.model.vocab_size {
        return Err(CheckpointError::Header(format!(
            "tokenizer has {} symbols but model vocabulary is {}",
            header.tokenizer.vocab_size(),
            header.model.vocab_size
        )));
    }
    let read_all = |r: &mut R| -> Result<Vec<Tensor>, CheckpointError> {
        header.params.iter().map(|(_, s)| read_tensor(r, s)).collect()
    };
    let params = read_all(&mut r)?;
    let m = read_all(&mut r)?;
    let v = read_all(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CheckpointError::Trailing);
    }
    let model = TransformerLM::from_params(header.model, params)?;
    Ok(Checkpoint {
        seed,
        model,
        tokenizer: header.tokenizer,
        optimizer: OptimizerState {
            step: header.optimizer_step,
            m,
            v,
        },
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
