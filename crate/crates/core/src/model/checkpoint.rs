//! `RHOC` checkpoint files.
//!
//! ```text
//! "RHOC" | version u32 | header_len u64 | header (UTF-8 JSON) | f32 LE payload
//! ```
//! The header carries the model config, training counters, optional
//! optimizer settings, and one `{name, shape, offset}` entry per tensor with
//! `offset` in bytes from the start of the payload. Parameters come first;
//! AdamW moments follow as `adam_m.<name>` / `adam_v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, Layout, ModelConfig, Parameters};
use crate::binio::{put_f32s, put_u32, put_u64, write_atomic, Digest32, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RHOC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: Parameters<f32>,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub tokens_seen: u64,
}

impl ModelCheckpoint {
    pub fn new(params: Parameters<f32>) -> Self {
        ModelCheckpoint {
            params,
            optimizer: None,
            step: 0,
            tokens_seen: 0,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    /// Copy without optimizer moments.
    pub fn weights_only(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            params: self.params.clone(),
            optimizer: None,
            step: self.step,
            tokens_seen: self.tokens_seen,
        }
    }

    /// Digest of the config and parameter values only: identifies the
    /// function the model computes regardless of optimizer state or counters.
    pub fn params_hash(&self) -> Digest32 {
        let mut buf = serde_json::to_vec(self.config()).expect("config serializes");
        put_f32s(&mut buf, self.params.data());
        Digest32::of(&buf)
    }

    /// Digest of the full serialized checkpoint.
    pub fn file_hash(&self) -> Digest32 {
        Digest32::of(&checkpoint_to_bytes(self))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
    tokens_seen: u64,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    kind: String,
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn tensor_entries(layout: &Layout, with_optimizer: bool) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    let mut byte = 0u64;
    let prefixes: &[&str] = if with_optimizer { &["", "adam_m.", "adam_v."] } else { &[""] };
    for prefix in prefixes {
        for spec in layout.tensors() {
            out.push(TensorEntry {
                name: format!("{prefix}{}", spec.name),
                shape: spec.shape.clone(),
                offset: byte,
            });
            byte += spec.len() as u64 * 4;
        }
    }
    out
}

pub fn checkpoint_to_bytes(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let layout = ckpt.params.layout();
    let header = Header {
        config: ckpt.config().clone(),
        step: ckpt.step,
        tokens_seen: ckpt.tokens_seen,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            kind: "adamw".into(),
            config: o.config,
            step: o.step,
        }),
        tensors: tensor_entries(layout, ckpt.optimizer.is_some()),
    };
    let header = serde_json::to_vec_pretty(&header).expect("header serializes");
    let n_floats = layout.total() * if ckpt.optimizer.is_some() { 3 } else { 1 };
    let mut out = Vec::with_capacity(16 + header.len() + n_floats * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    put_f32s(&mut out, ckpt.params.data());
    if let Some(o) = &ckpt.optimizer {
        put_f32s(&mut out, &o.m);
        put_f32s(&mut out, &o.v);
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let header_len = r.count(1)?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Malformed(format!("checkpoint header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| Error::Malformed(format!("checkpoint config: {e}")))?;
    let layout = Layout::new(&header.config);
    let expected = tensor_entries(&layout, header.optimizer.is_some());
    if header.tensors != expected {
        return Err(Error::Malformed(
            "checkpoint tensor table does not match its model config".into(),
        ));
    }
    let n = layout.total();
    let params = Parameters::from_data(&header.config, r.f32_vec(n)?)?;
    let optimizer = match header.optimizer {
        None => None,
        Some(h) => {
            if h.kind != "adamw" {
                return Err(Error::Malformed(format!("unknown optimizer kind `{}`", h.kind)));
            }
            let m = r.f32_vec(n)?;
            let v = r.f32_vec(n)?;
            Some(AdamW::with_state(&layout, h.config, h.step, m, v)?)
        }
    };
    r.expect_end()?;
    Ok(ModelCheckpoint {
        params,
        optimizer,
        step: header.step,
        tokens_seen: header.tokens_seen,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &ModelCheckpoint) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_to_bytes(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
