//! Decoder-only transformer with hand-written reverse-mode gradients,
//! AdamW, the warmup/cosine schedule, and `RHOC` checkpoints.
//!
//! Architecture: learned token and absolute position embeddings, `n_layers`
//! pre-norm blocks (RMS norm with a gain, causal multi-head attention, GELU
//! MLP of width `4 * d_model`), a final RMS norm, and an untied output
//! projection. Linear layers carry no bias.

mod checkpoint;
mod gradcheck;
mod optim;
mod schedule;
mod scalar;
mod transformer;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, ModelCheckpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use schedule::{default_warmup, lr_schedule};
pub use transformer::{backward, forward_per_token_loss, PerTokenLoss, Workspace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: crate::corpus::Vocabulary::BYTE_LEVEL_SIZE as usize,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            seq_len: 256,
            init_seed: 0,
            init_scale: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if u32::try_from(self.vocab_size).is_err() {
            return Err(Error::Config("model.vocab_size must fit in 32 bits".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("model.init_scale must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.d_model
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, s, f) = (self.vocab_size, self.d_model, self.seq_len, self.mlp_width());
        v * d + s * d + self.n_layers * (4 * d * d + 2 * d * f + 2 * d) + d + d * v
    }
}

/// Where one named tensor lives in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Norm gains are one-dimensional and exempt from weight decay.
    pub fn is_norm_gain(&self) -> bool {
        self.name.ends_with("_gain")
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_in: usize,
    pub w_out: usize,
}

/// Tensor names, shapes, and offsets derived from a config.
#[derive(Debug, Clone)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) final_norm: usize,
    pub(crate) out_proj: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, s, f) = (cfg.vocab_size, cfg.d_model, cfg.seq_len, cfg.mlp_width());
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let at = offset;
            offset += shape.iter().product::<usize>();
            tensors.push(TensorSpec { name, shape, offset: at });
            at
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![s, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            layers.push(LayerOffsets {
                attn_norm: push(format!("layer{l}.attn_norm_gain"), vec![d]),
                wq: push(format!("layer{l}.attn_q"), vec![d, d]),
                wk: push(format!("layer{l}.attn_k"), vec![d, d]),
                wv: push(format!("layer{l}.attn_v"), vec![d, d]),
                wo: push(format!("layer{l}.attn_o"), vec![d, d]),
                mlp_norm: push(format!("layer{l}.mlp_norm_gain"), vec![d]),
                w_in: push(format!("layer{l}.mlp_in"), vec![d, f]),
                w_out: push(format!("layer{l}.mlp_out"), vec![f, d]),
            });
        }
        let final_norm = push("final_norm_gain".into(), vec![d]);
        let out_proj = push("out_proj".into(), vec![d, v]);
        Layout {
            tensors,
            total: offset,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            out_proj,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Model parameters in one flat buffer, addressed through a [`Layout`].
#[derive(Debug, Clone)]
pub struct Parameters<T = f32> {
    config: ModelConfig,
    layout: Layout,
    data: Vec<T>,
}

impl<T: Scalar> PartialEq for Parameters<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl<T: Scalar> Parameters<T> {
    /// Seeded Gaussian init with standard deviation `init_scale`; norm gains
    /// start at exactly 1. The draw happens in `f64` and is rounded, so the
    /// `f32` and `f64` instantiations share the same underlying values.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0, config.init_scale).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = vec![T::zero(); layout.total()];
        for spec in layout.tensors() {
            let slot = &mut data[spec.range()];
            if spec.is_norm_gain() {
                slot.iter_mut().for_each(|v| *v = T::one());
            } else {
                slot.iter_mut().for_each(|v| *v = T::from_f64(normal.sample(&mut rng)));
            }
        }
        Ok(Parameters {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn from_data(config: &ModelConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if data.len() != layout.total() {
            return Err(Error::Shape(format!(
                "config needs {} parameters, got {}",
                layout.total(),
                data.len()
            )));
        }
        Ok(Parameters {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.data[range])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Initialize single-precision training parameters.
pub fn init_model(config: &ModelConfig) -> Result<Parameters<f32>> {
    Parameters::init(config)
}
