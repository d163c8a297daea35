//! Central finite-difference check of the analytic gradients, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Parameters, Workspace};
use crate::corpus::PackedBatch;
use crate::error::Result;

const STEP: f64 = 1e-5;
/// Below this magnitude both gradients are treated as zero.
const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub n_params: usize,
}

impl ModelConfig {
    /// A 1,832-parameter model for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            seq_len: 8,
            init_seed: 0,
            init_scale: 0.1,
        }
    }
}

/// Check every parameter of a freshly initialized model on one random batch.
pub fn gradient_check(config: &ModelConfig) -> Result<GradCheckReport> {
    gradient_check_with(config, config.init_seed.wrapping_add(1), |_| {})
}

/// Like [`gradient_check`], with an explicit batch seed and a hook that may
/// tamper with the analytic gradient before comparison.
pub fn gradient_check_with(
    config: &ModelConfig,
    batch_seed: u64,
    tamper: impl FnOnce(&mut [f64]),
) -> Result<GradCheckReport> {
    let mut params = Parameters::<f64>::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    let rows = 2;
    let seq = config.seq_len;
    let v = config.vocab_size as u32;
    let inputs: Vec<u32> = (0..rows * seq).map(|_| rng.gen_range(0..v)).collect();
    let targets: Vec<u32> = (0..rows * seq).map(|_| rng.gen_range(0..v)).collect();
    // Mixed weights, including zeros, exercise the normalization.
    let weights: Vec<f64> = (0..rows * seq).map(|_| [0.0, 0.5, 1.0, 2.0][rng.gen_range(0..4)]).collect();
    let batch = PackedBatch::from_rows(rows, seq, inputs, targets)?;

    let mut ws = Workspace::<f64>::new();
    ws.forward(&params, &batch)?;
    let mut grads = vec![0.0; params.len()];
    ws.backward(&params, &weights, &mut grads)?;
    tamper(&mut grads);

    let active = weights.iter().filter(|&&w| w > 0.0).count().max(1) as f64;
    let mut objective = |p: &Parameters<f64>| -> Result<f64> {
        let losses = ws.forward(p, &batch)?;
        Ok(losses.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() / active)
    };

    let mut worst = (0.0f64, 0usize);
    for i in 0..params.len() {
        let orig = params.data()[i];
        params.data_mut()[i] = orig + STEP;
        let up = objective(&params)?;
        params.data_mut()[i] = orig - STEP;
        let down = objective(&params)?;
        params.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads[i];
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < ABS_FLOOR {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        };
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    let worst_tensor = params
        .layout()
        .tensors()
        .iter()
        .find(|s| s.range().contains(&worst.1))
        .map(|s| s.name.clone())
        .unwrap_or_default();
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_tensor,
        worst_index: worst.1,
        n_params: params.len(),
    })
}
