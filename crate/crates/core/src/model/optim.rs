//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{Layout, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Optimizer state: step count and first/second moments, laid out like the
/// parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(layout: &Layout, config: AdamWConfig) -> Self {
        let n = layout.total();
        let mut decay = vec![true; n];
        for spec in layout.tensors().iter().filter(|s| s.is_norm_gain()) {
            decay[spec.range()].iter_mut().for_each(|d| *d = false);
        }
        AdamW {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay,
        }
    }

    /// Restore saved moments.
    pub fn with_state(layout: &Layout, config: AdamWConfig, step: u64, m: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        let mut opt = AdamW::new(layout, config);
        if m.len() != opt.m.len() || v.len() != opt.v.len() {
            return Err(Error::Shape(format!(
                "optimizer moments of {} / {} for {} parameters",
                m.len(),
                v.len(),
                opt.m.len()
            )));
        }
        opt.step = step;
        opt.m = m;
        opt.v = v;
        Ok(opt)
    }

    pub fn update(&mut self, params: &mut Parameters<f32>, grads: &[f32], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        adamw_kernel(
            params.data_mut(),
            grads,
            &mut self.m,
            &mut self.v,
            &self.decay,
            KernelConsts {
                lr: lr as f32,
                beta1: c.beta1 as f32,
                beta2: c.beta2 as f32,
                eps: c.eps as f32,
                decay_factor: (1.0 - lr * c.weight_decay) as f32,
                inv_bc1: (1.0 / bc1) as f32,
                inv_sqrt_bc2: (1.0 / bc2.sqrt()) as f32,
            },
        );
        Ok(())
    }
}

struct KernelConsts {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    decay_factor: f32,
    inv_bc1: f32,
    inv_sqrt_bc2: f32,
}

fn adamw_kernel(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], decay: &[bool], k: KernelConsts) {
    for i in 0..p.len() {
        let gi = g[i];
        m[i] = k.beta1 * m[i] + (1.0 - k.beta1) * gi;
        v[i] = k.beta2 * v[i] + (1.0 - k.beta2) * gi * gi;
        let mut x = p[i];
        if decay[i] {
            x *= k.decay_factor;
        }
        let m_hat = m[i] * k.inv_bc1;
        let denom = v[i].sqrt() * k.inv_sqrt_bc2 + k.eps;
        p[i] = x - k.lr * m_hat / denom;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            seq_len: 3,
            init_seed: 5,
            init_scale: 0.5,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = init_model(&small()).unwrap();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(p.layout(), cfg);
        let g = vec![0.0; p.len()];
        for _ in 0..3 {
            opt.update(&mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn single_scalar_step_matches_closed_form() {
        // p = 1, g = 0.5, lr = 0.1, decay 0.1, t = 1:
        // decayed p = 0.99; m_hat = 0.5; v_hat = 0.25; step = 0.1 * 0.5 / (0.5 + 1e-8)
        let mut p = [1.0f32];
        let mut m = [0.0f32];
        let mut v = [0.0f32];
        let c = AdamWConfig::default();
        adamw_kernel(
            &mut p,
            &[0.5],
            &mut m,
            &mut v,
            &[true],
            KernelConsts {
                lr: 0.1,
                beta1: c.beta1 as f32,
                beta2: c.beta2 as f32,
                eps: c.eps as f32,
                decay_factor: 1.0 - 0.1 * 0.1,
                inv_bc1: (1.0 / (1.0 - 0.9)) as f32,
                inv_sqrt_bc2: (1.0 / (1.0f64 - 0.95).sqrt()) as f32,
            },
        );
        let expected = 0.99 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] as f64 - expected).abs() < 1e-6, "{} vs {expected}", p[0]);
        assert!((m[0] - 0.05).abs() < 1e-7);
        assert!((v[0] - 0.0125).abs() < 1e-7);
    }

    #[test]
    fn norm_gains_are_not_decayed() {
        let mut p = init_model(&small()).unwrap();
        let mut opt = AdamW::new(p.layout(), AdamWConfig::default());
        let g = vec![0.0; p.len()];
        opt.update(&mut p, &g, 0.5).unwrap();
        assert!(p.tensor("final_norm_gain").unwrap().iter().all(|&x| x == 1.0));
        let before = init_model(&small()).unwrap();
        let w0 = before.tensor("out_proj").unwrap();
        let w1 = p.tensor("out_proj").unwrap();
        for (a, b) in w0.iter().zip(w1) {
            assert!((b - a * 0.95).abs() < 1e-7);
        }
    }

    #[test]
    fn restored_state_continues_identically() {
        let mut p = init_model(&small()).unwrap();
        let mut opt = AdamW::new(p.layout(), AdamWConfig::default());
        let g1: Vec<f32> = (0..p.len()).map(|i| ((i as f32) * 0.3).sin()).collect();
        let g2: Vec<f32> = (0..p.len()).map(|i| ((i as f32) * 0.7).cos()).collect();
        opt.update(&mut p, &g1, 1e-2).unwrap();
        let mut p_copy = p.clone();
        let mut restored =
            AdamW::with_state(p.layout(), opt.config, opt.step, opt.m.clone(), opt.v.clone()).unwrap();
        opt.update(&mut p, &g2, 1e-2).unwrap();
        restored.update(&mut p_copy, &g2, 1e-2).unwrap();
        assert_eq!(p, p_copy);
        assert_eq!(opt, restored);
    }
}
