//! Forward pass with activation caching and the matching reverse pass.
//!
//! All activations are row-major `[rows * seq_len, width]`. Attention
//! probabilities are kept per `(row, head)` as dense `seq_len x seq_len`
//! blocks with zeros above the diagonal.

use super::scalar::{gemm, matmul, matmul_at, matmul_bt, Scalar, View};
use super::{LayerOffsets, Parameters};
use crate::corpus::PackedBatch;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Per-position negative log-likelihood in nats, aligned with the batch targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PerTokenLoss<T = f32> {
    pub rows: usize,
    pub seq_len: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> PerTokenLoss<T> {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v.as_f64()).sum::<f64>() / self.values.len() as f64
    }

    pub fn at(&self, row: usize, pos: usize) -> T {
        self.values[row * self.seq_len + pos]
    }
}

#[derive(Debug, Default, Clone)]
struct LayerCache<T> {
    n1: Vec<T>,
    r1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    att: Vec<T>,
    o: Vec<T>,
    x_mid: Vec<T>,
    n2: Vec<T>,
    r2: Vec<T>,
    h2: Vec<T>,
    u: Vec<T>,
    th: Vec<T>,
    act: Vec<T>,
}

#[derive(Debug, Default, Clone)]
struct Scratch<T> {
    dx: Vec<T>,
    dh: Vec<T>,
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
    dout: Vec<T>,
    dmlp: Vec<T>,
    dlogits: Vec<T>,
    dp: Vec<T>,
}

/// Reusable activation tape. `forward` records everything `backward`
/// needs; buffers are kept between calls so a training loop allocates once.
#[derive(Debug, Default, Clone)]
pub struct Workspace<T = f32> {
    rows: usize,
    seq: usize,
    inputs: Vec<u32>,
    targets: Vec<u32>,
    resid: Vec<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    nf: Vec<T>,
    rf: Vec<T>,
    hf: Vec<T>,
    probs: Vec<T>,
    losses: Vec<T>,
    scratch: Scratch<T>,
    recorded: bool,
}

fn resize<T: Scalar>(v: &mut Vec<T>, n: usize) {
    v.resize(n, T::zero());
}

impl<T: Scalar> Workspace<T> {
    pub fn new() -> Self {
        Workspace {
            rows: 0,
            seq: 0,
            inputs: Vec::new(),
            targets: Vec::new(),
            resid: Vec::new(),
            layers: Vec::new(),
            nf: Vec::new(),
            rf: Vec::new(),
            hf: Vec::new(),
            probs: Vec::new(),
            losses: Vec::new(),
            scratch: Scratch::default(),
            recorded: false,
        }
    }

    pub fn forward(&mut self, params: &Parameters<T>, batch: &PackedBatch) -> Result<&[T]> {
        self.forward_raw(params, &batch.inputs, &batch.targets, batch.rows, batch.seq_len)
    }

    /// Run the model on `rows x seq` inputs and return the per-target losses.
    pub fn forward_raw(
        &mut self,
        params: &Parameters<T>,
        inputs: &[u32],
        targets: &[u32],
        rows: usize,
        seq: usize,
    ) -> Result<&[T]> {
        self.recorded = false;
        let cfg = params.config();
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let n = rows * seq;
        if seq == 0 || seq > cfg.seq_len {
            return Err(Error::Shape(format!(
                "batch seq_len {seq} must be in 1..={}",
                cfg.seq_len
            )));
        }
        if inputs.len() != n || targets.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} inputs and targets, got {} and {}",
                inputs.len(),
                targets.len()
            )));
        }
        for (position, &id) in inputs.iter().chain(targets).enumerate() {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange {
                    id,
                    position: position % n.max(1),
                    vocab_size: v as u32,
                });
            }
        }
        self.rows = rows;
        self.seq = seq;
        self.inputs.clear();
        self.inputs.extend_from_slice(inputs);
        self.targets.clear();
        self.targets.extend_from_slice(targets);
        self.allocate(params);

        let w = params.data();
        let lay = params.layout();

        let x0 = &mut self.resid[0];
        for (i, &tok) in inputs.iter().enumerate() {
            let t = i % seq;
            let te = &w[lay.tok_emb + tok as usize * d..][..d];
            let pe = &w[lay.pos_emb + t * d..][..d];
            for ((x, a), b) in x0[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
                *x = *a + *b;
            }
        }

        for l in 0..cfg.n_layers {
            let (before, after) = self.resid.split_at_mut(l + 1);
            layer_forward(
                params,
                &lay.layers[l],
                &before[l],
                &mut after[0],
                &mut self.layers[l],
                rows,
                seq,
            );
        }

        rms_norm(
            &self.resid[cfg.n_layers],
            &w[lay.final_norm..lay.final_norm + d],
            d,
            &mut self.nf,
            &mut self.rf,
            &mut self.hf,
        );
        matmul(&self.hf, &w[lay.out_proj..lay.out_proj + d * v], &mut self.probs, n, d, v, false);
        for i in 0..n {
            let row = &mut self.probs[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for z in row.iter() {
                sum += (*z - max).fast_exp();
            }
            let lse = max + sum.ln();
            let loss = lse - row[targets[i] as usize];
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("loss at row {}, position {}", i / seq, i % seq),
                });
            }
            self.losses[i] = loss.max(T::zero());
            for z in row.iter_mut() {
                *z = (*z - lse).fast_exp();
            }
        }
        self.recorded = true;
        Ok(&self.losses)
    }

    fn allocate(&mut self, params: &Parameters<T>) {
        let cfg = params.config();
        let (d, f, v, h) = (cfg.d_model, cfg.mlp_width(), cfg.vocab_size, cfg.n_heads);
        let n = self.rows * self.seq;
        self.resid.resize_with(cfg.n_layers + 1, Vec::new);
        for r in &mut self.resid {
            resize(r, n * d);
        }
        self.layers.resize_with(cfg.n_layers, LayerCache::default);
        for c in &mut self.layers {
            for buf in [&mut c.n1, &mut c.h1, &mut c.q, &mut c.k, &mut c.v, &mut c.o, &mut c.x_mid, &mut c.n2, &mut c.h2] {
                resize(buf, n * d);
            }
            resize(&mut c.r1, n);
            resize(&mut c.r2, n);
            for buf in [&mut c.u, &mut c.th, &mut c.act] {
                resize(buf, n * f);
            }
            resize(&mut c.att, self.rows * h * self.seq * self.seq);
        }
        resize(&mut self.nf, n * d);
        resize(&mut self.hf, n * d);
        resize(&mut self.rf, n);
        resize(&mut self.probs, n * v);
        resize(&mut self.losses, n);
    }

    pub fn losses(&self) -> &[T] {
        &self.losses
    }

    pub fn per_token_loss(&self) -> PerTokenLoss<T> {
        PerTokenLoss {
            rows: self.rows,
            seq_len: self.seq,
            values: self.losses.clone(),
        }
    }

    /// Predictive distribution at flat position `i` of the last forward pass.
    pub fn probs(&self, i: usize) -> &[T] {
        let v = self.probs.len() / self.losses.len().max(1);
        &self.probs[i * v..(i + 1) * v]
    }

    /// Whether the argmax prediction equals the target, per position.
    pub fn argmax_correct(&self) -> Vec<bool> {
        (0..self.losses.len())
            .map(|i| {
                let p = self.probs(i);
                let mut best = 0;
                for (j, &x) in p.iter().enumerate() {
                    if x > p[best] {
                        best = j;
                    }
                }
                best == self.targets[i] as usize
            })
            .collect()
    }

    /// Gradient of `sum_i w_i * loss_i / max(1, #{w_i > 0})` into `grads`
    /// (overwritten). Weights are constants of the objective.
    pub fn backward(&mut self, params: &Parameters<T>, weights: &[T], grads: &mut [T]) -> Result<()> {
        if !self.recorded {
            return Err(Error::InvalidArgument("backward called without a successful forward pass".into()));
        }
        let n = self.rows * self.seq;
        if weights.len() != n {
            return Err(Error::Shape(format!("{} token weights for {} positions", weights.len(), n)));
        }
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer of {} for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::InvalidArgument(format!("token weight {i} is negative or non-finite")));
        }
        let active = weights.iter().filter(|w| **w > T::zero()).count().max(1);
        let norm = T::from_f64(active as f64);

        let cfg = params.config();
        let (d, f, v) = (cfg.d_model, cfg.mlp_width(), cfg.vocab_size);
        let w = params.data();
        let lay = params.layout();
        grads.iter_mut().for_each(|g| *g = T::zero());

        let sc = &mut self.scratch;
        for buf in [&mut sc.dx, &mut sc.dh, &mut sc.dq, &mut sc.dk, &mut sc.dv, &mut sc.dout] {
            resize(buf, n * d);
        }
        resize(&mut sc.dmlp, n * f);
        resize(&mut sc.dlogits, n * v);
        resize(&mut sc.dp, self.seq * self.seq);

        for i in 0..n {
            let out = &mut sc.dlogits[i * v..(i + 1) * v];
            if weights[i] > T::zero() {
                let c = weights[i] / norm;
                for (o, p) in out.iter_mut().zip(&self.probs[i * v..(i + 1) * v]) {
                    *o = c * *p;
                }
                out[self.targets[i] as usize] -= c;
            } else {
                out.iter_mut().for_each(|o| *o = T::zero());
            }
        }

        let op = lay.out_proj;
        matmul_at(&self.hf, &sc.dlogits, &mut grads[op..op + d * v], d, n, v, false);
        matmul_bt(&sc.dlogits, &w[op..op + d * v], &mut sc.dh, n, v, d, false);
        let fg = lay.final_norm;
        rms_norm_backward(
            &sc.dh,
            &self.nf,
            &self.rf,
            &w[fg..fg + d],
            &mut grads[fg..fg + d],
            &mut sc.dx,
            d,
            false,
        );

        for l in (0..cfg.n_layers).rev() {
            layer_backward(params, &lay.layers[l], &self.layers[l], sc, grads, self.rows, self.seq);
        }

        for (i, &tok) in self.inputs.iter().enumerate() {
            let t = i % self.seq;
            let g = &sc.dx[i * d..(i + 1) * d];
            let te = lay.tok_emb + tok as usize * d;
            for (a, b) in grads[te..te + d].iter_mut().zip(g) {
                *a += *b;
            }
            let pe = lay.pos_emb + t * d;
            for (a, b) in grads[pe..pe + d].iter_mut().zip(g) {
                *a += *b;
            }
        }

        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = lay
                .tensors()
                .iter()
                .find(|s| s.range().contains(&i))
                .map_or("?", |s| s.name.as_str());
            return Err(Error::NonFinite {
                location: format!("gradient of {name} (flat index {i})"),
            });
        }
        Ok(())
    }
}

fn rms_norm<T: Scalar>(x: &[T], gain: &[T], d: usize, n_out: &mut [T], r_out: &mut [T], h_out: &mut [T]) {
    let eps = T::from_f64(NORM_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for (i, xr) in x.chunks_exact(d).enumerate() {
        let ms = xr.iter().map(|&a| a * a).sum::<T>() * inv_d;
        let r = (ms + eps).sqrt().recip();
        r_out[i] = r;
        let nr = &mut n_out[i * d..(i + 1) * d];
        let hr = &mut h_out[i * d..(i + 1) * d];
        for j in 0..d {
            nr[j] = xr[j] * r;
            hr[j] = nr[j] * gain[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn rms_norm_backward<T: Scalar>(
    dy: &[T],
    normed: &[T],
    inv_rms: &[T],
    gain: &[T],
    dgain: &mut [T],
    dx: &mut [T],
    d: usize,
    accumulate: bool,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    for (i, r) in inv_rms.iter().enumerate() {
        let dyr = &dy[i * d..(i + 1) * d];
        let nr = &normed[i * d..(i + 1) * d];
        let mut dot = T::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * nr[j];
            dot += dyr[j] * gain[j] * nr[j];
        }
        let s = dot * inv_d;
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            let g = *r * (dyr[j] * gain[j] - nr[j] * s);
            if accumulate {
                dxr[j] += g;
            } else {
                dxr[j] = g;
            }
        }
    }
}

fn layer_forward<T: Scalar>(
    params: &Parameters<T>,
    off: &LayerOffsets,
    x_in: &[T],
    x_out: &mut [T],
    c: &mut LayerCache<T>,
    rows: usize,
    seq: usize,
) {
    let cfg = params.config();
    let (d, f) = (cfg.d_model, cfg.mlp_width());
    let n = rows * seq;
    let w = params.data();

    rms_norm(x_in, &w[off.attn_norm..off.attn_norm + d], d, &mut c.n1, &mut c.r1, &mut c.h1);
    matmul(&c.h1, &w[off.wq..off.wq + d * d], &mut c.q, n, d, d, false);
    matmul(&c.h1, &w[off.wk..off.wk + d * d], &mut c.k, n, d, d, false);
    matmul(&c.h1, &w[off.wv..off.wv + d * d], &mut c.v, n, d, d, false);
    attention_forward(&c.q, &c.k, &c.v, &mut c.att, &mut c.o, rows, seq, d, cfg.n_heads);
    c.x_mid.copy_from_slice(x_in);
    matmul(&c.o, &w[off.wo..off.wo + d * d], &mut c.x_mid, n, d, d, true);

    rms_norm(&c.x_mid, &w[off.mlp_norm..off.mlp_norm + d], d, &mut c.n2, &mut c.r2, &mut c.h2);
    matmul(&c.h2, &w[off.w_in..off.w_in + d * f], &mut c.u, n, d, f, false);
    let (gc2, ga, half, two) = (
        T::from_f64(2.0 * GELU_C),
        T::from_f64(GELU_A),
        T::from_f64(0.5),
        T::from_f64(2.0),
    );
    for ((u, th), act) in c.u.iter().zip(c.th.iter_mut()).zip(c.act.iter_mut()) {
        // tanh(z) = 1 - 2 / (exp(2z) + 1): much cheaper than libm tanh and
        // exact at both saturation ends.
        let t = T::one() - two / ((gc2 * (*u + ga * *u * *u * *u)).fast_exp() + T::one());
        *th = t;
        *act = half * *u * (T::one() + t);
    }
    x_out.copy_from_slice(&c.x_mid);
    matmul(&c.act, &w[off.w_out..off.w_out + f * d], x_out, n, f, d, true);
}

#[allow(clippy::too_many_arguments)]
fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    att: &mut [T],
    o: &mut [T],
    rows: usize,
    seq: usize,
    d: usize,
    heads: usize,
) {
    let hd = d / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    for b in 0..rows {
        for h in 0..heads {
            let base = b * seq * d + h * hd;
            let a_off = (b * heads + h) * seq * seq;
            let head = View::strided(base, seq, hd, d);
            gemm(scale, q, head, k, head.t(), T::zero(), att, View::dense(a_off, seq, seq));
            for i in 0..seq {
                let row = &mut att[a_off + i * seq..a_off + (i + 1) * seq];
                let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for z in &mut row[..=i] {
                    *z = (*z - max).fast_exp();
                    sum += *z;
                }
                let inv = sum.recip();
                for z in &mut row[..=i] {
                    *z *= inv;
                }
                for z in &mut row[i + 1..] {
                    *z = T::zero();
                }
            }
            gemm(T::one(), att, View::dense(a_off, seq, seq), v, head, T::zero(), o, head);
        }
    }
}

fn layer_backward<T: Scalar>(
    params: &Parameters<T>,
    off: &LayerOffsets,
    c: &LayerCache<T>,
    sc: &mut Scratch<T>,
    grads: &mut [T],
    rows: usize,
    seq: usize,
) {
    let cfg = params.config();
    let (d, f) = (cfg.d_model, cfg.mlp_width());
    let n = rows * seq;
    let w = params.data();

    // sc.dx holds the gradient w.r.t. this block's output.
    matmul_at(&c.act, &sc.dx, &mut grads[off.w_out..off.w_out + f * d], f, n, d, false);
    matmul_bt(&sc.dx, &w[off.w_out..off.w_out + f * d], &mut sc.dmlp, n, d, f, false);
    let (gc, ga, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    let three = T::from_f64(3.0);
    for ((g, u), th) in sc.dmlp.iter_mut().zip(&c.u).zip(&c.th) {
        let u = *u;
        let t = *th;
        let deriv = half * (T::one() + t) + half * u * (T::one() - t * t) * gc * (T::one() + three * ga * u * u);
        *g *= deriv;
    }
    matmul_at(&c.h2, &sc.dmlp, &mut grads[off.w_in..off.w_in + d * f], d, n, f, false);
    matmul_bt(&sc.dmlp, &w[off.w_in..off.w_in + d * f], &mut sc.dh, n, f, d, false);
    {
        let (dg, _) = grads[off.mlp_norm..].split_at_mut(d);
        rms_norm_backward(
            &sc.dh,
            &c.n2,
            &c.r2,
            &w[off.mlp_norm..off.mlp_norm + d],
            dg,
            &mut sc.dx,
            d,
            true,
        );
    }

    // sc.dx now holds the gradient w.r.t. the attention residual sum.
    matmul_at(&c.o, &sc.dx, &mut grads[off.wo..off.wo + d * d], d, n, d, false);
    matmul_bt(&sc.dx, &w[off.wo..off.wo + d * d], &mut sc.dout, n, d, d, false);
    attention_backward(c, sc, rows, seq, d, cfg.n_heads);

    matmul_at(&c.h1, &sc.dq, &mut grads[off.wq..off.wq + d * d], d, n, d, false);
    matmul_at(&c.h1, &sc.dk, &mut grads[off.wk..off.wk + d * d], d, n, d, false);
    matmul_at(&c.h1, &sc.dv, &mut grads[off.wv..off.wv + d * d], d, n, d, false);
    matmul_bt(&sc.dq, &w[off.wq..off.wq + d * d], &mut sc.dh, n, d, d, false);
    matmul_bt(&sc.dk, &w[off.wk..off.wk + d * d], &mut sc.dh, n, d, d, true);
    matmul_bt(&sc.dv, &w[off.wv..off.wv + d * d], &mut sc.dh, n, d, d, true);
    let (dg, _) = grads[off.attn_norm..].split_at_mut(d);
    rms_norm_backward(
        &sc.dh,
        &c.n1,
        &c.r1,
        &w[off.attn_norm..off.attn_norm + d],
        dg,
        &mut sc.dx,
        d,
        true,
    );
}

fn attention_backward<T: Scalar>(c: &LayerCache<T>, sc: &mut Scratch<T>, rows: usize, seq: usize, d: usize, heads: usize) {
    let hd = d / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let sq = View::dense(0, seq, seq);
    for b in 0..rows {
        for h in 0..heads {
            let base = b * seq * d + h * hd;
            let a_off = (b * heads + h) * seq * seq;
            let head = View::strided(base, seq, hd, d);
            let p = View::dense(a_off, seq, seq);
            gemm(T::one(), &sc.dout, head, &c.v, head.t(), T::zero(), &mut sc.dp, sq);
            gemm(T::one(), &c.att, p.t(), &sc.dout, head, T::zero(), &mut sc.dv, head);
            for i in 0..seq {
                let prow = &c.att[a_off + i * seq..a_off + (i + 1) * seq];
                let drow = &mut sc.dp[i * seq..(i + 1) * seq];
                let dot: T = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| *a * *b).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot);
                }
                for z in &mut drow[i + 1..] {
                    *z = T::zero();
                }
            }
            gemm(scale, &sc.dp, sq, &c.k, head, T::zero(), &mut sc.dq, head);
            gemm(scale, &sc.dp, sq.t(), &c.q, head, T::zero(), &mut sc.dk, head);
        }
    }
}

/// Per-token negative log-likelihood of every target in `batch`.
pub fn forward_per_token_loss<T: Scalar>(params: &Parameters<T>, batch: &PackedBatch) -> Result<PerTokenLoss<T>> {
    let mut ws = Workspace::new();
    ws.forward(params, batch)?;
    Ok(ws.per_token_loss())
}

/// Gradient of the weighted, count-normalized token loss.
pub fn backward<T: Scalar>(params: &Parameters<T>, batch: &PackedBatch, token_weights: &[T]) -> Result<Vec<T>> {
    let mut ws = Workspace::new();
    ws.forward(params, batch)?;
    let mut grads = vec![T::zero(); params.len()];
    ws.backward(params, token_weights, &mut grads)?;
    Ok(grads)
}
