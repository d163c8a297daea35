//! The shared training loop for the selective and the causal-LM objective.
//!
//! Each step runs the model on one packed batch, builds per-token weights
//! (the selection mask for the selective objective, every eligible target for
//! causal LM), backpropagates the weighted mean loss, and takes an AdamW step
//! at the scheduled learning rate. Batches are visited in a seeded shuffled
//! order that is reshuffled every epoch.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::{CheckpointRecord, StepRecord, TrainRunLog};
use super::{excess_loss, select_topk_eligible, SelectionMask};
use crate::corpus::{PackPlan, SpanLabel, TokenStream};
use crate::error::{Error, Result};
use crate::model::{
    default_warmup, lr_schedule, save_checkpoint, AdamW, AdamWConfig, ModelCheckpoint, Parameters, Workspace,
};
use crate::reference::{eval_stream, ScoreFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Loss on the top-k excess-loss tokens of each batch.
    Slm,
    /// Loss on every token.
    Clm,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Slm => "slm",
            Objective::Clm => "clm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "slm" => Ok(Objective::Slm),
            "clm" => Ok(Objective::Clm),
            other => Err(Error::Config(format!("unknown objective `{other}` (expected slm or clm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub select_ratio: f64,
    pub peak_lr: f64,
    pub total_tokens: u64,
    pub batch_rows: usize,
    pub seq_len: usize,
    /// Checkpoint interval; defaults to a twentieth of the budget.
    pub checkpoint_every_tokens: Option<u64>,
    pub seed: u64,
    /// Linear warmup length; defaults to 2% of the steps.
    pub warmup_steps: Option<usize>,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Slm,
            select_ratio: 0.6,
            peak_lr: 1e-3,
            total_tokens: 25_000_000,
            batch_rows: 16,
            seq_len: 256,
            checkpoint_every_tokens: None,
            seed: 0,
            warmup_steps: None,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.select_ratio > 0.0 && self.select_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "train.select_ratio must be in (0, 1], got {}",
                self.select_ratio
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config("train.peak_lr must be positive".into()));
        }
        if self.batch_rows == 0 {
            return Err(Error::Config("train.batch_rows must be positive".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("train.seq_len must be at least 2".into()));
        }
        if self.checkpoint_every_tokens == Some(0) {
            return Err(Error::Config("train.checkpoint_every_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_rows * self.seq_len) as u64
    }

    pub fn total_steps(&self) -> usize {
        self.total_tokens.div_ceil(self.tokens_per_step()) as usize
    }

    pub fn checkpoint_interval(&self) -> u64 {
        self.checkpoint_every_tokens
            .unwrap_or(self.total_tokens / 20)
            .max(self.tokens_per_step())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or_else(|| default_warmup(self.total_steps()))
    }
}

/// Held-out stream evaluated at every checkpoint.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub stream: TokenStream,
    pub seq_len: usize,
    pub batch_rows: usize,
}

impl ValidationSet {
    pub fn new(stream: TokenStream, seq_len: usize) -> Self {
        ValidationSet {
            stream,
            seq_len,
            batch_rows: 16,
        }
    }

    /// Mean loss and next-token accuracy over eligible targets.
    pub fn evaluate(&self, params: &Parameters<f32>) -> Result<(f64, f64)> {
        let e = eval_stream(params, &self.stream, self.seq_len, self.batch_rows)?;
        Ok((e.mean_loss(), e.accuracy()))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Final parameters with optimizer state.
    pub final_checkpoint: ModelCheckpoint,
    /// Weights-only snapshots in training order, starting with the
    /// initialization and ending with the final step.
    pub checkpoints: Vec<ModelCheckpoint>,
    pub log: TrainRunLog,
}

impl TrainOutput {
    /// The result of a zero-step run.
    pub fn untrained(init: &Parameters<f32>, config: &TrainConfig) -> Self {
        let ckpt = ModelCheckpoint::new(init.clone());
        TrainOutput {
            final_checkpoint: ckpt.clone(),
            checkpoints: vec![ckpt],
            log: TrainRunLog::new(config.objective, config.select_ratio),
        }
    }
}

fn checkpoint_file(step: u64) -> String {
    format!("ckpt_{step:07}.rhoc")
}

struct Outputs<'a> {
    dir: Option<&'a Path>,
    validation: Option<&'a ValidationSet>,
}

impl Outputs<'_> {
    fn record(&self, ckpt: &ModelCheckpoint, log: &mut TrainRunLog) -> Result<()> {
        let (val_loss, val_acc) = match self.validation {
            Some(v) => {
                let (l, a) = v.evaluate(&ckpt.params)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let file = match self.dir {
            Some(dir) => {
                let name = checkpoint_file(ckpt.step);
                save_checkpoint(dir.join(&name), &ckpt.weights_only())?;
                Some(name)
            }
            None => None,
        };
        log.checkpoints.push(CheckpointRecord {
            step: ckpt.step,
            tokens_seen: ckpt.tokens_seen,
            val_loss,
            val_acc,
            params_hash: ckpt.params_hash().to_hex(),
            file,
        });
        Ok(())
    }
}

/// Train `init` on `stream`. See [`train_with_progress`].
pub fn train(
    init: &Parameters<f32>,
    stream: &TokenStream,
    scores: Option<&ScoreFile>,
    config: &TrainConfig,
    validation: Option<&ValidationSet>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    train_with_progress(init, stream, scores, config, validation, out_dir, &mut |_| {})
}

/// Train `init` on `stream` for `config.total_tokens` tokens (rounded up to
/// whole steps). The selective objective needs `scores` computed for this
/// exact stream and `seq_len`. When `out_dir` is given, weights-only
/// checkpoints, `final.rhoc`, `train_log.tsv` and `checkpoints.tsv` are
/// written there; on divergence the last good parameters are kept as
/// `last_good.rhoc` and [`Error::Diverged`] is returned.
pub fn train_with_progress(
    init: &Parameters<f32>,
    stream: &TokenStream,
    scores: Option<&ScoreFile>,
    config: &TrainConfig,
    validation: Option<&ValidationSet>,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    let model_vocab = init.config().vocab_size as u32;
    if model_vocab != stream.vocab_size() {
        return Err(Error::VocabMismatch {
            left: model_vocab,
            right: stream.vocab_size(),
        });
    }
    let ref_losses = match (config.objective, scores) {
        (Objective::Slm, None) => {
            return Err(Error::Config("the slm objective needs reference scores".into()));
        }
        (Objective::Slm, Some(s)) => {
            s.check_alignment(stream, config.seq_len)?;
            Some(&s.losses[..])
        }
        (Objective::Clm, _) => None,
    };
    let plan = PackPlan::new(stream.len(), config.seq_len, config.batch_rows)?;
    if plan.full_batches() == 0 {
        return Err(Error::StreamTooShort {
            len: stream.len(),
            needed: config.batch_rows * config.seq_len + 1,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let total_steps = config.total_steps();
    let warmup = config.warmup();
    let interval = config.checkpoint_interval();
    let per_step = config.tokens_per_step();
    let outputs = Outputs {
        dir: out_dir,
        validation,
    };

    let mut params = init.clone();
    let mut opt = AdamW::new(params.layout(), config.optimizer);
    let mut ws = Workspace::<f32>::new();
    let mut grads = vec![0.0f32; params.len()];
    let mut weights = Vec::new();
    let mut log = TrainRunLog::new(config.objective, config.select_ratio);
    let mut snapshots = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut tokens_seen = 0u64;

    let snapshot = |params: &Parameters<f32>, step: usize, tokens_seen: u64| ModelCheckpoint {
        params: params.clone(),
        optimizer: None,
        step: step as u64,
        tokens_seen,
    };
    let initial = snapshot(&params, 0, 0);
    outputs.record(&initial, &mut log)?;
    snapshots.push(initial);

    for step in 1..=total_steps {
        if order.is_empty() {
            order = (0..plan.full_batches()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let batch = plan.batch(stream, order.pop().expect("refilled above"));
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                last_good_step: step - 1,
            },
            other => other,
        };

        let losses = match ws.forward(&params, &batch) {
            Ok(l) => l.to_vec(),
            Err(e) => return Err(abort(diverged(e), &params, step, tokens_seen, out_dir, &log)),
        };
        let eligible = batch.eligible();
        let mask = match ref_losses {
            Some(r) => {
                let start = batch.score_index(0);
                let excess = excess_loss(&losses, &r[start..start + batch.len()])?;
                select_topk_eligible(&excess, &eligible, config.select_ratio)?
            }
            None => {
                let count = eligible.iter().filter(|&&e| e).count();
                let mut m = SelectionMask::all(eligible.len());
                m.flags = eligible.clone();
                m.selected_count = count;
                m
            }
        };
        weights.clear();
        weights.extend(mask.flags.iter().map(|&f| if f { 1.0f32 } else { 0.0 }));
        if let Err(e) = ws.backward(&params, &weights, &mut grads) {
            return Err(abort(diverged(e), &params, step, tokens_seen, out_dir, &log));
        }
        let lr = lr_schedule(step, total_steps, config.peak_lr, warmup);
        opt.update(&mut params, &grads, lr)?;
        let prev_tokens = tokens_seen;
        tokens_seen += per_step;

        let record = step_record(step, lr, tokens_seen, &losses, &eligible, &mask, config.objective, stream, &batch);
        progress(&record);
        log.steps.push(record);

        if tokens_seen / interval > prev_tokens / interval || step == total_steps {
            let snap = snapshot(&params, step, tokens_seen);
            outputs.record(&snap, &mut log)?;
            snapshots.push(snap);
        }
    }

    let final_checkpoint = ModelCheckpoint {
        params,
        optimizer: Some(opt),
        step: total_steps as u64,
        tokens_seen,
    };
    if let Some(dir) = out_dir {
        save_checkpoint(dir.join("final.rhoc"), &final_checkpoint)?;
        log.write(dir.join("train_log.tsv"), dir.join("checkpoints.tsv"))?;
    }
    Ok(TrainOutput {
        final_checkpoint,
        checkpoints: snapshots,
        log,
    })
}

/// Keep the parameters from before the failing step, and the log so far.
fn abort(
    err: Error,
    params: &Parameters<f32>,
    step: usize,
    tokens_seen: u64,
    out_dir: Option<&Path>,
    log: &TrainRunLog,
) -> Error {
    if let (Error::Diverged { .. }, Some(dir)) = (&err, out_dir) {
        let ckpt = ModelCheckpoint {
            params: params.clone(),
            optimizer: None,
            step: step as u64 - 1,
            tokens_seen,
        };
        let path: PathBuf = dir.join("last_good.rhoc");
        if let Err(e) = save_checkpoint(&path, &ckpt).and_then(|_| log.write(dir.join("train_log.tsv"), dir.join("checkpoints.tsv"))) {
            return e;
        }
    }
    err
}

#[allow(clippy::too_many_arguments)]
fn step_record(
    step: usize,
    lr: f64,
    tokens_seen: u64,
    losses: &[f32],
    eligible: &[bool],
    mask: &SelectionMask,
    objective: Objective,
    stream: &TokenStream,
    batch: &crate::corpus::PackedBatch,
) -> StepRecord {
    let (mut sum_all, mut n_all) = (0.0f64, 0usize);
    let (mut sum_sel, mut sum_unsel, mut n_unsel) = (0.0f64, 0.0f64, 0usize);
    let mut clean_sel = 0usize;
    for i in 0..losses.len() {
        if !eligible[i] {
            continue;
        }
        let l = losses[i] as f64;
        sum_all += l;
        n_all += 1;
        if mask.flags[i] {
            sum_sel += l;
            if stream.label_at(batch.target_stream_index(i)) == Some(SpanLabel::Clean) {
                clean_sel += 1;
            }
        } else {
            sum_unsel += l;
            n_unsel += 1;
        }
    }
    let n_sel = mask.selected_count;
    StepRecord {
        step: step as u64,
        lr,
        loss_all: sum_all / n_all.max(1) as f64,
        loss_sel: (objective == Objective::Slm && n_sel > 0).then(|| sum_sel / n_sel as f64),
        loss_unsel: (objective == Objective::Slm && n_unsel > 0).then(|| sum_unsel / n_unsel as f64),
        sel_count: n_sel,
        unsel_count: n_unsel,
        tokens_seen,
        sel_clean_frac: (stream.labels().is_some() && n_sel > 0).then(|| clean_sel as f64 / n_sel as f64),
    }
}
