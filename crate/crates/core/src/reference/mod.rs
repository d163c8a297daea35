//! Reference-model training and per-token corpus scoring.
//!
//! Scores are computed offline with exactly the packing the trainer uses, so
//! score `i` belongs to flat target position `i` of the packed stream (stream
//! token `i + 1`). The score file records the stream hash and the reference
//! checkpoint hash; loading against a different stream is refused unless
//! forced.
//!
//! ```text
//! "RHOS" | version u32 | stream hash [32] | ref checkpoint hash [32]
//!        | seq_len u32 | token_count u64 | token_count x f32 LE losses
//! ```

use std::path::Path;

use crate::binio::{put_f32s, put_u32, put_u64, write_atomic, Digest32, Reader};
use crate::corpus::{PackPlan, TokenStream};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ModelCheckpoint, Parameters, Workspace};
use crate::slm::{train_with_progress, Objective, StepRecord, TrainConfig, TrainOutput, ValidationSet};

pub const SCORE_MAGIC: &[u8; 4] = b"RHOS";
pub const SCORE_VERSION: u32 = 1;

/// Rows per forward pass while scoring; any value gives identical scores.
pub const SCORE_BATCH_ROWS: usize = 16;

/// Per-token reference losses for one packed stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub stream_hash: Digest32,
    pub ref_checkpoint_hash: Digest32,
    pub seq_len: u32,
    pub losses: Vec<f32>,
}

impl ScoreFile {
    pub fn token_count(&self) -> usize {
        self.losses.len()
    }

    /// Confirm these scores were computed for `stream` packed at `seq_len`.
    pub fn check_alignment(&self, stream: &TokenStream, seq_len: usize) -> Result<()> {
        let found = stream.content_hash();
        if found != self.stream_hash {
            return Err(Error::HashMismatch {
                what: "score provenance stream",
                expected: self.stream_hash.to_hex(),
                found: found.to_hex(),
            });
        }
        self.check_geometry(stream, seq_len)
    }

    fn check_geometry(&self, stream: &TokenStream, seq_len: usize) -> Result<()> {
        if self.seq_len as usize != seq_len {
            return Err(Error::Shape(format!(
                "scores were packed at seq_len {}, training uses {seq_len}",
                self.seq_len
            )));
        }
        let plan = PackPlan::new(stream.len(), seq_len, 1)?;
        if plan.scoreable() != self.token_count() {
            return Err(Error::Shape(format!(
                "stream has {} scoreable positions, score file has {}",
                plan.scoreable(),
                self.token_count()
            )));
        }
        Ok(())
    }
}

pub fn scores_to_bytes(scores: &ScoreFile) -> Vec<u8> {
    let mut buf = Vec::with_capacity(84 + 4 * scores.losses.len());
    buf.extend_from_slice(SCORE_MAGIC);
    put_u32(&mut buf, SCORE_VERSION);
    buf.extend_from_slice(&scores.stream_hash.0);
    buf.extend_from_slice(&scores.ref_checkpoint_hash.0);
    put_u32(&mut buf, scores.seq_len);
    put_u64(&mut buf, scores.losses.len() as u64);
    put_f32s(&mut buf, &scores.losses);
    buf
}

pub fn scores_from_bytes(bytes: &[u8]) -> Result<ScoreFile> {
    let mut r = Reader::new(bytes, "score file");
    r.magic(SCORE_MAGIC)?;
    r.version(SCORE_VERSION)?;
    let stream_hash = r.digest()?;
    let ref_checkpoint_hash = r.digest()?;
    let seq_len = r.u32()?;
    let count = r.count(4)?;
    let losses = r.f32_vec(count)?;
    r.expect_end()?;
    if let Some(i) = losses.iter().position(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Malformed(format!("score {i} is {} (must be finite and >= 0)", losses[i])));
    }
    Ok(ScoreFile {
        stream_hash,
        ref_checkpoint_hash,
        seq_len,
        losses,
    })
}

pub fn write_scores(path: impl AsRef<Path>, scores: &ScoreFile) -> Result<()> {
    write_atomic(path.as_ref(), &scores_to_bytes(scores))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreFile> {
    scores_from_bytes(&std::fs::read(path)?)
}

/// Load scores for `stream`. A provenance hash mismatch is an error unless
/// `force` is set; the packing geometry must match either way.
pub fn read_scores_for(path: impl AsRef<Path>, stream: &TokenStream, seq_len: usize, force: bool) -> Result<ScoreFile> {
    let scores = read_scores(path)?;
    if force {
        scores.check_geometry(stream, seq_len)?;
    } else {
        scores.check_alignment(stream, seq_len)?;
    }
    Ok(scores)
}

/// Per-position results of running a model over a packed stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEval {
    pub losses: Vec<f32>,
    pub correct: Vec<bool>,
    /// False at BOS/PAD targets, which are left out of the means.
    pub eligible: Vec<bool>,
}

impl StreamEval {
    pub fn mean_loss(&self) -> f64 {
        let (sum, n) = self
            .losses
            .iter()
            .zip(&self.eligible)
            .filter(|(_, &e)| e)
            .fold((0.0, 0usize), |(s, n), (&l, _)| (s + l as f64, n + 1));
        sum / n.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        let (hits, n) = self
            .correct
            .iter()
            .zip(&self.eligible)
            .filter(|(_, &e)| e)
            .fold((0usize, 0usize), |(h, n), (&c, _)| (h + c as usize, n + 1));
        hits as f64 / n.max(1) as f64
    }
}

fn check_vocab(params: &Parameters<f32>, stream: &TokenStream) -> Result<()> {
    let model = params.config().vocab_size as u32;
    if model != stream.vocab_size() {
        return Err(Error::VocabMismatch {
            left: model,
            right: stream.vocab_size(),
        });
    }
    Ok(())
}

/// Evaluate every packed target position of `stream`.
pub fn eval_stream(params: &Parameters<f32>, stream: &TokenStream, seq_len: usize, batch_rows: usize) -> Result<StreamEval> {
    check_vocab(params, stream)?;
    let plan = PackPlan::new(stream.len(), seq_len, batch_rows)?;
    let mut ws = Workspace::new();
    let n = plan.scoreable();
    let mut out = StreamEval {
        losses: Vec::with_capacity(n),
        correct: Vec::with_capacity(n),
        eligible: Vec::with_capacity(n),
    };
    for b in 0..plan.n_batches() {
        let batch = plan.batch(stream, b);
        out.losses.extend_from_slice(ws.forward(params, &batch)?);
        out.correct.extend(ws.argmax_correct());
        out.eligible.extend(batch.eligible());
    }
    Ok(out)
}

/// Loss of every packed target position of `stream` under `params`.
pub fn per_token_losses(params: &Parameters<f32>, stream: &TokenStream, seq_len: usize) -> Result<Vec<f32>> {
    check_vocab(params, stream)?;
    let plan = PackPlan::new(stream.len(), seq_len, SCORE_BATCH_ROWS)?;
    let mut ws = Workspace::new();
    let mut losses = Vec::with_capacity(plan.scoreable());
    for b in 0..plan.n_batches() {
        losses.extend_from_slice(ws.forward(params, &plan.batch(stream, b))?);
    }
    Ok(losses)
}

/// Score `stream` with a reference checkpoint, packing at `seq_len`.
pub fn score_corpus(reference: &ModelCheckpoint, stream: &TokenStream, seq_len: usize) -> Result<ScoreFile> {
    let losses = per_token_losses(&reference.params, stream, seq_len)?;
    Ok(ScoreFile {
        stream_hash: stream.content_hash(),
        ref_checkpoint_hash: reference.params_hash(),
        seq_len: seq_len as u32,
        losses,
    })
}

/// Causal-LM training of a reference model for a whole number of epochs over
/// `clean`. The token budget in `config` is replaced by
/// `epochs x (full batches per epoch) x (tokens per batch)`; with zero epochs
/// the initialization is returned untouched.
pub fn train_reference(
    init: &Parameters<f32>,
    clean: &TokenStream,
    config: &TrainConfig,
    epochs: usize,
    validation: Option<&ValidationSet>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    train_reference_with_progress(init, clean, config, epochs, validation, out_dir, &mut |_| {})
}

/// [`train_reference`] with a per-step callback. With zero epochs and an
/// output directory, the untouched initialization is still written as
/// `final.rhoc`.
pub fn train_reference_with_progress(
    init: &Parameters<f32>,
    clean: &TokenStream,
    config: &TrainConfig,
    epochs: usize,
    validation: Option<&ValidationSet>,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutput> {
    if clean.is_empty() {
        return Err(Error::InvalidArgument("reference training stream is empty".into()));
    }
    let plan = PackPlan::new(clean.len(), config.seq_len, config.batch_rows)?;
    let per_epoch = (plan.full_batches() * config.batch_rows * config.seq_len) as u64;
    if per_epoch == 0 {
        return Err(Error::StreamTooShort {
            len: clean.len(),
            needed: config.batch_rows * config.seq_len + 1,
        });
    }
    let cfg = TrainConfig {
        objective: Objective::Clm,
        total_tokens: epochs as u64 * per_epoch,
        checkpoint_every_tokens: config.checkpoint_every_tokens.or(Some(per_epoch)),
        ..config.clone()
    };
    if epochs == 0 {
        let out = TrainOutput::untrained(init, &cfg);
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(dir.join("final.rhoc"), &out.final_checkpoint)?;
        }
        return Ok(out);
    }
    train_with_progress(init, clean, None, &cfg, validation, out_dir, progress)
}
