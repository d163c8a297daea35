//! Run configuration and the three-stage pipeline: reference training,
//! corpus scoring, and selective (or causal-LM) training, tied together by a
//! manifest of hashes so every artifact can be traced back to its inputs.
//!
//! Configuration is TOML with four sections:
//!
//! ```toml
//! [model]      # transformer shape and init (ModelConfig keys)
//! d_model = 64
//! [train]      # objective, select_ratio, peak_lr, total_tokens, batch_rows,
//! objective = "slm"   # seq_len, checkpoint_every_tokens, seed, ...
//! [reference]  # epochs, peak_lr, and optional smaller-model overrides
//! epochs = 3
//! [paths]      # stream, reference_stream, validation_stream, scores,
//! stream = "train.rhot"  # reference_checkpoint, out_dir
//! out_dir = "run"
//! ```
//!
//! Unknown keys are rejected and every value is validated before any
//! computation starts. Relative paths resolve against the config file's
//! directory; `SLM_LAB_OUT_DIR`, when set, replaces `paths.out_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{write_atomic, Digest32};
use crate::corpus::{read_stream, TokenStream};
use crate::error::{Error, Result};
use crate::model::{init_model, load_checkpoint, ModelCheckpoint, ModelConfig};
use crate::reference::{read_scores_for, score_corpus, train_reference_with_progress, write_scores, ScoreFile};
use crate::slm::{train_with_progress, Objective, StepRecord, TrainConfig, TrainOutput, ValidationSet};

/// Environment variable that overrides `paths.out_dir`.
pub const OUT_DIR_ENV: &str = "SLM_LAB_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    /// Passes over the clean stream.
    pub epochs: usize,
    /// Defaults to `train.peak_lr`.
    pub peak_lr: Option<f64>,
    /// Overrides for a smaller reference model. The vocabulary is always
    /// shared with the trained model.
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Token stream to train on.
    pub stream: Option<PathBuf>,
    /// Clean stream for reference training.
    pub reference_stream: Option<PathBuf>,
    /// Clean held-out stream evaluated at every checkpoint.
    pub validation_stream: Option<PathBuf>,
    /// Precomputed scores; skips reference training and scoring.
    pub scores: Option<PathBuf>,
    /// Existing reference checkpoint; skips reference training.
    pub reference_checkpoint: Option<PathBuf>,
    /// Where the run writes. Not serialized: a run's identity (config hash,
    /// manifest) does not depend on where its outputs live.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_reference")]
    pub reference: ReferenceSection,
    #[serde(default)]
    pub paths: PathsSection,
}

fn default_reference() -> ReferenceSection {
    ReferenceSection {
        epochs: 3,
        ..ReferenceSection::default()
    }
}

impl RunConfig {
    /// Parse TOML. A `[train]` table without `seq_len` trains at the
    /// model's `seq_len`; a `[reference]` table without `epochs` uses 3.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let model_seq = value
            .get("model")
            .and_then(|m| m.get("seq_len"))
            .cloned()
            .unwrap_or(toml::Value::Integer(ModelConfig::default().seq_len as i64));
        let train = value
            .entry("train")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let Some(t) = train.as_table_mut() {
            t.entry("seq_len").or_insert(model_seq);
        }
        if let Some(r) = value.get_mut("reference").and_then(|r| r.as_table_mut()) {
            r.entry("epochs").or_insert(toml::Value::Integer(3));
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Read a config file, resolve relative paths against its directory,
    /// apply the output-directory override, and validate.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.apply_env_override();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.stream,
            &mut p.reference_stream,
            &mut p.validation_stream,
            &mut p.scores,
            &mut p.reference_checkpoint,
            &mut p.out_dir,
        ] {
            if let Some(path) = slot {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    pub fn apply_env_override(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            self.paths.out_dir = Some(PathBuf::from(dir));
        }
    }

    /// The reference model: the trained model's config with any overrides.
    pub fn reference_model(&self) -> ModelConfig {
        let r = &self.reference;
        ModelConfig {
            d_model: r.d_model.unwrap_or(self.model.d_model),
            n_layers: r.n_layers.unwrap_or(self.model.n_layers),
            n_heads: r.n_heads.unwrap_or(self.model.n_heads),
            ..self.model.clone()
        }
    }

    pub fn reference_train(&self) -> TrainConfig {
        TrainConfig {
            objective: Objective::Clm,
            peak_lr: self.reference.peak_lr.unwrap_or(self.train.peak_lr),
            checkpoint_every_tokens: None,
            ..self.train.clone()
        }
    }

    fn needs_reference(&self) -> bool {
        self.train.objective == Objective::Slm && self.paths.scores.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.seq_len {
            return Err(Error::Config(format!(
                "train.seq_len ({}) exceeds model.seq_len ({})",
                self.train.seq_len, self.model.seq_len
            )));
        }
        if self.paths.stream.is_none() {
            return Err(Error::Config("paths.stream is required".into()));
        }
        if self.paths.out_dir.is_none() {
            return Err(Error::Config(format!("paths.out_dir is required (or set {OUT_DIR_ENV})")));
        }
        if self.train.objective == Objective::Slm
            && self.paths.scores.is_none()
            && self.paths.reference_checkpoint.is_none()
            && self.paths.reference_stream.is_none()
        {
            return Err(Error::Config(
                "objective = \"slm\" needs reference scores: set paths.scores, paths.reference_checkpoint, or paths.reference_stream".into(),
            ));
        }
        if self.needs_reference() {
            self.reference_model().validate()?;
            if let Some(lr) = self.reference.peak_lr {
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::Config("reference.peak_lr must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Digest of the canonical JSON form of the config.
    pub fn hash(&self) -> Digest32 {
        Digest32::of(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// A file produced or consumed by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory for outputs; as configured for inputs.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub path: String,
    pub step: u64,
    pub tokens_seen: u64,
    pub params_hash: String,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStage {
    /// `trained` or `loaded`.
    pub source: String,
    pub checkpoint: ArtifactRecord,
    pub params_hash: String,
    pub d_model: usize,
    pub final_train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStage {
    /// `computed` or `loaded`.
    pub source: String,
    pub scores: ArtifactRecord,
    pub stream_hash: String,
    pub ref_checkpoint_hash: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStage {
    pub objective: Objective,
    pub final_checkpoint: ArtifactRecord,
    pub log: ArtifactRecord,
    pub checkpoint_log: ArtifactRecord,
    pub checkpoints: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub steps: usize,
    pub tokens_seen: u64,
    pub final_train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Mean share of clean-labelled targets among selected tokens over the
    /// second half of training, when the stream carries labels.
    pub selected_clean_fraction_last_half: Option<f64>,
}

/// Everything needed to re-verify a run. Serialized as JSON with fields in
/// declaration order and no timestamps, so identical runs give identical
/// bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: RunConfig,
    pub stream: ArtifactRecord,
    pub stream_hash: String,
    pub reference_stream: Option<ArtifactRecord>,
    pub validation_stream: Option<ArtifactRecord>,
    pub reference: Option<ReferenceStage>,
    pub scoring: Option<ScoreStage>,
    pub train: TrainStage,
    pub metrics: FinalMetrics,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Malformed(format!("manifest: {e}")))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn file_record(path: &Path, shown: String) -> Result<ArtifactRecord> {
    Ok(ArtifactRecord {
        path: shown,
        sha256: Digest32::of(&std::fs::read(path)?).to_hex(),
    })
}

fn input_record(path: &Path) -> Result<ArtifactRecord> {
    file_record(path, path.display().to_string())
}

fn output_record(out_dir: &Path, rel: &str) -> Result<ArtifactRecord> {
    file_record(&out_dir.join(rel), rel.to_string())
}

/// Progress notifications from [`run_pipeline_with_progress`].
pub trait PipelineObserver {
    fn stage(&mut self, _name: &'static str) {}
    fn step(&mut self, _stage: &'static str, _record: &StepRecord) {}
}

struct Silent;
impl PipelineObserver for Silent {}

pub fn run_pipeline(config: &RunConfig) -> Result<Manifest> {
    run_pipeline_with_progress(config, &mut Silent)
}

fn load_input(p: &Path) -> Result<(TokenStream, ArtifactRecord)> {
    Ok((read_stream(p)?, input_record(p)?))
}

struct ReferenceResult {
    checkpoint: ModelCheckpoint,
    stage: ReferenceStage,
    stream: Option<ArtifactRecord>,
}

fn reference_stage(
    config: &RunConfig,
    out_dir: &Path,
    validation: Option<&ValidationSet>,
    observer: &mut dyn PipelineObserver,
) -> Result<ReferenceResult> {
    let result = if let Some(p) = &config.paths.reference_checkpoint {
        let checkpoint = load_checkpoint(p)?;
        let stage = ReferenceStage {
            source: "loaded".into(),
            checkpoint: input_record(p)?,
            params_hash: checkpoint.params_hash().to_hex(),
            d_model: checkpoint.config().d_model,
            final_train_loss: None,
        };
        ReferenceResult {
            checkpoint,
            stage,
            stream: None,
        }
    } else {
        let p = config.paths.reference_stream.as_deref().expect("validated");
        let (clean, rec) = load_input(p)?;
        let init = init_model(&config.reference_model())?;
        let out = train_reference_with_progress(
            &init,
            &clean,
            &config.reference_train(),
            config.reference.epochs,
            validation,
            Some(&out_dir.join("reference")),
            &mut |r| observer.step("reference", r),
        )?;
        let stage = ReferenceStage {
            source: "trained".into(),
            checkpoint: output_record(out_dir, "reference/final.rhoc")?,
            params_hash: out.final_checkpoint.params_hash().to_hex(),
            d_model: out.final_checkpoint.config().d_model,
            final_train_loss: out.log.tail_mean(0.05, |s| Some(s.loss_all)),
        };
        ReferenceResult {
            checkpoint: out.final_checkpoint,
            stage,
            stream: Some(rec),
        }
    };
    let model_vocab = config.model.vocab_size as u32;
    let ref_vocab = result.checkpoint.config().vocab_size as u32;
    if ref_vocab != model_vocab {
        return Err(Error::VocabMismatch {
            left: model_vocab,
            right: ref_vocab,
        });
    }
    Ok(result)
}

fn score_stage(
    config: &RunConfig,
    out_dir: &Path,
    stream: &TokenStream,
    reference: Option<&ModelCheckpoint>,
) -> Result<(ScoreFile, ScoreStage)> {
    let seq_len = config.train.seq_len;
    let (scores, source, record) = match (&config.paths.scores, reference) {
        (Some(p), _) => (read_scores_for(p, stream, seq_len, false)?, "loaded", input_record(p)?),
        (None, Some(r)) => {
            let scores = score_corpus(r, stream, seq_len)?;
            write_scores(out_dir.join("scores.rhos"), &scores)?;
            (scores, "computed", output_record(out_dir, "scores.rhos")?)
        }
        (None, None) => {
            return Err(Error::Config("no reference scores available".into()));
        }
    };
    let stage = ScoreStage {
        source: source.into(),
        scores: record,
        stream_hash: scores.stream_hash.to_hex(),
        ref_checkpoint_hash: scores.ref_checkpoint_hash.to_hex(),
        token_count: scores.token_count(),
    };
    Ok((scores, stage))
}

fn train_stage(
    config: &RunConfig,
    out_dir: &Path,
    stream: &TokenStream,
    scores: Option<&ScoreFile>,
    validation: Option<&ValidationSet>,
    observer: &mut dyn PipelineObserver,
) -> Result<(TrainOutput, TrainStage)> {
    let init = init_model(&config.model)?;
    let out = train_with_progress(
        &init,
        stream,
        scores,
        &config.train,
        validation,
        Some(&out_dir.join("train")),
        &mut |r| observer.step("train", r),
    )?;
    let checkpoints = out
        .log
        .checkpoints
        .iter()
        .map(|c| CheckpointEntry {
            path: format!("train/{}", c.file.as_deref().unwrap_or_default()),
            step: c.step,
            tokens_seen: c.tokens_seen,
            params_hash: c.params_hash.clone(),
            val_loss: c.val_loss,
            val_acc: c.val_acc,
        })
        .collect();
    let stage = TrainStage {
        objective: config.train.objective,
        final_checkpoint: output_record(out_dir, "train/final.rhoc")?,
        log: output_record(out_dir, "train/train_log.tsv")?,
        checkpoint_log: output_record(out_dir, "train/checkpoints.tsv")?,
        checkpoints,
    };
    Ok((out, stage))
}

/// Run all stages and write `manifest.json` into the output directory.
/// A failing stage aborts with [`Error::Stage`] naming it; artifacts of
/// earlier stages are left in place.
pub fn run_pipeline_with_progress(config: &RunConfig, observer: &mut dyn PipelineObserver) -> Result<Manifest> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let out_dir = config.paths.out_dir.clone().expect("validated");

    observer.stage("load");
    let (stream, stream_rec) = load_input(config.paths.stream.as_deref().expect("validated")).map_err(|e| e.in_stage("load"))?;
    let (validation, validation_rec) = match &config.paths.validation_stream {
        Some(p) => {
            let (s, rec) = load_input(p).map_err(|e| e.in_stage("load"))?;
            (Some(ValidationSet::new(s, config.train.seq_len)), Some(rec))
        }
        None => (None, None),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::from(e).in_stage("load"))?;

    let mut reference = None;
    if config.needs_reference() {
        observer.stage("reference");
        reference = Some(reference_stage(config, &out_dir, validation.as_ref(), observer).map_err(|e| e.in_stage("reference"))?);
    }

    let mut scores = None;
    let mut scoring = None;
    if config.train.objective == Objective::Slm {
        observer.stage("score");
        let (s, stage) = score_stage(config, &out_dir, &stream, reference.as_ref().map(|r| &r.checkpoint))
            .map_err(|e| e.in_stage("score"))?;
        scores = Some(s);
        scoring = Some(stage);
    }

    observer.stage("train");
    let (out, train) = train_stage(config, &out_dir, &stream, scores.as_ref(), validation.as_ref(), observer)
        .map_err(|e| e.in_stage("train"))?;

    let last = out.log.checkpoints.last();
    let metrics = FinalMetrics {
        steps: out.log.steps.len(),
        tokens_seen: out.final_checkpoint.tokens_seen,
        final_train_loss: out.log.tail_mean(0.05, |s| Some(s.loss_all)),
        val_loss: last.and_then(|c| c.val_loss),
        val_acc: last.and_then(|c| c.val_acc),
        selected_clean_fraction_last_half: out.log.tail_mean(0.5, |s| s.sel_clean_frac),
    };
    let (reference_stream, reference) = match reference {
        Some(r) => (r.stream, Some(r.stage)),
        None => (None, None),
    };
    let manifest = Manifest {
        config_hash: config.hash().to_hex(),
        config: config.clone(),
        stream: stream_rec,
        stream_hash: stream.content_hash().to_hex(),
        reference_stream,
        validation_stream: validation_rec,
        reference,
        scoring,
        train,
        metrics,
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes()).map_err(|e| e.in_stage("train"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, write_stream};

    const TINY: &str = r#"
[model]
d_model = 16
n_layers = 1
n_heads = 2
seq_len = 16

[train]
objective = "slm"
select_ratio = 0.6
total_tokens = 2048
batch_rows = 8
peak_lr = 3e-3

[reference]
epochs = 1

[paths]
stream = "train.rhot"
reference_stream = "clean.rhot"
validation_stream = "val.rhot"
out_dir = "run"
"#;

    #[test]
    fn train_seq_len_defaults_to_model() {
        let cfg = RunConfig::from_toml(TINY).unwrap();
        assert_eq!(cfg.train.seq_len, 16);
        assert_eq!(cfg.reference.epochs, 1);
        let bare = RunConfig::from_toml("[paths]\nstream = \"s\"\n").unwrap();
        assert_eq!(bare.train.seq_len, bare.model.seq_len);
        assert_eq!(bare.reference.epochs, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nselect_ration = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("select_ration"), "{err}");
        assert!(RunConfig::from_toml("[extra]\n").is_err());
    }

    #[test]
    fn slm_without_any_score_source_fails_validation() {
        let mut cfg = RunConfig::from_toml(TINY).unwrap();
        cfg.paths.reference_stream = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.train.objective = Objective::Clm;
        cfg.validate().unwrap();
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let mut cfg = RunConfig::from_toml(TINY).unwrap();
        cfg.resolve_paths(Path::new("/data/exp"));
        assert_eq!(cfg.paths.stream.as_deref(), Some(Path::new("/data/exp/train.rhot")));
        assert_eq!(cfg.paths.out_dir.as_deref(), Some(Path::new("/data/exp/run")));
    }

    #[test]
    fn weak_reference_overrides_width_only() {
        let mut cfg = RunConfig::from_toml(TINY).unwrap();
        cfg.reference.d_model = Some(8);
        let r = cfg.reference_model();
        assert_eq!((r.d_model, r.n_layers, r.vocab_size), (8, 1, cfg.model.vocab_size));
    }

    fn write_inputs(dir: &Path) {
        write_stream(dir.join("train.rhot"), &synth_corpus(0.7, 6_000, 1)).unwrap();
        write_stream(dir.join("clean.rhot"), &synth_corpus(1.0, 3_000, 2)).unwrap();
        write_stream(dir.join("val.rhot"), &synth_corpus(1.0, 1_000, 3)).unwrap();
    }

    #[test]
    fn end_to_end_runs_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path());
        let mut cfg = RunConfig::from_toml(TINY).unwrap();
        cfg.resolve_paths(dir.path());
        let first = run_pipeline(&cfg).unwrap();
        let bytes = std::fs::read(dir.path().join("run").join(MANIFEST_FILE)).unwrap();
        let parsed = Manifest::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(parsed.to_json(), first.to_json());
        assert_eq!(first.reference.as_ref().unwrap().source, "trained");
        assert_eq!(first.scoring.as_ref().unwrap().source, "computed");
        assert!(first.train.checkpoints.len() >= 2);
        assert!(first.metrics.val_loss.is_some());

        cfg.paths.out_dir = Some(dir.path().join("run2"));
        let second = run_pipeline(&cfg).unwrap();
        assert_eq!(second.to_json(), first.to_json());
    }

    #[test]
    fn a_failing_stage_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path());
        std::fs::write(dir.path().join("clean.rhot"), b"not a stream").unwrap();
        let mut cfg = RunConfig::from_toml(TINY).unwrap();
        cfg.resolve_paths(dir.path());
        match run_pipeline(&cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "reference"),
            other => panic!("expected a reference-stage error, got {other:?}"),
        }
    }
}
