//! `slm-lab`: command-line driver for selective language modeling.
//!
//! Each pipeline stage is its own subcommand (`synth`, `train-ref`, `score`,
//! `train`, ...) and `pipeline` runs reference training, scoring, and
//! training from one TOML config. On failure the process exits nonzero and
//! the error message names the failing stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use slm_core::analysis::{
    checkpoint_selection_ppl, fit_power_law, highlight_report, loss_curves, selection_snapshot,
};
use slm_core::corpus::{
    mix, read_stream, synth_corpus, tokenize, tokenize_documents, write_stream, MixSpec, Vocabulary,
};
use slm_core::dynamics::{analyze_dynamics, eval_token_losses};
use slm_core::model::{init_model, load_checkpoint, ModelCheckpoint};
use slm_core::pipeline::{run_pipeline_with_progress, PipelineObserver, RunConfig};
use slm_core::reference::{read_scores, read_scores_for, score_corpus, train_reference_with_progress, write_scores};
use slm_core::slm::{train_with_progress, Objective, StepRecord, TrainRunLog, ValidationSet};
use slm_core::Error;

#[derive(Parser)]
#[command(name = "slm-lab", version, about = "Reference scoring, excess-loss token selection, and training dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Print a progress line every this many training steps (0 = silent).
    #[arg(long, global = true, default_value_t = 50)]
    log_every: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Byte-level tokenize text files into a token stream.
    Tokenize {
        /// Input text files.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Split each file into documents at blank lines.
        #[arg(long)]
        split_paragraphs: bool,
    },
    /// Generate the labelled synthetic corpus (Markov text plus uniform noise).
    Synth {
        #[arg(long, default_value_t = 0.7)]
        clean_fraction: f64,
        #[arg(long, default_value_t = 2_000_000)]
        tokens: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interleave several streams by weight according to a TOML recipe.
    Mix {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a reference model on a clean stream with the causal-LM objective.
    TrainRef {
        /// Run config; its [model], [train], and [reference] sections apply.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score every token of a stream with a reference checkpoint.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        /// Packing length; defaults to the checkpoint's context length.
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the selective (`slm`) or causal (`clm`) objective.
    Train {
        /// Run config; its [model] and [train] sections apply.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        select_ratio: Option<f64>,
        #[arg(long)]
        total_tokens: Option<u64>,
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Load scores even when their stream hash does not match.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-token loss trajectories across checkpoints and the four-way taxonomy.
    EvalDynamics {
        /// Checkpoint files, or one directory holding `ckpt_*.rhoc` files.
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        stream: PathBuf,
        /// Only evaluate this many leading tokens of the stream.
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        /// Per-token TSV; the category summary goes to `<out>.summary.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Post-hoc analyses of a training run.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// HTML report highlighting which tokens checkpoints select.
    Report {
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, default_value = "Token selection")]
        title: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run reference training, scoring, and training from one config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args)]
struct SelectionArgs {
    /// Checkpoint files, or one directory holding `ckpt_*.rhoc` files.
    #[arg(long, required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    select_ratio: f64,
    #[arg(long, default_value_t = 16)]
    batch_rows: usize,
    /// Only use this many leading batches of the stream.
    #[arg(long, default_value_t = 1)]
    max_batches: usize,
}

#[derive(Subcommand)]
enum Analysis {
    /// Selected / unselected / all-token loss per step from a training log.
    Curves {
        /// Training output directory (holding train_log.tsv and checkpoints.tsv).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit metric = ln(a * L + c) to `loss<TAB>metric` rows.
    Powerlaw {
        #[arg(long)]
        points: PathBuf,
    },
    /// Perplexity of each checkpoint's selected tokens under every checkpoint.
    CkptPpl {
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Share of selected tokens that carry the clean label, per checkpoint.
    Report {
        #[command(flatten)]
        selection: SelectionArgs,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Tokenize { .. } => "tokenize",
            Command::Synth { .. } => "synth",
            Command::Mix { .. } => "mix",
            Command::TrainRef { .. } => "train-ref",
            Command::Score { .. } => "score",
            Command::Train { .. } => "train",
            Command::EvalDynamics { .. } => "eval-dynamics",
            Command::Analyze { .. } => "analyze",
            Command::Report { .. } => "report",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}

struct Progress {
    every: usize,
}

impl Progress {
    fn print(&self, stage: &str, r: &StepRecord) {
        if self.every == 0 || r.step as usize % self.every != 0 {
            return;
        }
        let sel = r.loss_sel.map_or_else(String::new, |v| format!(" sel {v:.4}"));
        eprintln!(
            "[{stage}] step {:>6} tokens {:>10} lr {:.2e} loss {:.4}{sel}",
            r.step, r.tokens_seen, r.lr, r.loss_all
        );
    }
}

impl PipelineObserver for Progress {
    fn stage(&mut self, name: &'static str) {
        eprintln!("[pipeline] stage {name}");
    }

    fn step(&mut self, stage: &'static str, record: &StepRecord) {
        self.print(stage, record);
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::from_toml("")?);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(dir) = path.parent() {
        cfg.resolve_paths(dir);
    }
    Ok(cfg)
}

/// Expand a single directory argument into its `ckpt_*.rhoc` files in name
/// order (names embed the zero-padded step), then load everything.
fn load_checkpoints(args: &[PathBuf]) -> Result<Vec<ModelCheckpoint>> {
    let files = if let [dir] = args {
        if dir.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".rhoc"))
                })
                .collect();
            files.sort();
            if files.is_empty() {
                bail!("no ckpt_*.rhoc files in {}", dir.display());
            }
            files
        } else {
            args.to_vec()
        }
    } else {
        args.to_vec()
    };
    files
        .iter()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let progress = Progress { every: cli.log_every };
    match cli.command {
        Command::Tokenize {
            inputs,
            out,
            split_paragraphs,
        } => {
            let mut texts = Vec::new();
            for p in &inputs {
                texts.push(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let stream = if split_paragraphs {
                let mut docs: Vec<&[u8]> = Vec::new();
                for t in &texts {
                    docs.extend(split_blank_lines(t));
                }
                tokenize_documents(docs, Vocabulary::byte_level())
            } else if let [only] = &texts[..] {
                tokenize(only, Vocabulary::byte_level())
            } else {
                tokenize_documents(texts.iter().map(|t| &t[..]), Vocabulary::byte_level())
            };
            write_stream(&out, &stream)?;
            println!("{} tokens -> {}", stream.len(), out.display());
        }
        Command::Synth {
            clean_fraction,
            tokens,
            seed,
            out,
        } => {
            if !(clean_fraction > 0.0 && clean_fraction <= 1.0) {
                bail!("--clean-fraction must be in (0, 1], got {clean_fraction}");
            }
            let stream = synth_corpus(clean_fraction, tokens, seed);
            write_stream(&out, &stream)?;
            println!("{} tokens -> {}", stream.len(), out.display());
        }
        Command::Mix { spec, out } => {
            let stream = mix(&MixSpec::load(&spec)?)?;
            write_stream(&out, &stream)?;
            println!("{} tokens -> {}", stream.len(), out.display());
        }
        Command::TrainRef {
            config,
            clean,
            epochs,
            validation,
            out_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = cfg.reference_model();
            model.validate()?;
            let train = cfg.reference_train();
            train.validate()?;
            let clean = read_stream(&clean)?;
            let val = validation
                .map(|p| read_stream(&p).map(|s| ValidationSet::new(s, train.seq_len)))
                .transpose()?;
            let epochs = epochs.unwrap_or(cfg.reference.epochs);
            eprintln!("[train-ref] {epochs} epoch(s) over {} tokens", clean.len());
            let out = train_reference_with_progress(
                &init_model(&model)?,
                &clean,
                &train,
                epochs,
                val.as_ref(),
                Some(&out_dir),
                &mut |r| progress.print("train-ref", r),
            )?;
            println!(
                "reference {} -> {}",
                out.final_checkpoint.params_hash().to_hex(),
                out_dir.join("final.rhoc").display()
            );
        }
        Command::Score {
            reference,
            stream,
            seq_len,
            out,
        } => {
            let ckpt = load_checkpoint(&reference)?;
            let stream = read_stream(&stream)?;
            let seq_len = seq_len.unwrap_or(ckpt.config().seq_len);
            let scores = score_corpus(&ckpt, &stream, seq_len)?;
            write_scores(&out, &scores)?;
            let mean = scores.losses.iter().map(|&l| l as f64).sum::<f64>() / scores.token_count().max(1) as f64;
            println!("{} scores (mean {mean:.4} nats) -> {}", scores.token_count(), out.display());
        }
        Command::Train {
            config,
            stream,
            scores,
            objective,
            select_ratio,
            total_tokens,
            validation,
            force,
            out_dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(o) = objective {
                cfg.train.objective = Objective::parse(&o)?;
            }
            if let Some(k) = select_ratio {
                cfg.train.select_ratio = k;
            }
            if let Some(t) = total_tokens {
                cfg.train.total_tokens = t;
            }
            cfg.model.validate()?;
            cfg.train.validate()?;
            if cfg.train.objective == Objective::Slm && scores.is_none() {
                bail!("objective slm needs --scores");
            }
            let stream = read_stream(&stream)?;
            let scores = scores
                .map(|p| read_scores_for(&p, &stream, cfg.train.seq_len, force))
                .transpose()?;
            let val = validation
                .map(|p| read_stream(&p).map(|s| ValidationSet::new(s, cfg.train.seq_len)))
                .transpose()?;
            let out = train_with_progress(
                &init_model(&cfg.model)?,
                &stream,
                scores.as_ref(),
                &cfg.train,
                val.as_ref(),
                Some(&out_dir),
                &mut |r| progress.print("train", r),
            )?;
            let last = out.log.checkpoints.last();
            println!(
                "trained {} steps -> {} (val loss {})",
                out.log.steps.len(),
                out_dir.join("final.rhoc").display(),
                last.and_then(|c| c.val_loss).map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::EvalDynamics {
            checkpoints,
            stream,
            max_tokens,
            seq_len,
            threshold,
            out,
        } => {
            let ckpts = load_checkpoints(&checkpoints)?;
            let mut stream = read_stream(&stream)?;
            if let Some(n) = max_tokens {
                stream = stream.truncated(n);
            }
            let seq_len = seq_len.unwrap_or(ckpts[0].config().seq_len);
            let matrix = eval_token_losses(&ckpts, &stream, seq_len)?;
            let report = analyze_dynamics(&matrix, threshold)?;
            write_text(&out, &report.to_tsv())?;
            let mut summary = out.clone().into_os_string();
            summary.push(".summary.tsv");
            write_text(Path::new(&summary), &report.summary_tsv())?;
            print!("{}", report.summary_tsv());
        }
        Command::Analyze { what } => match what {
            Analysis::Curves { run, out } => {
                let log = TrainRunLog::read(run.join("train_log.tsv"), Some(&run.join("checkpoints.tsv")))?;
                let curves = loss_curves(&log)?;
                write_text(&out, &curves.to_tsv())?;
                let mut val = out.clone().into_os_string();
                val.push(".validation.tsv");
                write_text(Path::new(&val), &curves.validation_tsv())?;
                println!("{} steps -> {}", curves.tokens_seen.len(), out.display());
            }
            Analysis::Powerlaw { points } => {
                let pts = read_points(&points)?;
                let fit = fit_power_law(&pts)?;
                println!("a\tc\trmse");
                println!("{}\t{}\t{}", fit.a, fit.c, fit.rmse);
            }
            Analysis::CkptPpl { selection, out } => {
                let (ckpts, stream, scores) = load_selection(&selection)?;
                let m = checkpoint_selection_ppl(
                    &ckpts,
                    &stream,
                    &scores,
                    selection.select_ratio,
                    selection.batch_rows,
                    Some(selection.max_batches),
                )?;
                write_text(&out, &m.to_tsv())?;
                print!("{}", m.to_tsv());
            }
            Analysis::Report { selection } => {
                let (ckpts, stream, scores) = load_selection(&selection)?;
                if stream.labels().is_none() {
                    bail!("the stream carries no span labels");
                }
                println!("tokens_seen\tselected\tclean_fraction");
                for c in &ckpts {
                    let snap = snapshot(c, &stream, &scores, &selection)?;
                    let frac = snap.selected_clean_fraction(&stream);
                    println!(
                        "{}\t{}\t{}",
                        c.tokens_seen,
                        snap.selected.iter().filter(|&&s| s).count(),
                        frac.map_or_else(|| "NA".into(), |f| f.to_string())
                    );
                }
            }
        },
        Command::Report { selection, title, out } => {
            let (ckpts, stream, scores) = load_selection(&selection)?;
            let snaps = ckpts
                .iter()
                .map(|c| snapshot(c, &stream, &scores, &selection))
                .collect::<Result<Vec<_>>>()?;
            write_text(&out, &highlight_report(&stream, &snaps, &title)?)?;
            println!("{} snapshot(s) -> {}", snaps.len(), out.display());
        }
        Command::Pipeline { config } => {
            let cfg = RunConfig::load(&config).map_err(|e| Error::Stage {
                stage: "config",
                source: Box::new(e),
            })?;
            let mut observer = progress;
            let manifest = run_pipeline_with_progress(&cfg, &mut observer)?;
            println!(
                "config {} done; val loss {}",
                manifest.config_hash,
                manifest.metrics.val_loss.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
            );
        }
    }
    Ok(())
}

fn snapshot(
    ckpt: &ModelCheckpoint,
    stream: &slm_core::corpus::TokenStream,
    scores: &slm_core::reference::ScoreFile,
    sel: &SelectionArgs,
) -> Result<slm_core::analysis::SelectionSnapshot> {
    Ok(selection_snapshot(
        ckpt,
        format!("step {}", ckpt.step),
        stream,
        scores,
        sel.select_ratio,
        sel.batch_rows,
        Some(sel.max_batches),
    )?)
}

fn load_selection(
    sel: &SelectionArgs,
) -> Result<(Vec<ModelCheckpoint>, slm_core::corpus::TokenStream, slm_core::reference::ScoreFile)> {
    let ckpts = load_checkpoints(&sel.checkpoints)?;
    let stream = read_stream(&sel.stream)?;
    let scores = read_scores(&sel.scores)?;
    Ok((ckpts, stream, scores))
}

/// `loss<TAB>metric` rows; blank lines and lines starting with `#` or a
/// non-numeric header are skipped.
fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(['\t', ',', ' ']).filter(|c| !c.is_empty());
        let (Some(l), Some(m)) = (cols.next(), cols.next()) else {
            bail!("line {}: expected two columns", i + 1);
        };
        match (l.parse::<f64>(), m.parse::<f64>()) {
            (Ok(l), Ok(m)) => pts.push((l, m)),
            _ if pts.is_empty() && i == 0 => continue,
            _ => bail!("line {}: not numeric: {line:?}", i + 1),
        }
    }
    Ok(pts)
}

fn split_blank_lines(text: &[u8]) -> Vec<&[u8]> {
    let mut docs = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + 1 < text.len() {
        if text[i] == b'\n' && text[i + 1] == b'\n' {
            if i > start {
                docs.push(&text[start..i]);
            }
            while i < text.len() && text[i] == b'\n' {
                i += 1;
            }
            start = i;
        } else {
            i += 1;
        }
    }
    let tail = text[start..].strip_suffix(b"\n").unwrap_or(&text[start..]);
    if !tail.is_empty() {
        docs.push(tail);
    }
    docs
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Pipeline errors already name their stage; everything else is
            // attributed to the subcommand that was running.
            let named = matches!(err.downcast_ref::<Error>(), Some(Error::Stage { .. }));
            if named {
                eprintln!("error: {err:#}");
            } else {
                eprintln!("error: stage `{stage}` failed: {err:#}");
            }
            ExitCode::FAILURE
        }
    }
}
