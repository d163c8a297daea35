//! Post-hoc analyses of selective training runs: selected/unselected loss
//! curves, the `metric = ln(a * L + c)` fit, the checkpoint-by-checkpoint
//! perplexity of selected tokens, and token-highlight reports.

mod highlight;
mod powerlaw;

pub use highlight::{highlight_report, quintile_buckets, selection_snapshot, SelectionSnapshot, BUCKET_COLORS};
pub use powerlaw::{fit_power_law, PowerLawFit};

use std::fmt::Write as _;

use crate::corpus::{PackPlan, TokenStream};
use crate::error::{Error, Result};
use crate::model::{ModelCheckpoint, Workspace};
use crate::reference::ScoreFile;
use crate::slm::{excess_loss, select_topk_eligible, Objective, TrainRunLog};

/// Per-step selected/unselected/all-token training losses plus the
/// validation loss at each checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurves {
    pub tokens_seen: Vec<u64>,
    pub selected: Vec<f64>,
    /// `None` where nothing was left unselected.
    pub unselected: Vec<Option<f64>>,
    pub all: Vec<f64>,
    pub sel_count: Vec<usize>,
    pub unsel_count: Vec<usize>,
    /// `(tokens_seen, validation loss)` per checkpoint that has one.
    pub validation: Vec<(u64, f64)>,
}

pub fn loss_curves(log: &TrainRunLog) -> Result<LossCurves> {
    if log.objective != Objective::Slm {
        return Err(Error::InvalidArgument(
            "loss curves need a selective run; this log is from causal-LM training and has no selection columns".into(),
        ));
    }
    let mut c = LossCurves {
        tokens_seen: Vec::new(),
        selected: Vec::new(),
        unselected: Vec::new(),
        all: Vec::new(),
        sel_count: Vec::new(),
        unsel_count: Vec::new(),
        validation: Vec::new(),
    };
    for r in &log.steps {
        let sel = r
            .loss_sel
            .ok_or_else(|| Error::Malformed(format!("step {} lacks a selected-token loss", r.step)))?;
        c.tokens_seen.push(r.tokens_seen);
        c.selected.push(sel);
        c.unselected.push(r.loss_unsel);
        c.all.push(r.loss_all);
        c.sel_count.push(r.sel_count);
        c.unsel_count.push(r.unsel_count);
    }
    c.validation = log
        .checkpoints
        .iter()
        .filter_map(|k| k.val_loss.map(|v| (k.tokens_seen, v)))
        .collect();
    Ok(c)
}

impl LossCurves {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("tokens_seen\tloss_selected\tloss_unselected\tloss_all\tsel_count\tunsel_count\n");
        for i in 0..self.tokens_seen.len() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                self.tokens_seen[i],
                self.selected[i],
                self.unselected[i].map_or_else(|| "NA".into(), |v| v.to_string()),
                self.all[i],
                self.sel_count[i],
                self.unsel_count[i]
            )
            .unwrap();
        }
        out
    }

    pub fn validation_tsv(&self) -> String {
        let mut out = String::from("tokens_seen\tval_loss\n");
        for (t, v) in &self.validation {
            writeln!(out, "{t}\t{v}").unwrap();
        }
        out
    }
}

/// Perplexity of each checkpoint's selected tokens under every checkpoint:
/// `values[s][t] = exp(mean loss under checkpoint t of the tokens that
/// checkpoint s selects)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPplMatrix {
    pub tokens_seen: Vec<u64>,
    pub values: Vec<Vec<f64>>,
    /// Size of each checkpoint's selection set.
    pub selected: Vec<usize>,
}

impl SelectionPplMatrix {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("selected_by");
        for t in &self.tokens_seen {
            write!(out, "\tppl_at_{t}").unwrap();
        }
        out.push('\n');
        for (s, row) in self.values.iter().enumerate() {
            write!(out, "{}", self.tokens_seen[s]).unwrap();
            for v in row {
                write!(out, "\t{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Per-position losses of `ckpt` over the first `batches` batches of `plan`.
pub(crate) fn plan_losses(ckpt: &ModelCheckpoint, stream: &TokenStream, plan: &PackPlan, batches: usize) -> Result<Vec<f32>> {
    if ckpt.config().vocab_size as u32 != stream.vocab_size() {
        return Err(Error::VocabMismatch {
            left: ckpt.config().vocab_size as u32,
            right: stream.vocab_size(),
        });
    }
    let mut ws = Workspace::new();
    let mut out = Vec::new();
    for b in 0..batches {
        out.extend_from_slice(ws.forward(&ckpt.params, &plan.batch(stream, b))?);
    }
    Ok(out)
}

/// Selection flags over the first `batches` batches, ranking within each
/// batch exactly as the trainer does.
pub(crate) fn plan_selection(
    losses: &[f32],
    stream: &TokenStream,
    scores: &ScoreFile,
    plan: &PackPlan,
    batches: usize,
    ratio: f64,
) -> Result<(Vec<f32>, Vec<bool>)> {
    let mut excess_all = Vec::with_capacity(losses.len());
    let mut flags = Vec::with_capacity(losses.len());
    let mut offset = 0;
    for b in 0..batches {
        let batch = plan.batch(stream, b);
        let len = batch.len();
        let start = batch.score_index(0);
        let excess = excess_loss(&losses[offset..offset + len], &scores.losses[start..start + len])?;
        let mask = select_topk_eligible(&excess, &batch.eligible(), ratio)?;
        excess_all.extend_from_slice(&excess);
        flags.extend_from_slice(&mask.flags);
        offset += len;
    }
    Ok((excess_all, flags))
}

/// Build the selected-token perplexity matrix over the first `max_batches`
/// batches of `batch_rows` rows (all batches when `None`).
pub fn checkpoint_selection_ppl(
    checkpoints: &[ModelCheckpoint],
    stream: &TokenStream,
    scores: &ScoreFile,
    ratio: f64,
    batch_rows: usize,
    max_batches: Option<usize>,
) -> Result<SelectionPplMatrix> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints given".into()));
    }
    let seq_len = scores.seq_len as usize;
    scores.check_alignment(stream, seq_len)?;
    let plan = PackPlan::new(stream.len(), seq_len, batch_rows)?;
    let batches = max_batches.map_or(plan.n_batches(), |m| m.min(plan.n_batches()));
    let losses: Vec<Vec<f32>> = checkpoints
        .iter()
        .map(|c| plan_losses(c, stream, &plan, batches))
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(checkpoints.len());
    let mut selected = Vec::with_capacity(checkpoints.len());
    for s_losses in &losses {
        let (_, flags) = plan_selection(s_losses, stream, scores, &plan, batches, ratio)?;
        let idx: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
        selected.push(idx.len());
        let row = losses
            .iter()
            .map(|t_losses| {
                let mean = idx.iter().map(|&i| t_losses[i] as f64).sum::<f64>() / idx.len() as f64;
                mean.exp()
            })
            .collect();
        values.push(row);
    }
    Ok(SelectionPplMatrix {
        tokens_seen: checkpoints.iter().map(|c| c.tokens_seen).collect(),
        values,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slm::StepRecord;

    fn record(step: u64, sel: Option<f64>, unsel: Option<f64>) -> StepRecord {
        StepRecord {
            step,
            lr: 1e-3,
            loss_all: 2.0,
            loss_sel: sel,
            loss_unsel: unsel,
            sel_count: 6,
            unsel_count: 4,
            tokens_seen: step * 10,
            sel_clean_frac: None,
        }
    }

    #[test]
    fn curves_echo_the_log() {
        let mut log = TrainRunLog::new(Objective::Slm, 0.6);
        log.steps.push(record(1, Some(2.5), Some(1.25)));
        log.steps.push(record(2, Some(2.0), None));
        let c = loss_curves(&log).unwrap();
        assert_eq!(c.selected, vec![2.5, 2.0]);
        assert_eq!(c.unselected, vec![Some(1.25), None]);
        assert_eq!(c.tokens_seen, vec![10, 20]);
        assert!(c.to_tsv().lines().nth(2).unwrap().contains("\tNA\t"));
    }

    #[test]
    fn curves_reject_causal_logs() {
        let mut log = TrainRunLog::new(Objective::Clm, 1.0);
        log.steps.push(record(1, None, None));
        assert!(loss_curves(&log).is_err());
    }
}
