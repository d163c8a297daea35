//! Per-step and per-checkpoint training records, serialized as tab-separated
//! tables. Missing values are written as `NA`.

use std::fmt::Write as _;
use std::path::Path;

use super::Objective;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Mean loss over every eligible target of the step batch.
    pub loss_all: f64,
    /// Mean over selected tokens; `None` for causal-LM runs.
    pub loss_sel: Option<f64>,
    /// Mean over unselected eligible tokens; `None` when nothing was dropped.
    pub loss_unsel: Option<f64>,
    pub sel_count: usize,
    pub unsel_count: usize,
    pub tokens_seen: u64,
    /// Share of selected targets labelled clean, when the stream has labels.
    pub sel_clean_frac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub params_hash: String,
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunLog {
    pub objective: Objective,
    pub select_ratio: f64,
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
}

const STEP_HEADER: &str = "step\tlr\tloss_all\tloss_sel\tloss_unsel\tsel_count\tunsel_count\ttokens_seen\tsel_clean_frac";
const CKPT_HEADER: &str = "step\ttokens_seen\tval_loss\tval_acc\tparams_hash\tfile";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    if field == "NA" {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Malformed(format!("line {line}: bad number `{field}`")))
}

fn parse_req<T: std::str::FromStr>(field: &str, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Malformed(format!("line {line}: bad value `{field}`")))
}

impl TrainRunLog {
    pub fn new(objective: Objective, select_ratio: f64) -> Self {
        TrainRunLog {
            objective,
            select_ratio,
            steps: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn steps_to_tsv(&self) -> String {
        let mut out = format!(
            "# objective={} select_ratio={}\n{STEP_HEADER}\n",
            self.objective.as_str(),
            self.select_ratio
        );
        for r in &self.steps {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.step,
                r.lr,
                r.loss_all,
                opt(r.loss_sel),
                opt(r.loss_unsel),
                r.sel_count,
                r.unsel_count,
                r.tokens_seen,
                opt(r.sel_clean_frac)
            )
            .unwrap();
        }
        out
    }

    pub fn checkpoints_to_tsv(&self) -> String {
        let mut out = format!("{CKPT_HEADER}\n");
        for c in &self.checkpoints {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                c.step,
                c.tokens_seen,
                opt(c.val_loss),
                opt(c.val_acc),
                c.params_hash,
                c.file.as_deref().unwrap_or("NA")
            )
            .unwrap();
        }
        out
    }

    /// Parse the two tables written by [`steps_to_tsv`](Self::steps_to_tsv) and
    /// [`checkpoints_to_tsv`](Self::checkpoints_to_tsv).
    pub fn from_tsv(steps: &str, checkpoints: Option<&str>) -> Result<Self> {
        let mut objective = None;
        let mut ratio = 1.0;
        let mut records = Vec::new();
        let mut saw_header = false;
        for (no, line) in steps.lines().enumerate() {
            let no = no + 1;
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("objective", v)) => objective = Some(Objective::parse(v)?),
                        Some(("select_ratio", v)) => ratio = parse_req(v, no)?,
                        _ => {}
                    }
                }
                continue;
            }
            if !saw_header {
                if line != STEP_HEADER {
                    return Err(Error::Malformed(format!("line {no}: unexpected step table header")));
                }
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 9 {
                return Err(Error::Malformed(format!("line {no}: expected 9 fields, got {}", f.len())));
            }
            records.push(StepRecord {
                step: parse_req(f[0], no)?,
                lr: parse_req(f[1], no)?,
                loss_all: parse_req(f[2], no)?,
                loss_sel: parse_opt(f[3], no)?,
                loss_unsel: parse_opt(f[4], no)?,
                sel_count: parse_req(f[5], no)?,
                unsel_count: parse_req(f[6], no)?,
                tokens_seen: parse_req(f[7], no)?,
                sel_clean_frac: parse_opt(f[8], no)?,
            });
        }
        let objective = objective.ok_or_else(|| Error::Malformed("step table lacks an objective line".into()))?;
        let mut log = TrainRunLog::new(objective, ratio);
        log.steps = records;
        if let Some(text) = checkpoints {
            let mut lines = text.lines().enumerate();
            match lines.next() {
                Some((_, h)) if h == CKPT_HEADER => {}
                _ => return Err(Error::Malformed("unexpected checkpoint table header".into())),
            }
            for (no, line) in lines {
                let no = no + 1;
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 6 {
                    return Err(Error::Malformed(format!("line {no}: expected 6 fields, got {}", f.len())));
                }
                log.checkpoints.push(CheckpointRecord {
                    step: parse_req(f[0], no)?,
                    tokens_seen: parse_req(f[1], no)?,
                    val_loss: parse_opt(f[2], no)?,
                    val_acc: parse_opt(f[3], no)?,
                    params_hash: f[4].to_string(),
                    file: (f[5] != "NA").then(|| f[5].to_string()),
                });
            }
        }
        Ok(log)
    }

    pub fn write(&self, steps_path: impl AsRef<Path>, checkpoints_path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(steps_path, self.steps_to_tsv())?;
        std::fs::write(checkpoints_path, self.checkpoints_to_tsv())?;
        Ok(())
    }

    pub fn read(steps_path: impl AsRef<Path>, checkpoints_path: Option<&Path>) -> Result<Self> {
        let steps = std::fs::read_to_string(steps_path)?;
        let ckpts = checkpoints_path.map(std::fs::read_to_string).transpose()?;
        Self::from_tsv(&steps, ckpts.as_deref())
    }

    /// Mean of `f` over the records whose step lies in the last `fraction` of the run.
    pub fn tail_mean(&self, fraction: f64, f: impl Fn(&StepRecord) -> Option<f64>) -> Option<f64> {
        let n = self.steps.len();
        let start = n - ((n as f64 * fraction).ceil() as usize).min(n);
        let vals: Vec<f64> = self.steps[start..].iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip_preserves_values() {
        let mut log = TrainRunLog::new(Objective::Slm, 0.6);
        log.steps.push(StepRecord {
            step: 1,
            lr: 1.0 / 3.0,
            loss_all: 2.5,
            loss_sel: Some(3.1),
            loss_unsel: Some(1.6),
            sel_count: 6,
            unsel_count: 4,
            tokens_seen: 10,
            sel_clean_frac: None,
        });
        log.checkpoints.push(CheckpointRecord {
            step: 1,
            tokens_seen: 10,
            val_loss: Some(0.1 + 0.2),
            val_acc: None,
            params_hash: "ab".into(),
            file: Some("ckpt_000001.rhoc".into()),
        });
        let back = TrainRunLog::from_tsv(&log.steps_to_tsv(), Some(&log.checkpoints_to_tsv())).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let text = "# objective=clm select_ratio=1\nstep\tlr\tloss_all\tloss_sel\tloss_unsel\tsel_count\tunsel_count\ttokens_seen\tsel_clean_frac\n1\t2\n";
        assert!(TrainRunLog::from_tsv(text, None).is_err());
    }
}
