//! Static HTML rendering of which tokens a checkpoint selects.
//!
//! With one snapshot, tokens are styled selected / unselected. With several,
//! each snapshot gets its own section and tokens are coloured by the
//! quintile of their excess loss within that snapshot, from blue (lowest)
//! through black to orange (highest).

use std::fmt::Write as _;

use super::{plan_losses, plan_selection};
use crate::corpus::{PackPlan, SpanLabel, TokenStream, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;
use crate::reference::ScoreFile;

/// Text colours for excess-loss quintiles 0 (lowest) to 4 (highest).
pub const BUCKET_COLORS: [(u8, u8, u8); 5] = [(0, 0, 255), (30, 144, 255), (0, 0, 0), (255, 180, 150), (255, 100, 0)];

/// One checkpoint's view of a stream prefix, indexed by score position.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSnapshot {
    pub label: String,
    pub tokens_seen: u64,
    pub excess: Vec<f32>,
    pub selected: Vec<bool>,
    /// Excess-loss quintile of each position, 0..=4.
    pub buckets: Vec<u8>,
}

impl SelectionSnapshot {
    pub fn new(label: impl Into<String>, tokens_seen: u64, excess: Vec<f32>, selected: Vec<bool>) -> Result<Self> {
        if excess.len() != selected.len() {
            return Err(Error::Shape("excess and selection flags differ in length".into()));
        }
        let buckets = quintile_buckets(&excess);
        Ok(SelectionSnapshot {
            label: label.into(),
            tokens_seen,
            excess,
            selected,
            buckets,
        })
    }

    pub fn len(&self) -> usize {
        self.excess.len()
    }

    pub fn is_empty(&self) -> bool {
        self.excess.is_empty()
    }

    /// Share of selected positions whose target carries the clean label.
    pub fn selected_clean_fraction(&self, stream: &TokenStream) -> Option<f64> {
        stream.labels()?;
        let (mut clean, mut total) = (0usize, 0usize);
        for (i, &s) in self.selected.iter().enumerate() {
            if s {
                total += 1;
                clean += (stream.label_at(i + 1) == Some(SpanLabel::Clean)) as usize;
            }
        }
        (total > 0).then(|| clean as f64 / total as f64)
    }
}

/// Rank-based quintiles: the `r`-th smallest of `n` values (ties by
/// position) falls in bucket `floor(5 r / n)`.
pub fn quintile_buckets(values: &[f32]) -> Vec<u8> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut buckets = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        buckets[i] = (rank * 5 / n) as u8;
    }
    buckets
}

/// Compute a snapshot over the first `max_batches` batches of `batch_rows`
/// rows, selecting within each batch as the trainer does.
pub fn selection_snapshot(
    ckpt: &ModelCheckpoint,
    label: impl Into<String>,
    stream: &TokenStream,
    scores: &ScoreFile,
    ratio: f64,
    batch_rows: usize,
    max_batches: Option<usize>,
) -> Result<SelectionSnapshot> {
    let seq_len = scores.seq_len as usize;
    scores.check_alignment(stream, seq_len)?;
    let plan = PackPlan::new(stream.len(), seq_len, batch_rows)?;
    let batches = max_batches.map_or(plan.n_batches(), |m| m.min(plan.n_batches()));
    let losses = plan_losses(ckpt, stream, &plan, batches)?;
    let (excess, selected) = plan_selection(&losses, stream, scores, &plan, batches, ratio)?;
    SelectionSnapshot::new(label, ckpt.tokens_seen, excess, selected)
}

fn escape_token(out: &mut String, id: u32) {
    match id {
        Vocabulary::BOS => out.push_str("&lt;bos&gt;"),
        Vocabulary::EOS => out.push_str("&lt;eos&gt;\n"),
        Vocabulary::PAD => out.push_str("&lt;pad&gt;"),
        b if b == u32::from(b'\n') => out.push_str("\u{21b5}\n"),
        b if b == u32::from(b'<') => out.push_str("&lt;"),
        b if b == u32::from(b'>') => out.push_str("&gt;"),
        b if b == u32::from(b'&') => out.push_str("&amp;"),
        b if (0x20..0x7f).contains(&b) => out.push(b as u8 as char),
        b => {
            write!(out, "\\x{b:02x}").unwrap();
        }
    }
}

/// Render the stream prefix covered by `snapshots` as a standalone HTML
/// document. Every stream token in the prefix is emitted exactly once per
/// section as a `<span data-i=...>`; the first token is never a prediction
/// target and is styled as unscored.
pub fn highlight_report(stream: &TokenStream, snapshots: &[SelectionSnapshot], title: &str) -> Result<String> {
    let n = snapshots.first().map_or(0, |s| s.len());
    if snapshots.iter().any(|s| s.len() != n) {
        return Err(Error::Shape("snapshots cover different numbers of positions".into()));
    }
    if n + 1 > stream.len() {
        return Err(Error::Shape(format!(
            "snapshots cover {n} targets but the stream has {} tokens",
            stream.len()
        )));
    }
    let single = snapshots.len() == 1;
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\n<title>");
    html.push_str(&title.replace('&', "&amp;").replace('<', "&lt;"));
    html.push_str("</title>\n<style>\n");
    html.push_str("body{font-family:sans-serif;margin:2em}\n");
    html.push_str(".t{font-family:monospace;white-space:pre-wrap;line-height:1.5}\n");
    html.push_str(".u{color:#999}\n.s{color:#000;background:#cfe3ff}\n.n{color:#bbb}\n");
    for (b, (r, g, bl)) in BUCKET_COLORS.iter().enumerate() {
        writeln!(html, ".b{b}{{color:rgb({r},{g},{bl})}}").unwrap();
    }
    html.push_str("</style></head><body>\n");
    writeln!(html, "<h1>{}</h1>", title.replace('&', "&amp;").replace('<', "&lt;")).unwrap();
    if single {
        html.push_str("<p>Highlighted: selected tokens. Grey: unselected.</p>\n");
    } else {
        html.push_str("<p>Colour: excess-loss quintile, from ");
        for b in 0..5 {
            write!(html, "<span class=\"b{b}\">q{b}</span> ").unwrap();
        }
        html.push_str("(lowest to highest).</p>\n");
    }
    for snap in snapshots {
        write!(
            html,
            "<section><h2>{} ({} tokens seen)</h2>\n<div class=\"t\">",
            snap.label.replace('&', "&amp;").replace('<', "&lt;"),
            snap.tokens_seen
        )
        .unwrap();
        html.push_str("<span class=\"u\" data-i=\"0\">");
        escape_token(&mut html, stream.tokens()[0]);
        html.push_str("</span>");
        for i in 0..n {
            let class = if single {
                if snap.selected[i] {
                    "s".to_string()
                } else {
                    "n".to_string()
                }
            } else {
                format!("b{}", snap.buckets[i])
            };
            write!(html, "<span class=\"{class}\" data-i=\"{}\">", i + 1).unwrap();
            escape_token(&mut html, stream.tokens()[i + 1]);
            html.push_str("</span>");
        }
        html.push_str("</div></section>\n");
    }
    html.push_str("</body></html>\n");
    Ok(html)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_distinct_values_give_two_per_bucket() {
        let v: Vec<f32> = vec![0.3, -1.0, 2.0, 0.1, 5.0, 4.0, -3.0, 0.0, 1.0, 7.0];
        let b = quintile_buckets(&v);
        for q in 0..5u8 {
            assert_eq!(b.iter().filter(|&&x| x == q).count(), 2);
        }
        assert_eq!(b[6], 0);
        assert_eq!(b[9], 4);
    }

    #[test]
    fn all_selected_renders_every_token_selected() {
        let s = TokenStream::new(259, vec![256, 104, 105, 60, 257]).unwrap();
        let snap = SelectionSnapshot::new("final", 100, vec![0.1, 0.2, 0.3, 0.4], vec![true; 4]).unwrap();
        let html = highlight_report(&s, &[snap], "t").unwrap();
        assert_eq!(html.matches("data-i=").count(), 5);
        assert_eq!(html.matches("class=\"s\" data-i").count(), 4);
        assert!(html.contains("&lt;"));
    }

    #[test]
    fn multi_snapshot_sections_cover_each_token_once() {
        let s = TokenStream::new(259, (0..30).map(|i| 97 + i % 26).collect()).unwrap();
        let snaps: Vec<_> = (0..4)
            .map(|k| SelectionSnapshot::new(format!("c{k}"), k, (0..20).map(|i| (i * k) as f32).collect(), vec![false; 20]).unwrap())
            .collect();
        let html = highlight_report(&s, &snaps, "t").unwrap();
        assert_eq!(html.matches("<section>").count(), 4);
        for i in 0..=20 {
            assert_eq!(html.matches(&format!("data-i=\"{i}\"")).count(), 4);
        }
    }
}
