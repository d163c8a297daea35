//! Packing a long stream into fixed-length training rows.
//!
//! Row `r` reads stream tokens `r*seq_len ..= r*seq_len + seq_len`: inputs are
//! the first `seq_len` of those, targets the last `seq_len`. Consecutive rows
//! therefore share one boundary token, every stream token after the first is
//! a target exactly once, and tokens past the last full window are dropped.
//! Target `t` of global row `r` has flat score index `r*seq_len + t`, which is
//! how reference scores stay aligned with training batches.

use super::{TokenStream, Vocabulary};
use crate::error::{Error, Result};

/// Geometry of a packed stream, independent of the token contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackPlan {
    pub seq_len: usize,
    pub batch_rows: usize,
    pub n_rows: usize,
}

/// A group of consecutive packed rows, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub rows: usize,
    pub seq_len: usize,
    /// Global index of this batch's first row within the packed stream.
    pub first_row: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// True where the input token is the first token after an EOS.
    pub doc_boundary: Vec<bool>,
}

impl PackedBatch {
    pub fn len(&self) -> usize {
        self.rows * self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Flat index into the stream's score array for local position `i`.
    pub fn score_index(&self, i: usize) -> usize {
        self.first_row * self.seq_len + i
    }

    /// Stream position of the token predicted at local position `i`.
    pub fn target_stream_index(&self, i: usize) -> usize {
        self.score_index(i) + 1
    }

    /// Targets that take part in ranking and loss normalization: BOS and PAD
    /// targets carry no information about the text.
    pub fn eligible(&self) -> Vec<bool> {
        self.targets
            .iter()
            .map(|&t| t != Vocabulary::BOS && t != Vocabulary::PAD)
            .collect()
    }

    /// Build a batch directly from row-major inputs and targets.
    pub fn from_rows(rows: usize, seq_len: usize, inputs: Vec<u32>, targets: Vec<u32>) -> Result<Self> {
        if inputs.len() != rows * seq_len || targets.len() != rows * seq_len {
            return Err(Error::Shape(format!(
                "batch of {rows}x{seq_len} needs {} inputs and targets, got {} and {}",
                rows * seq_len,
                inputs.len(),
                targets.len()
            )));
        }
        let doc_boundary = vec![false; inputs.len()];
        Ok(PackedBatch {
            rows,
            seq_len,
            first_row: 0,
            inputs,
            targets,
            doc_boundary,
        })
    }
}

impl PackPlan {
    pub fn new(stream_len: usize, seq_len: usize, batch_rows: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::InvalidArgument(format!("seq_len must be at least 2, got {seq_len}")));
        }
        if batch_rows == 0 {
            return Err(Error::InvalidArgument("batch_rows must be positive".into()));
        }
        if stream_len < seq_len + 1 {
            return Err(Error::StreamTooShort {
                len: stream_len,
                needed: seq_len + 1,
            });
        }
        Ok(PackPlan {
            seq_len,
            batch_rows,
            n_rows: (stream_len - 1) / seq_len,
        })
    }

    /// Number of target positions covered by packing.
    pub fn scoreable(&self) -> usize {
        self.n_rows * self.seq_len
    }

    /// Stream tokens consumed, including the first (input-only) token.
    pub fn consumed(&self) -> usize {
        self.scoreable() + 1
    }

    /// Batches including a trailing partial one.
    pub fn n_batches(&self) -> usize {
        self.n_rows.div_ceil(self.batch_rows)
    }

    /// Batches holding exactly `batch_rows` rows.
    pub fn full_batches(&self) -> usize {
        self.n_rows / self.batch_rows
    }

    pub fn batch(&self, stream: &TokenStream, index: usize) -> PackedBatch {
        assert!(index < self.n_batches(), "batch {index} out of range");
        let first_row = index * self.batch_rows;
        let rows = self.batch_rows.min(self.n_rows - first_row);
        self.rows(stream, first_row, rows)
    }

    /// Pack `rows` consecutive rows starting at global row `first_row`.
    pub fn rows(&self, stream: &TokenStream, first_row: usize, rows: usize) -> PackedBatch {
        assert!(first_row + rows <= self.n_rows);
        let s = self.seq_len;
        let toks = stream.tokens();
        let mut inputs = Vec::with_capacity(rows * s);
        let mut targets = Vec::with_capacity(rows * s);
        let mut doc_boundary = Vec::with_capacity(rows * s);
        for r in first_row..first_row + rows {
            let base = r * s;
            inputs.extend_from_slice(&toks[base..base + s]);
            targets.extend_from_slice(&toks[base + 1..base + s + 1]);
            doc_boundary.extend((base..base + s).map(|p| p > 0 && toks[p - 1] == Vocabulary::EOS));
        }
        PackedBatch {
            rows,
            seq_len: s,
            first_row,
            inputs,
            targets,
            doc_boundary,
        }
    }
}

/// Pack an entire stream into batches of `batch_rows` rows (the last batch
/// may hold fewer rows).
pub fn pack(stream: &TokenStream, seq_len: usize, batch_rows: usize) -> Result<Vec<PackedBatch>> {
    let plan = PackPlan::new(stream.len(), seq_len, batch_rows)?;
    Ok((0..plan.n_batches()).map(|i| plan.batch(stream, i)).collect())
}
