//! Excess-loss token selection and the selective objective.
//!
//! Each step ranks the step's tokens by `current loss - reference loss` and
//! keeps the top `ceil(n * ratio)` of them in the loss; the rest contribute
//! nothing to the gradient.

mod log;
mod train;

pub use log::{CheckpointRecord, StepRecord, TrainRunLog};
pub use train::{train, train_with_progress, Objective, TrainConfig, TrainOutput, ValidationSet};

use crate::error::{Error, Result};
use crate::model::PerTokenLoss;

/// Per-token flags marking the selected tokens of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    pub flags: Vec<bool>,
    pub selected_count: usize,
    /// Ratio in parts per billion, kept as an integer so the mask is `Eq`.
    ratio_ppb: u64,
}

impl SelectionMask {
    pub fn ratio(&self) -> f64 {
        self.ratio_ppb as f64 * 1e-9
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn selected_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i)
    }

    /// Mask from explicit flags; the recorded ratio is the realized share.
    pub fn from_flags(flags: Vec<bool>) -> Self {
        let selected_count = flags.iter().filter(|&&f| f).count();
        let ratio_ppb = if flags.is_empty() {
            0
        } else {
            (selected_count as u128 * PPB / flags.len() as u128) as u64
        };
        SelectionMask {
            flags,
            selected_count,
            ratio_ppb,
        }
    }

    /// Mask with every token selected.
    pub fn all(n: usize) -> Self {
        SelectionMask {
            flags: vec![true; n],
            selected_count: n,
            ratio_ppb: 1_000_000_000,
        }
    }
}

const PPB: u128 = 1_000_000_000;

fn ratio_to_ppb(ratio: f64) -> u64 {
    (ratio * 1e9).round() as u64
}

/// `ceil(n * ratio)`, with the ratio taken to nine decimal places and the
/// product formed in integers. A plain `(n as f64 * ratio).ceil()` can land
/// one too high: 0.1 is stored slightly above 1/10, so 10 * 0.1 may exceed 1.
pub fn selection_size(n: usize, ratio: f64) -> usize {
    let ppb = ratio_to_ppb(ratio) as u128;
    ((n as u128 * ppb).div_ceil(PPB)) as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) || ratio_to_ppb(ratio) == 0 {
        return Err(Error::InvalidArgument(format!(
            "select ratio must be in (0, 1] with at least nine-decimal resolution, got {ratio}"
        )));
    }
    Ok(())
}

/// `train - reference`, elementwise. Negative values are expected wherever
/// the current model already beats the reference.
pub fn excess_loss(train_losses: &[f32], ref_losses: &[f32]) -> Result<Vec<f32>> {
    if train_losses.len() != ref_losses.len() {
        return Err(Error::Shape(format!(
            "{} training losses against {} reference losses",
            train_losses.len(),
            ref_losses.len()
        )));
    }
    Ok(train_losses.iter().zip(ref_losses).map(|(a, b)| a - b).collect())
}

/// Flag the `ceil(n * ratio)` largest values. Ties go to the smaller index.
pub fn select_topk(excess: &[f32], ratio: f64) -> Result<SelectionMask> {
    check_ratio(ratio)?;
    if excess.is_empty() {
        return Err(Error::InvalidArgument("cannot select from an empty batch".into()));
    }
    let n = excess.len();
    let k = selection_size(n, ratio).min(n);
    let mut flags = vec![false; n];
    if k == n {
        flags.iter_mut().for_each(|f| *f = true);
    } else {
        let mut order: Vec<u32> = (0..n as u32).collect();
        let cmp = |a: &u32, b: &u32| {
            excess[*b as usize]
                .total_cmp(&excess[*a as usize])
                .then(a.cmp(b))
        };
        order.select_nth_unstable_by(k, cmp);
        for &i in &order[..k] {
            flags[i as usize] = true;
        }
    }
    Ok(SelectionMask {
        flags,
        selected_count: k,
        ratio_ppb: ratio_to_ppb(ratio),
    })
}

/// Top-k restricted to eligible positions; ineligible positions are never
/// selected and do not count toward `n`.
pub fn select_topk_eligible(excess: &[f32], eligible: &[bool], ratio: f64) -> Result<SelectionMask> {
    if excess.len() != eligible.len() {
        return Err(Error::Shape("eligibility mask length differs from batch".into()));
    }
    let idx: Vec<usize> = (0..excess.len()).filter(|&i| eligible[i]).collect();
    let compact: Vec<f32> = idx.iter().map(|&i| excess[i]).collect();
    let inner = select_topk(&compact, ratio)?;
    let mut flags = vec![false; excess.len()];
    for (j, &i) in idx.iter().enumerate() {
        flags[i] = inner.flags[j];
    }
    Ok(SelectionMask {
        flags,
        selected_count: inner.selected_count,
        ratio_ppb: inner.ratio_ppb,
    })
}

/// Mean loss over selected tokens.
pub fn slm_loss(per_token: &PerTokenLoss<f32>, mask: &SelectionMask) -> Result<f64> {
    if per_token.values.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} losses against a mask of {}",
            per_token.values.len(),
            mask.len()
        )));
    }
    if mask.selected_count == 0 {
        return Err(Error::InvalidArgument("selection is empty".into()));
    }
    let sum: f64 = mask.selected_indices().map(|i| per_token.values[i] as f64).sum();
    Ok(sum / mask.selected_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(values: Vec<f32>) -> PerTokenLoss<f32> {
        PerTokenLoss {
            rows: 1,
            seq_len: values.len(),
            values,
        }
    }

    #[test]
    fn excess_is_a_difference() {
        assert_eq!(excess_loss(&[2.0, 1.0], &[0.5, 1.5]).unwrap(), vec![1.5, -0.5]);
        assert_eq!(excess_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert!(excess_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn worked_selection_example() {
        let m = select_topk(&[0.5, -0.1, 0.3, 0.0, 0.9], 0.4).unwrap();
        assert_eq!(m.selected_indices().collect::<Vec<_>>(), vec![0, 4]);
        assert_eq!(m.selected_count, 2);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = select_topk(&[1.0; 5], 0.4).unwrap();
        assert_eq!(m.selected_indices().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn full_ratio_selects_everything() {
        let m = select_topk(&[3.0, -1.0, 2.0], 1.0).unwrap();
        assert!(m.flags.iter().all(|&f| f));
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(select_topk(&[], 0.5).is_err());
        assert!(select_topk(&[1.0], 0.0).is_err());
        assert!(select_topk(&[1.0], 1.5).is_err());
    }

    #[test]
    fn eligible_selection_skips_masked_positions() {
        let m = select_topk_eligible(&[9.0, 1.0, 2.0, 3.0], &[false, true, true, true], 0.5).unwrap();
        assert_eq!(m.selected_count, 2);
        assert_eq!(m.flags, vec![false, false, true, true]);
    }

    #[test]
    fn selective_loss_examples() {
        let l = loss(vec![1.0, 3.0, 5.0]);
        let mut m = SelectionMask::all(3);
        assert_eq!(slm_loss(&l, &m).unwrap(), 3.0);
        m.flags = vec![false, false, true];
        m.selected_count = 1;
        assert_eq!(slm_loss(&l, &m).unwrap(), 5.0);
        m.flags = vec![false; 3];
        m.selected_count = 0;
        assert!(slm_loss(&l, &m).is_err());
    }
}
