//! Token-level training dynamics: per-token loss across checkpoints, linear
//! trajectory fits, the four-way loss taxonomy, and fluctuation flags.
//!
//! A trajectory `l_0 .. l_n` is fitted by ordinary least squares against
//! `x_i = i`, giving slope `a` and intercept `b`; the fitted change is
//! `ΔL = a * n`. With threshold `τ` (0.2 nats by default):
//! `ΔL < -τ` is H→L, `ΔL > τ` is L→H, and otherwise the token is L→L when
//! `l_n <= mean_last` (the mean last-checkpoint loss of the population) and
//! H→H when above it.

use std::fmt::{self, Write as _};

use crate::corpus::{PackPlan, TokenStream};
use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;
use crate::reference::eval_stream;

pub const DEFAULT_DELTA_THRESHOLD: f64 = 0.2;

/// Share of each category flagged as fluctuating.
pub const FLUCTUATING_FRACTION: f64 = 0.1;

/// Per-token losses under a sequence of checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMatrix {
    /// Stream position of each evaluated target token.
    pub token_index: Vec<usize>,
    /// `tokens_seen` of each column's checkpoint, ascending.
    pub tokens_seen: Vec<u64>,
    /// Token-major: row `t` holds `checkpoints()` losses.
    losses: Vec<f64>,
}

impl TrajectoryMatrix {
    pub fn from_rows(token_index: Vec<usize>, tokens_seen: Vec<u64>, losses: Vec<f64>) -> Result<Self> {
        if losses.len() != token_index.len() * tokens_seen.len() {
            return Err(Error::Shape(format!(
                "{} losses for {} tokens x {} checkpoints",
                losses.len(),
                token_index.len(),
                tokens_seen.len()
            )));
        }
        if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("trajectory entry {i}"),
            });
        }
        Ok(TrajectoryMatrix {
            token_index,
            tokens_seen,
            losses,
        })
    }

    pub fn tokens(&self) -> usize {
        self.token_index.len()
    }

    pub fn checkpoints(&self) -> usize {
        self.tokens_seen.len()
    }

    pub fn trajectory(&self, t: usize) -> &[f64] {
        let c = self.checkpoints();
        &self.losses[t * c..(t + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.tokens()).map(|t| self.trajectory(t)[j]).collect()
    }
}

/// Evaluate every eligible target of `stream` under each checkpoint.
/// Columns are ordered by `tokens_seen` (ties keep input order).
pub fn eval_token_losses(checkpoints: &[ModelCheckpoint], stream: &TokenStream, seq_len: usize) -> Result<TrajectoryMatrix> {
    if checkpoints.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let vocab = checkpoints[0].config().vocab_size;
    if let Some(c) = checkpoints.iter().find(|c| c.config().vocab_size != vocab) {
        return Err(Error::VocabMismatch {
            left: vocab as u32,
            right: c.config().vocab_size as u32,
        });
    }
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by_key(|&i| checkpoints[i].tokens_seen);

    let plan = PackPlan::new(stream.len(), seq_len, 16)?;
    let mut columns = Vec::with_capacity(order.len());
    let mut eligible = Vec::new();
    for &i in &order {
        let e = eval_stream(&checkpoints[i].params, stream, seq_len, plan.batch_rows)?;
        eligible = e.eligible;
        columns.push(e.losses);
    }
    let keep: Vec<usize> = (0..eligible.len()).filter(|&p| eligible[p]).collect();
    let mut losses = Vec::with_capacity(keep.len() * columns.len());
    for &p in &keep {
        losses.extend(columns.iter().map(|col| col[p] as f64));
    }
    TrajectoryMatrix::from_rows(
        keep.iter().map(|&p| p + 1).collect(),
        order.iter().map(|&i| checkpoints[i].tokens_seen).collect(),
        losses,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub a: f64,
    pub b: f64,
    /// Index of the last point, `n`.
    pub n: usize,
}

impl LinearFit {
    pub fn start(&self) -> f64 {
        self.b
    }

    pub fn end(&self) -> f64 {
        self.a * self.n as f64 + self.b
    }

    pub fn delta(&self) -> f64 {
        self.a * self.n as f64
    }
}

/// Least-squares line through `(i, losses[i])`.
pub fn linear_fit(losses: &[f64]) -> Result<LinearFit> {
    if losses.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a trajectory needs at least 2 points, got {}",
            losses.len()
        )));
    }
    let m = losses.len() as f64;
    let x_mean = (m - 1.0) / 2.0;
    let y_mean = losses.iter().sum::<f64>() / m;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in losses.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    let a = sxy / sxx;
    Ok(LinearFit {
        a,
        b: y_mean - a * x_mean,
        n: losses.len() - 1,
    })
}

/// Mean squared residual around the least-squares line.
pub fn fluctuation_score(losses: &[f64]) -> Result<f64> {
    let fit = linear_fit(losses)?;
    let ss: f64 = losses
        .iter()
        .enumerate()
        .map(|(i, &y)| (y - (fit.a * i as f64 + fit.b)).powi(2))
        .sum();
    Ok(ss / losses.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    HighToHigh,
    LowToHigh,
    HighToLow,
    LowToLow,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::HighToHigh,
        Category::LowToHigh,
        Category::HighToLow,
        Category::LowToLow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::HighToHigh => "H->H",
            Category::LowToHigh => "L->H",
            Category::HighToLow => "H->L",
            Category::LowToLow => "L->L",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Category::ALL.into_iter().find(|c| c.as_str() == s)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryLabel {
    pub category: Category,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub last: f64,
}

/// Categorize from a precomputed fit and the trajectory's last loss.
pub fn classify_fit(fit: &LinearFit, last: f64, threshold: f64, mean_last: f64) -> CategoryLabel {
    let delta = fit.delta();
    let category = if delta < -threshold {
        Category::HighToLow
    } else if delta > threshold {
        Category::LowToHigh
    } else if last <= mean_last {
        Category::LowToLow
    } else {
        Category::HighToHigh
    };
    CategoryLabel {
        category,
        a: fit.a,
        b: fit.b,
        delta,
        last,
    }
}

pub fn classify(trajectory: &[f64], threshold: f64, mean_last: f64) -> Result<CategoryLabel> {
    let fit = linear_fit(trajectory)?;
    Ok(classify_fit(&fit, trajectory[trajectory.len() - 1], threshold, mean_last))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CategoryStats {
    pub counts: [usize; 4],
}

impl CategoryStats {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, c: Category) -> usize {
        self.counts[c.slot()]
    }

    pub fn fraction(&self, c: Category) -> f64 {
        self.count(c) as f64 / self.total() as f64
    }
}

pub fn category_stats(labels: &[CategoryLabel]) -> Result<CategoryStats> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels to summarize".into()));
    }
    let mut s = CategoryStats::default();
    for l in labels {
        s.counts[l.category.slot()] += 1;
    }
    Ok(s)
}

/// Flag the top `round(n_c / 10)` residual variances within each category
/// (ties go to the smaller position).
pub fn flag_fluctuating(labels: &[CategoryLabel], variances: &[f64]) -> Vec<bool> {
    let mut flags = vec![false; labels.len()];
    for c in Category::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].category == c).collect();
        let take = (members.len() as f64 * FLUCTUATING_FRACTION).round() as usize;
        members.sort_by(|&x, &y| variances[y].total_cmp(&variances[x]).then(x.cmp(&y)));
        for &i in &members[..take] {
            flags[i] = true;
        }
    }
    flags
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDynamics {
    pub token_index: usize,
    pub label: CategoryLabel,
    pub residual_variance: f64,
    pub fluctuating: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsReport {
    pub mean_last: f64,
    pub threshold: f64,
    pub stats: CategoryStats,
    pub tokens: Vec<TokenDynamics>,
}

pub const DYNAMICS_HEADER: &str =
    "token_index\ta\tb\tdelta_l\tl_n\tcategory\tresidual_variance\tfluctuating";

impl DynamicsReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{DYNAMICS_HEADER}\n");
        for t in &self.tokens {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.token_index,
                t.label.a,
                t.label.b,
                t.label.delta,
                t.label.last,
                t.label.category,
                t.residual_variance,
                t.fluctuating as u8
            )
            .unwrap();
        }
        out
    }

    /// One line per category: name, count, fraction.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("category\tcount\tfraction\n");
        for c in Category::ALL {
            writeln!(out, "{c}\t{}\t{}", self.stats.count(c), self.stats.fraction(c)).unwrap();
        }
        out
    }
}

/// Fit, classify, and flag every trajectory of `matrix`.
pub fn analyze_dynamics(matrix: &TrajectoryMatrix, threshold: f64) -> Result<DynamicsReport> {
    if matrix.tokens() == 0 {
        return Err(Error::InvalidArgument("trajectory matrix has no tokens".into()));
    }
    let n = matrix.checkpoints();
    let mean_last = (0..matrix.tokens()).map(|t| matrix.trajectory(t)[n - 1]).sum::<f64>() / matrix.tokens() as f64;
    let mut labels = Vec::with_capacity(matrix.tokens());
    let mut variances = Vec::with_capacity(matrix.tokens());
    for t in 0..matrix.tokens() {
        let traj = matrix.trajectory(t);
        labels.push(classify(traj, threshold, mean_last)?);
        variances.push(fluctuation_score(traj)?);
    }
    let flags = flag_fluctuating(&labels, &variances);
    let stats = category_stats(&labels)?;
    let tokens = (0..labels.len())
        .map(|t| TokenDynamics {
            token_index: matrix.token_index[t],
            label: labels[t],
            residual_variance: variances[t],
            fluctuating: flags[t],
        })
        .collect();
    Ok(DynamicsReport {
        mean_last,
        threshold,
        stats,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_fit_is_exact() {
        let f = linear_fit(&[2.0, 1.5, 1.0, 0.5]).unwrap();
        assert!((f.a + 0.5).abs() < 1e-12 && (f.b - 2.0).abs() < 1e-12);
        assert!((f.delta() + 1.5).abs() < 1e-12);
        assert!(fluctuation_score(&[2.0, 1.5, 1.0, 0.5]).unwrap() < 1e-24);
        let c = linear_fit(&[0.7; 5]).unwrap();
        assert_eq!((c.a, c.b, c.delta()), (0.0, 0.7, 0.0));
        assert!(linear_fit(&[1.0]).is_err());
    }

    #[test]
    fn residual_variance_examples() {
        // A symmetric zigzag has a flat fit at 2 and residuals of +-1.
        assert!((fluctuation_score(&[1.0, 3.0, 3.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        // An alternating one has slope 0.4; residuals -0.4, 1.2, -1.2, 0.4.
        assert!((fluctuation_score(&[1.0, 3.0, 1.0, 3.0]).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn classification_rules() {
        let hl = classify(&[2.0, 1.5, 1.0, 0.5], 0.2, 1.0).unwrap();
        assert_eq!(hl.category, Category::HighToLow);
        assert_eq!(classify(&[1.0, 1.0], 0.2, 1.0).unwrap().category, Category::LowToLow);
        assert_eq!(classify(&[1.0, 1.25], 0.2, 1.0).unwrap().category, Category::LowToHigh);
        assert_eq!(classify(&[3.0, 3.0], 0.2, 1.0).unwrap().category, Category::HighToHigh);
    }

    #[test]
    fn stats_partition() {
        let mk = |category| CategoryLabel {
            category,
            a: 0.0,
            b: 0.0,
            delta: 0.0,
            last: 0.0,
        };
        let labels: Vec<_> = Category::ALL.into_iter().map(mk).collect();
        let s = category_stats(&labels).unwrap();
        for c in Category::ALL {
            assert_eq!(s.fraction(c), 0.25);
        }
        assert!(category_stats(&[]).is_err());
    }

    #[test]
    fn decile_flags_per_category() {
        let labels: Vec<_> = (0..25)
            .map(|i| CategoryLabel {
                category: if i < 20 { Category::HighToLow } else { Category::LowToLow },
                a: 0.0,
                b: 0.0,
                delta: 0.0,
                last: 0.0,
            })
            .collect();
        let vars: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let flags = flag_fluctuating(&labels, &vars);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 3);
        assert!(flags[19] && flags[18] && flags[24]);
    }
}
