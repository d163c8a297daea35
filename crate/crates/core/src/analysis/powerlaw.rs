//! Least-squares fit of `metric = ln(a * L + c)`.
//!
//! Starting points come from the linearized problem `exp(metric) = a L + c`
//! (exact on noiseless data) and a coarse grid; the best feasible start is
//! refined with damped Gauss-Newton steps that are rejected whenever they
//! would leave the domain `a * L + c > eps` at any point.

use crate::error::{Error, Result};

const DOMAIN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub a: f64,
    pub c: f64,
    pub rmse: f64,
}

impl PowerLawFit {
    pub fn predict(&self, loss: f64) -> f64 {
        (self.a * loss + self.c).ln()
    }
}

fn sse(points: &[(f64, f64)], a: f64, c: f64) -> Option<f64> {
    let mut s = 0.0;
    for &(l, y) in points {
        let arg = a * l + c;
        if !(arg > DOMAIN_EPS) {
            return None;
        }
        s += (arg.ln() - y).powi(2);
    }
    Some(s)
}

/// Ordinary least squares of `exp(y)` on `L`.
fn linearized(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let lm = points.iter().map(|p| p.0).sum::<f64>() / n;
    let em = points.iter().map(|p| p.1.exp()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(l, y) in points {
        sxy += (l - lm) * (y.exp() - em);
        sxx += (l - lm).powi(2);
    }
    let a = sxy / sxx;
    (a, em - a * lm)
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "a two-parameter fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(l, y)| !l.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidArgument("fit points must be finite".into()));
    }
    let lmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let lmax = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if lmax - lmin <= f64::EPSILON * lmax.abs().max(1.0) {
        return Err(Error::InvalidArgument(
            "all points share one loss value; slope and offset are not identifiable".into(),
        ));
    }

    // Candidate starts: the linearized solution plus a grid over slopes
    // (scaled to the data) with the offset matched to the mean metric.
    let mut starts = vec![linearized(points)];
    let ymean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let lmean = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let scale = ymean.exp() / (lmax - lmin);
    for i in -20..=20 {
        let a = scale * i as f64 / 5.0;
        starts.push((a, ymean.exp() - a * lmean));
    }
    let (mut a, mut c, mut best) = starts
        .into_iter()
        .filter_map(|(a, c)| sse(points, a, c).map(|s| (a, c, s)))
        .min_by(|x, y| x.2.total_cmp(&y.2))
        .ok_or_else(|| Error::InvalidArgument("no feasible (a, c) satisfies a * L + c > 0 at every point".into()))?;

    let mut lambda = 1e-3;
    for _ in 0..500 {
        // Normal equations of the Gauss-Newton step, damped by lambda.
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for &(l, y) in points {
            let arg = a * l + c;
            let r = arg.ln() - y;
            let j = [l / arg, 1.0 / arg];
            for p in 0..2 {
                jtr[p] += j[p] * r;
                for q in 0..2 {
                    jtj[p][q] += j[p] * j[q];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let m = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det.abs() < f64::MIN_POSITIVE {
                lambda *= 10.0;
                continue;
            }
            let da = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
            let dc = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            match sse(points, a + da, c + dc) {
                Some(s) if s <= best => {
                    let converged = (best - s) <= 1e-30 + 1e-15 * best
                        && da.abs() <= 1e-13 * a.abs().max(1.0)
                        && dc.abs() <= 1e-13 * c.abs().max(1.0);
                    a += da;
                    c += dc;
                    best = s;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = !converged;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    Ok(PowerLawFit {
        a,
        c,
        rmse: (best / points.len() as f64).sqrt(),
    })
}
