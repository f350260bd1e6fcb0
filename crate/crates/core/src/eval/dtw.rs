//! Dynamic time warping with absolute-difference local cost, full window,
//! and the standard match/insert/delete recurrence. Multi-lead records are
//! scored as the mean over leads. A derivative variant warps local slope
//! estimates instead of raw samples.

use crate::{Error, Result, F};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtwVariant {
    Classic,
    Derivative,
}

/// Keogh-style derivative estimate: average of the step behind and half the
/// span around each interior sample; endpoints copy their neighbor.
fn derivative(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 1 {
        return vec![0.0];
    }
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = ((x[i] - x[i - 1]) + (x[i + 1] - x[i - 1]) / 2.0) / 2.0;
    }
    d[0] = d[1.min(n - 1)];
    d[n - 1] = d[n - 2];
    d
}

pub fn dtw(x: &[f64], y: &[f64], variant: DtwVariant) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::validation("dtw inputs must be non-empty"));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::data("dtw inputs must be finite"));
    }
    let (xs, ys) = match variant {
        DtwVariant::Classic => (x.to_vec(), y.to_vec()),
        DtwVariant::Derivative => (derivative(x), derivative(y)),
    };
    let (n, m) = (xs.len(), ys.len());
    // Rolling two-row table of cumulative costs.
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = (xs[i - 1] - ys[j - 1]).abs();
            let best = prev[j - 1].min(prev[j]).min(curr[j - 1]);
            curr[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

/// Mean DTW over the 12 leads of two equal-layout sample buffers.
pub fn dtw_multilead(
    a: &[F],
    b: &[F],
    leads: usize,
    samples_per_lead: usize,
    variant: DtwVariant,
) -> Result<f64> {
    if a.len() != leads * samples_per_lead || b.len() != leads * samples_per_lead {
        return Err(Error::validation(format!(
            "lead buffers of {} and {} values cannot fill {leads} x {samples_per_lead}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for lead in 0..leads {
        let s = lead * samples_per_lead;
        let e = s + samples_per_lead;
        let xa: Vec<f64> = a[s..e].iter().map(|&v| v as f64).collect();
        let xb: Vec<f64> = b[s..e].iter().map(|&v| v as f64).collect();
        total += dtw(&xa, &xb, variant)?;
    }
    Ok(total / leads as f64)
}
