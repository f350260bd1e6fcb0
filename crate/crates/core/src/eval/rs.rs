//! Classifier score: exp of the mean KL divergence from each row's class
//! distribution to the batch marginal. 1 for uniform rows, 5 for balanced
//! one-hot rows over the five classes.

use super::features::N_CLASSES;
use crate::{Error, Result};

pub fn score_metric(probabilities: &[f64]) -> Result<f64> {
    if probabilities.is_empty() || probabilities.len() % N_CLASSES != 0 {
        return Err(Error::validation(format!(
            "probability matrix of {} values is not N x {N_CLASSES}",
            probabilities.len()
        )));
    }
    let n = probabilities.len() / N_CLASSES;
    for (i, row) in probabilities.chunks(N_CLASSES).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::validation(format!(
                "row {i} is not a probability distribution (sum {sum})"
            )));
        }
    }
    let mut marginal = [0.0; N_CLASSES];
    for row in probabilities.chunks(N_CLASSES) {
        for (m, p) in marginal.iter_mut().zip(row) {
            *m += p;
        }
    }
    for m in &mut marginal {
        *m /= n as f64;
    }
    let mut mean_kl = 0.0;
    for row in probabilities.chunks(N_CLASSES) {
        let mut kl = 0.0;
        for (p, m) in row.iter().zip(&marginal) {
            if *p > 0.0 {
                kl += p * (p / m).ln();
            }
        }
        mean_kl += kl;
    }
    mean_kl /= n as f64;
    Ok(mean_kl.exp())
}
