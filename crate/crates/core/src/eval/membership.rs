//! Membership-inference risk: an adversary claims a target was in the
//! training set when its nearest synthetic feature lies within
//! epsilon = tau x (mean distance over all target-synthetic pairs).

use std::collections::BTreeMap;

use super::features::{dist2, FeatureSet};
use super::tau_key;
use crate::{Error, Result};

/// F1 of the membership claim per tau. Targets are train (members) then
/// holdout (non-members); distances are Euclidean in feature space. tau = 0
/// predicts nobody and scores 0 by definition.
pub fn membership_inference_risk(
    train: &FeatureSet,
    synth: &FeatureSet,
    holdout: &FeatureSet,
    tau_values: &[f64],
) -> Result<BTreeMap<String, f64>> {
    if synth.n == 0 {
        return Err(Error::validation("synthetic feature set is empty"));
    }
    if train.n == 0 || holdout.n == 0 {
        return Err(Error::validation("target feature sets must be non-empty"));
    }
    if train.d != synth.d || holdout.d != synth.d {
        return Err(Error::validation("feature dimensions differ across sets"));
    }
    // min distance to any synthetic point, per target; train first.
    let min_dists: Vec<f64> = (0..train.n)
        .map(|i| train.row(i))
        .chain((0..holdout.n).map(|i| holdout.row(i)))
        .map(|t| {
            (0..synth.n)
                .map(|j| dist2(t, synth.row(j)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut mean = 0.0;
    for i in 0..train.n {
        for j in 0..synth.n {
            mean += dist2(train.row(i), synth.row(j)).sqrt();
        }
    }
    for i in 0..holdout.n {
        for j in 0..synth.n {
            mean += dist2(holdout.row(i), synth.row(j)).sqrt();
        }
    }
    mean /= ((train.n + holdout.n) * synth.n) as f64;

    let mut out = BTreeMap::new();
    for &tau in tau_values {
        if !(tau >= 0.0) {
            return Err(Error::validation(format!("tau must be >= 0, got {tau}")));
        }
        let eps = tau * mean;
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (idx, &d) in min_dists.iter().enumerate() {
            let member = idx < train.n;
            let claimed = d < eps;
            match (claimed, member) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => {}
            }
        }
        let f1 = if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
        out.insert(tau_key(tau), f1);
    }
    Ok(out)
}

/// The analytic F1 ceiling when every target is claimed a member:
/// 2p / (p + 1) with p the members' share of the targets.
pub fn saturation_f1(n_train: usize, n_holdout: usize) -> f64 {
    let p = n_train as f64 / (n_train + n_holdout) as f64;
    2.0 * p / (p + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecgtwin_nn::seed::Stream;

    fn set(seed: u64, n: usize, d: usize, shift: f64) -> FeatureSet {
        let mut s = Stream::named(seed, "mem.test");
        let flat: Vec<f64> = (0..n * d).map(|_| shift + s.normal()).collect();
        FeatureSet::new(flat, n, d, "test").unwrap()
    }

    #[test]
    fn tau_zero_scores_zero_and_infinity_saturates() {
        let train = set(1, 8, 3, 0.0);
        let holdout = set(2, 4, 3, 0.0);
        let synth = set(3, 6, 3, 0.0);
        let map =
            membership_inference_risk(&train, &synth, &holdout, &[0.0, 1e12]).unwrap();
        assert_eq!(map[&tau_key(0.0)], 0.0);
        let sat = saturation_f1(8, 4);
        assert!((map[&tau_key(1e12)] - sat).abs() < 1e-12);
        assert!((sat - 0.8).abs() < 1e-12); // p = 2/3 -> 2p/(p+1) = 0.8
    }

    #[test]
    fn copied_train_features_are_maximally_risky_at_tiny_tau() {
        let train = set(4, 10, 3, 0.0);
        let holdout = set(5, 5, 3, 50.0);
        let synth = train.clone();
        let map = membership_inference_risk(&train, &synth, &holdout, &[1e-9]).unwrap();
        // Every train target hits distance 0 < eps; every holdout is far.
        assert_eq!(map[&tau_key(1e-9)], 1.0);
    }

    #[test]
    fn matches_the_brute_force_oracle_across_the_tau_grid() {
        let train = set(6, 12, 4, 0.0);
        let holdout = set(7, 9, 4, 1.0);
        let synth = set(8, 15, 4, 0.3);
        let taus: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let map = membership_inference_risk(&train, &synth, &holdout, &taus).unwrap();

        // Oracle: fully independent recomputation with flat loops.
        let all_targets: Vec<(Vec<f64>, bool)> = (0..train.n)
            .map(|i| (train.row(i).to_vec(), true))
            .chain((0..holdout.n).map(|i| (holdout.row(i).to_vec(), false)))
            .collect();
        let mut pair_sum = 0.0;
        for (t, _) in &all_targets {
            for j in 0..synth.n {
                pair_sum += dist2(t, synth.row(j)).sqrt();
            }
        }
        let mean = pair_sum / (all_targets.len() * synth.n) as f64;
        for &tau in &taus {
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            for (t, member) in &all_targets {
                let min_d = (0..synth.n)
                    .map(|j| dist2(t, synth.row(j)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                let claimed = min_d < tau * mean;
                if claimed && *member {
                    tp += 1;
                } else if claimed {
                    fp += 1;
                } else if *member {
                    fn_ += 1;
                }
            }
            let oracle = if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
            };
            let got = map[&tau_key(tau)];
            assert_eq!(got, oracle, "tau = {tau}");
        }
    }

    #[test]
    fn empty_synth_is_a_validation_error() {
        let train = set(9, 3, 2, 0.0);
        let holdout = set(10, 3, 2, 0.0);
        let synth = FeatureSet::new(vec![], 0, 2, "synint").unwrap();
        assert!(
            membership_inference_risk(&train, &synth, &holdout, &[1.0])
                .unwrap_err()
                .is_validation()
        );
    }
}
