//! Classification statistics: treatment effect between patient groups,
//! patient-wise accuracy/F1, and one-vs-rest macro AUROC.

use std::collections::BTreeMap;

use super::features::N_CLASSES;
use crate::{Error, Result};

/// Average treatment effect: mean per-patient accuracy of the treated group
/// minus the control group's.
pub fn ate(acc_treated: &[f64], acc_control: &[f64]) -> Result<f64> {
    if acc_treated.is_empty() || acc_control.is_empty() {
        return Err(Error::validation("both treatment groups must be non-empty"));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(mean(acc_treated) - mean(acc_control))
}

/// Macro-F1 over the classes present in `labels`; classes with no true or
/// predicted instances contribute an F1 of 0 only when predicted.
pub fn macro_f1(preds: &[usize], labels: &[usize]) -> f64 {
    let mut per_class = Vec::new();
    for class in 0..N_CLASSES {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == class && **l == class)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == class && **l != class)
            .count() as f64;
        let fn_ = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p != class && **l == class)
            .count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue; // class absent from both truth and predictions
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        per_class.push(f1);
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// Per-patient accuracy and macro-F1, averaged unweighted over patients.
/// Returns (accuracy, f1). `roster` optionally pins the patient order and
/// demands every id belong to it.
pub fn patient_wise_metrics(
    preds: &[usize],
    labels: &[usize],
    patient_ids: &[String],
    roster: Option<&[String]>,
) -> Result<(f64, f64)> {
    if preds.len() != labels.len() || preds.len() != patient_ids.len() {
        return Err(Error::validation("metric arrays must be aligned"));
    }
    if preds.is_empty() {
        return Err(Error::validation("metric arrays must be non-empty"));
    }
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for ((p, l), id) in preds.iter().zip(labels).zip(patient_ids) {
        if let Some(r) = roster {
            if !r.iter().any(|x| x == id) {
                return Err(Error::data(format!("unknown patient id {id}")));
            }
        }
        let entry = groups.entry(id.as_str()).or_default();
        entry.0.push(*p);
        entry.1.push(*l);
    }
    let mut acc_sum = 0.0;
    let mut f1_sum = 0.0;
    for (p, l) in groups.values() {
        acc_sum += super::features::accuracy(p, l);
        f1_sum += macro_f1(p, l);
    }
    let n = groups.len() as f64;
    Ok((acc_sum / n, f1_sum / n))
}

/// Per-patient accuracies in patient-id order, for treatment-effect input.
pub fn per_patient_accuracy(
    preds: &[usize],
    labels: &[usize],
    patient_ids: &[String],
) -> Vec<(String, f64)> {
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for ((p, l), id) in preds.iter().zip(labels).zip(patient_ids) {
        let entry = groups.entry(id.as_str()).or_default();
        entry.0.push(*p);
        entry.1.push(*l);
    }
    groups
        .into_iter()
        .map(|(id, (p, l))| (id.to_string(), super::features::accuracy(&p, &l)))
        .collect()
}

/// Area under the ROC curve for one class scored against the rest, by the
/// rank statistic: ties in score contribute half.
fn auroc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut wins = 0.0;
    for (si, &pi) in scores.iter().zip(positive) {
        if !pi {
            continue;
        }
        for (sj, &pj) in scores.iter().zip(positive) {
            if pj {
                continue;
            }
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos as f64 * neg as f64))
}

/// One-vs-rest macro AUROC over classes present in the labels.
/// `probabilities` is flat N x 5, `labels` class indices.
pub fn auroc_ovr_macro(probabilities: &[f64], labels: &[usize]) -> Result<f64> {
    if probabilities.len() != labels.len() * N_CLASSES {
        return Err(Error::validation("probability matrix does not match labels"));
    }
    let mut aucs = Vec::new();
    for class in 0..N_CLASSES {
        let scores: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, _)| probabilities[i * N_CLASSES + class])
            .collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if let Some(a) = auroc_binary(&scores, &positive) {
            aucs.push(a);
        }
    }
    if aucs.is_empty() {
        return Err(Error::data("no class has both positive and negative examples"));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn treatment_effect_reference_points() {
        assert_eq!(ate(&[1.0, 0.5], &[0.5, 0.5]).unwrap(), 0.25);
        assert_eq!(ate(&[0.7, 0.3], &[0.7, 0.3]).unwrap(), 0.0);
        assert_eq!(ate(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(ate(&[], &[0.5]).unwrap_err().is_validation());
    }

    #[test]
    fn patient_metrics_average_per_patient() {
        // Patient a all correct, patient b all wrong.
        let preds = vec![0, 1, 2, 3];
        let labels = vec![0, 1, 0, 1];
        let ids: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let (acc, f1) = patient_wise_metrics(&preds, &labels, &ids, None).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(f1, 0.5); // a: perfect F1 1, b: no true positives F1 0
    }

    #[test]
    fn single_patient_reduces_to_plain_accuracy() {
        let preds = vec![0, 1, 1, 0];
        let labels = vec![0, 1, 0, 0];
        let ids: Vec<String> = vec!["p".into(); 4];
        let (acc, _) = patient_wise_metrics(&preds, &labels, &ids, None).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn three_patient_case_matches_the_hand_computation() {
        // p1: [ok, ok] -> 1.0; p2: [ok, wrong] -> 0.5; p3: [wrong] -> 0.0.
        let preds = vec![0, 1, 2, 0, 4];
        let labels = vec![0, 1, 2, 3, 2];
        let ids: Vec<String> = ["p1", "p1", "p2", "p2", "p3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (acc, _) = patient_wise_metrics(&preds, &labels, &ids, None).unwrap();
        assert!((acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn roster_rejects_unknown_ids() {
        let roster: Vec<String> = vec!["a".into()];
        let err = patient_wise_metrics(&[0], &[0], &["b".to_string()], Some(&roster)).unwrap_err();
        assert!(!err.is_validation());
    }

    #[test]
    fn auroc_reference_points() {
        // Perfect separation for class 1 vs rest.
        let probs = vec![
            0.9, 0.1, 0.0, 0.0, 0.0, // label 0
            0.2, 0.8, 0.0, 0.0, 0.0, // label 1
            0.7, 0.3, 0.0, 0.0, 0.0, // label 0
        ];
        let auc = auroc_ovr_macro(&probs, &[0, 1, 0]).unwrap();
        assert_eq!(auc, 1.0);

        // Identical scores everywhere: every pair ties at 0.5.
        let flat = vec![0.2; 2 * N_CLASSES];
        let auc = auroc_ovr_macro(&flat, &[0, 1]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn per_patient_accuracy_orders_by_id() {
        let accs = per_patient_accuracy(
            &[0, 1],
            &[0, 0],
            &["z".to_string(), "a".to_string()],
        );
        assert_eq!(accs[0].0, "a");
        assert_eq!(accs[0].1, 0.0);
        assert_eq!(accs[1].1, 1.0);
    }
}
