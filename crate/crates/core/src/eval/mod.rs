//! Fidelity, utility, and privacy metrics: feature-space Fréchet distance,
//! classifier score, k-NN precision/recall, DTW, treatment-effect and
//! patient-wise statistics, membership-inference risk, and the
//! experimental/control detection protocol.

pub mod detection;
pub mod dtw;
pub mod features;
pub mod frechet;
pub mod knn;
pub mod localize;
pub mod membership;
pub mod report;
pub mod rs;
pub mod stats;

use std::collections::BTreeMap;

use crate::Result;

pub use detection::{detection_experiment, DetectionOutcome};
pub use dtw::{dtw, dtw_multilead, DtwVariant};
pub use features::{Classifier, FeatureSet, FEATURE_DIM, N_CLASSES};
pub use frechet::frechet_distance;
pub use knn::knn_precision_recall;
pub use localize::{localization_iou, random_mask_baseline};
pub use membership::membership_inference_risk;
pub use report::{full_report, membership_sweep, train_split_twins, PrivacyReport, ReportOptions};
pub use rs::score_metric;
pub use stats::{ate, auroc_ovr_macro, patient_wise_metrics};

/// One row of the results tables: fidelity, utility, and privacy numbers.
/// Producers fill the fields they compute and leave the rest at zero;
/// serialized JSON always carries every key.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub frd: f64,
    pub rs: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub dtw_mean: f64,
    pub ate: f64,
    pub membership_f1_by_tau: BTreeMap<String, f64>,
    pub patient_acc: f64,
    pub patient_f1: f64,
    pub ecg_acc: f64,
    pub ecg_f1: f64,
    pub auroc: f64,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Canonical map key for a τ threshold: plain decimal, no trailing zeros.
pub fn tau_key(tau: f64) -> String {
    format!("{tau}")
}
