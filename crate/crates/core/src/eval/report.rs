//! Full-model scoring: composes the fidelity, utility, and privacy metrics
//! over a trained model and its corpus into one `MetricReport`, plus the
//! standalone membership sweep.

use std::collections::BTreeMap;

use ecgtwin_nn::ParamStore;

use super::detection::detection_experiment;
use super::features::{Classifier, FeatureSet};
use super::frechet::frechet_distance;
use super::knn::knn_precision_recall;
use super::membership::{membership_inference_risk, saturation_f1};
use super::rs::score_metric;
use super::MetricReport;
use crate::config::Config;
use crate::data::corpus::{load_split, CorpusManifest, CorpusRecord, Split};
use crate::data::record::{EcgRecord, Label};
use crate::model::generator::synthesize_twin;
use crate::text::make_backend;
use crate::trainer::ablation::twin_dtw;
use crate::{Error, Result, F};

/// Budgets and grids for one scoring pass. Defaults fit the desk corpus.
#[derive(Clone, Debug)]
pub struct ReportOptions {
    /// Epochs for the detection experiment's twin detector.
    pub detector_epochs: usize,
    /// Epochs for the feature extractor behind the distribution metrics.
    pub extractor_epochs: usize,
    /// Twins per training-split normal in the synthetic release.
    pub twins_per_normal: usize,
    /// Neighborhood size for precision/recall.
    pub knn_k: usize,
    /// Thresholds for the membership sweep.
    pub tau_values: Vec<f64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            detector_epochs: 30,
            extractor_epochs: 40,
            twins_per_normal: 2,
            knn_k: 3,
            tau_values: (0..=20).map(|i| i as f64 * 0.1).collect(),
        }
    }
}

/// Twins of every training-split normal record, references rotating over
/// the training diseased records in id order: the synthetic release that
/// every distribution and privacy metric scores against.
pub fn train_split_twins(
    cfg: &Config,
    store: &ParamStore<F>,
    manifest: &CorpusManifest,
    per_normal: usize,
) -> Result<Vec<EcgRecord>> {
    let backend = make_backend(cfg)?;
    let split = load_split(manifest, Split::Train)?;
    let mut refs: Vec<&CorpusRecord> =
        split.iter().filter(|r| r.rec.label != Label::Norm).collect();
    refs.sort_by(|a, b| a.rec.id.cmp(&b.rec.id));
    if refs.is_empty() {
        return Err(Error::data(
            "training split has no diseased records to reference",
        ));
    }
    let mut normals: Vec<&CorpusRecord> =
        split.iter().filter(|r| r.rec.label == Label::Norm).collect();
    normals.sort_by(|a, b| a.rec.id.cmp(&b.rec.id));
    if normals.is_empty() {
        return Err(Error::data("training split has no normal records to edit"));
    }
    let mut out = Vec::with_capacity(normals.len() * per_normal);
    let mut rotation = 0usize;
    for pre in &normals {
        for _ in 0..per_normal {
            let reference = refs[rotation % refs.len()];
            rotation += 1;
            out.push(synthesize_twin(
                store,
                cfg,
                backend.as_ref(),
                &pre.rec,
                &reference.rec,
            )?);
        }
    }
    Ok(out)
}

struct Scored {
    extractor: Classifier,
    f_train: FeatureSet,
    f_real: FeatureSet,
    f_twin: FeatureSet,
    twins: Vec<EcgRecord>,
}

fn score_sets(
    cfg: &Config,
    store: &ParamStore<F>,
    manifest: &CorpusManifest,
    extractor_epochs: usize,
    twins_per_normal: usize,
) -> Result<Scored> {
    let train = load_split(manifest, Split::Train)?;
    let test = load_split(manifest, Split::Test)?;
    let train_refs: Vec<&EcgRecord> = train.iter().map(|r| &r.rec).collect();
    let test_refs: Vec<&EcgRecord> = test.iter().map(|r| &r.rec).collect();
    let extractor = Classifier::train(&train_refs, cfg.seed, extractor_epochs)?;
    let twins = train_split_twins(cfg, store, manifest, twins_per_normal)?;
    let twin_refs: Vec<&EcgRecord> = twins.iter().collect();
    let f_train = extractor.features(&train_refs, "train")?;
    let f_real = extractor.features(&test_refs, "real")?;
    let f_twin = extractor.features(&twin_refs, "synthetic")?;
    Ok(Scored {
        extractor,
        f_train,
        f_real,
        f_twin,
        twins,
    })
}

/// Scores one trained model end to end. The distribution metrics compare
/// held-out real records against the synthetic release in the feature space
/// of a label classifier fit on the training split; utility comes from the
/// detection experiment and privacy from the membership sweep.
pub fn full_report(
    cfg: &Config,
    store: &ParamStore<F>,
    manifest: &CorpusManifest,
    opts: &ReportOptions,
) -> Result<MetricReport> {
    let s = score_sets(cfg, store, manifest, opts.extractor_epochs, opts.twins_per_normal)?;
    let twin_refs: Vec<&EcgRecord> = s.twins.iter().collect();

    let frd = frechet_distance(&s.f_real, &s.f_twin)?;
    let rs = score_metric(&s.extractor.probabilities(&twin_refs)?)?;
    let (precision, recall, f1) = knn_precision_recall(&s.f_real, &s.f_twin, opts.knn_k)?;
    let dtw_mean = twin_dtw(cfg, store, manifest)?;
    let membership =
        membership_inference_risk(&s.f_train, &s.f_twin, &s.f_real, &opts.tau_values)?;
    let det = detection_experiment(cfg, store, manifest, cfg.twins_per_patient, opts.detector_epochs)?;

    Ok(MetricReport {
        frd,
        rs,
        precision,
        recall,
        f1,
        dtw_mean,
        ate: det.report.ate,
        membership_f1_by_tau: membership,
        patient_acc: det.report.patient_acc,
        patient_f1: det.report.patient_f1,
        ecg_acc: det.report.ecg_acc,
        ecg_f1: det.report.ecg_f1,
        auroc: det.report.auroc,
    })
}

/// The membership sweep alone, with its analytic ceiling.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PrivacyReport {
    pub membership_f1_by_tau: BTreeMap<String, f64>,
    /// Claim-everything F1 the sweep converges to: 2p / (p + 1).
    pub saturation_f1: f64,
}

impl PrivacyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn membership_sweep(
    cfg: &Config,
    store: &ParamStore<F>,
    manifest: &CorpusManifest,
    extractor_epochs: usize,
    twins_per_normal: usize,
    tau_values: &[f64],
) -> Result<PrivacyReport> {
    let s = score_sets(cfg, store, manifest, extractor_epochs, twins_per_normal)?;
    let membership = membership_inference_risk(&s.f_train, &s.f_twin, &s.f_real, tau_values)?;
    Ok(PrivacyReport {
        membership_f1_by_tau: membership,
        saturation_f1: saturation_f1(s.f_train.n, s.f_real.n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::build_corpus;
    use crate::model::init_params;

    fn tiny() -> (tempfile::TempDir, Config, CorpusManifest) {
        let mut cfg = Config::desk();
        cfg.train_patients = 3;
        cfg.val_patients = 1;
        cfg.test_patients = 2;
        cfg.twins_per_patient = 1;
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_corpus(&cfg, &dir.path().join("corpus")).unwrap();
        (dir, cfg, manifest)
    }

    #[test]
    fn twins_rotate_references_and_keep_their_labels() {
        let (_dir, cfg, manifest) = tiny();
        let store = init_params(&cfg);
        let twins = train_split_twins(&cfg, &store, &manifest, 2).unwrap();
        // 3 training normals x 2 twins each.
        assert_eq!(twins.len(), 6);
        // References rotate over the 3 diseased training records in id
        // order, so consecutive twins carry different diseases.
        assert_ne!(twins[0].label, twins[1].label);
        assert!(twins.iter().all(|t| t.label != Label::Norm));
    }

    #[test]
    fn full_report_fills_every_field_on_an_untrained_model() {
        let (_dir, cfg, manifest) = tiny();
        let store = init_params(&cfg);
        let opts = ReportOptions {
            detector_epochs: 2,
            extractor_epochs: 2,
            twins_per_normal: 1,
            knn_k: 2,
            tau_values: vec![0.0, 0.5, 1.0],
        };
        let report = full_report(&cfg, &store, &manifest, &opts).unwrap();
        let json = report.to_json().unwrap();
        for key in [
            "frd",
            "rs",
            "precision",
            "recall",
            "f1",
            "dtw_mean",
            "ate",
            "membership_f1_by_tau",
            "patient_acc",
            "patient_f1",
            "ecg_acc",
            "ecg_f1",
            "auroc",
        ] {
            assert!(json.contains(&format!("\"{key}\"")), "missing {key}");
        }
        assert_eq!(report.membership_f1_by_tau.len(), 3);
        assert!(report.frd.is_finite());
        assert!((1.0..=5.0).contains(&report.rs));
    }

    #[test]
    fn membership_sweep_reports_the_ceiling() {
        let (_dir, cfg, manifest) = tiny();
        let store = init_params(&cfg);
        let sweep =
            membership_sweep(&cfg, &store, &manifest, 2, 1, &[0.0, 1e9]).unwrap();
        // 6 train targets, 4 holdout targets: p = 0.6.
        assert!((sweep.saturation_f1 - 2.0 * 0.6 / 1.6).abs() < 1e-12);
        assert_eq!(sweep.membership_f1_by_tau[&super::super::tau_key(0.0)], 0.0);
        let roundtrip = PrivacyReport::from_json(&sweep.to_json().unwrap()).unwrap();
        assert_eq!(roundtrip.membership_f1_by_tau, sweep.membership_f1_by_tau);
    }
}
