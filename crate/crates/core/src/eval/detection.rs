//! Experimental/control detection protocol: half the test patients get
//! digital twins of their normal ECGs added to a detector's training set;
//! the accuracy gap between the groups is the treatment effect.

use ecgtwin_nn::ParamStore;

use super::features::{accuracy, argmax_rows, Classifier, N_CLASSES};
use super::stats::{ate, auroc_ovr_macro, macro_f1, patient_wise_metrics};
use super::MetricReport;
use crate::config::Config;
use crate::data::corpus::{load_split, CorpusManifest, CorpusRecord, Split};
use crate::data::record::{EcgRecord, Label};
use crate::model::generator::synthesize_twin;
use crate::text::make_backend;
use crate::{Error, Result, F};

use ecgtwin_nn::seed::Stream;

pub struct DetectionOutcome {
    /// Metrics of the twin-augmented detector on the test split.
    pub report: MetricReport,
    pub twins_added: usize,
    /// Treatment effect when no twins are added, same grouping and seed.
    pub null_ate: f64,
    /// 95% band of the null ATE under random regrouping (2.5th and 97.5th
    /// percentiles over seeded permutations of the group assignment).
    pub permutation_band: (f64, f64),
    pub experimental_patients: Vec<String>,
    pub control_patients: Vec<String>,
}

/// Splits distinct patient ids into two near-even seeded groups:
/// (experimental, control).
pub fn split_even(mut patients: Vec<String>, seed: u64) -> (Vec<String>, Vec<String>) {
    patients.sort();
    patients.dedup();
    let mut s = Stream::named(seed, "detection.groups");
    s.shuffle(&mut patients);
    let half = patients.len() / 2;
    let control = patients.split_off(half);
    (patients, control)
}

fn per_patient_group_accuracy(
    preds: &[usize],
    labels: &[usize],
    ids: &[String],
    group: &[String],
) -> Vec<f64> {
    group
        .iter()
        .map(|pid| {
            let (p, l): (Vec<usize>, Vec<usize>) = preds
                .iter()
                .zip(labels)
                .zip(ids)
                .filter(|(_, id)| *id == pid)
                .map(|((p, l), _)| (*p, *l))
                .unzip();
            accuracy(&p, &l)
        })
        .collect()
}

fn detector_ate(
    detector: &Classifier,
    test: &[CorpusRecord],
    experimental: &[String],
    control: &[String],
) -> Result<(f64, Vec<usize>, Vec<f64>)> {
    let recs: Vec<&EcgRecord> = test.iter().map(|r| &r.rec).collect();
    let probs = detector.probabilities(&recs)?;
    let preds = argmax_rows(&probs, N_CLASSES);
    let labels: Vec<usize> = test.iter().map(|r| r.rec.label.as_u8() as usize).collect();
    let ids: Vec<String> = test.iter().map(|r| r.patient_id.clone()).collect();
    let treated = per_patient_group_accuracy(&preds, &labels, &ids, experimental);
    let untreated = per_patient_group_accuracy(&preds, &labels, &ids, control);
    Ok((ate(&treated, &untreated)?, preds, probs))
}

/// Runs the full protocol with a trained model's parameters. Twins reference
/// the training split's diseased records, rotating deterministically so the
/// reference diseases cycle. `detector_epochs` controls both detector fits.
pub fn detection_experiment(
    cfg: &Config,
    store: &ParamStore<F>,
    manifest: &CorpusManifest,
    twins_per_patient: usize,
    detector_epochs: usize,
) -> Result<DetectionOutcome> {
    let backend = make_backend(cfg)?;
    let train = load_split(manifest, Split::Train)?;
    let test = load_split(manifest, Split::Test)?;
    if test.is_empty() {
        return Err(Error::data("test split is empty"));
    }
    let patients: Vec<String> = test.iter().map(|r| r.patient_id.clone()).collect();
    let (experimental, control) = split_even(patients, cfg.seed);

    let mut references: Vec<&CorpusRecord> = train
        .iter()
        .filter(|r| r.rec.label != Label::Norm)
        .collect();
    references.sort_by(|a, b| a.rec.id.cmp(&b.rec.id));
    if references.is_empty() {
        return Err(Error::data("training split has no diseased records to reference"));
    }

    // Experimental normals spawn twins; the reference rotates over records
    // and twin slots so consecutive twins carry different diseases.
    let mut twins: Vec<EcgRecord> = Vec::new();
    let mut rotation = 0usize;
    for rec in test.iter().filter(|r| {
        r.rec.label == Label::Norm && experimental.iter().any(|p| *p == r.patient_id)
    }) {
        for _ in 0..twins_per_patient {
            let reference = references[rotation % references.len()];
            rotation += 1;
            twins.push(synthesize_twin(
                store,
                cfg,
                backend.as_ref(),
                &rec.rec,
                &reference.rec,
            )?);
        }
    }
    let twins_added = twins.len();

    let real: Vec<&EcgRecord> = train.iter().map(|r| &r.rec).collect();
    let mut augmented = real.clone();
    augmented.extend(twins.iter());

    let detector = Classifier::train(&augmented, cfg.seed, detector_epochs)?;
    let (effect, preds, probs) = detector_ate(&detector, &test, &experimental, &control)?;

    let labels: Vec<usize> = test.iter().map(|r| r.rec.label.as_u8() as usize).collect();
    let ids: Vec<String> = test.iter().map(|r| r.patient_id.clone()).collect();
    let (patient_acc, patient_f1) = patient_wise_metrics(&preds, &labels, &ids, None)?;
    let report = MetricReport {
        ate: effect,
        patient_acc,
        patient_f1,
        ecg_acc: accuracy(&preds, &labels),
        ecg_f1: macro_f1(&preds, &labels),
        auroc: auroc_ovr_macro(&probs, &labels)?,
        ..Default::default()
    };

    // Null protocol: same detector recipe without twins; the observed group
    // effect should be indistinguishable from relabeled groupings.
    let null_detector = Classifier::train(&real, cfg.seed, detector_epochs)?;
    let (null_ate, null_preds, _) = detector_ate(&null_detector, &test, &experimental, &control)?;

    let null_labels = labels;
    let per_patient: Vec<(String, f64)> = {
        let mut unique: Vec<String> = ids.clone();
        unique.sort();
        unique.dedup();
        unique
            .iter()
            .map(|pid| {
                let (p, l): (Vec<usize>, Vec<usize>) = null_preds
                    .iter()
                    .zip(&null_labels)
                    .zip(&ids)
                    .filter(|(_, id)| *id == pid)
                    .map(|((p, l), _)| (*p, *l))
                    .unzip();
                (pid.clone(), accuracy(&p, &l))
            })
            .collect()
    };
    let mut permuted_ates = Vec::with_capacity(1000);
    let mut s = Stream::named(cfg.seed, "detection.permutation");
    let n_exp = experimental.len();
    for _ in 0..1000 {
        let mut order: Vec<usize> = (0..per_patient.len()).collect();
        s.shuffle(&mut order);
        let treated: Vec<f64> = order[..n_exp].iter().map(|&i| per_patient[i].1).collect();
        let untreated: Vec<f64> = order[n_exp..].iter().map(|&i| per_patient[i].1).collect();
        permuted_ates.push(ate(&treated, &untreated)?);
    }
    permuted_ates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = |q: f64| -> f64 {
        let idx = (q * (permuted_ates.len() - 1) as f64).round() as usize;
        permuted_ates[idx]
    };
    let permutation_band = (rank(0.025), rank(0.975));

    Ok(DetectionOutcome {
        report,
        twins_added,
        null_ate,
        permutation_band,
        experimental_patients: experimental,
        control_patients: control,
    })
}
