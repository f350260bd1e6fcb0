//! Ablation and threshold-sweep drivers: retrain under toggled loss terms or
//! mask thresholds, then score each run with twin DTW and the detection
//! protocol.

use std::path::Path;

use ecgtwin_nn::ParamStore;

use super::{load_checkpoint, train};
use crate::config::Config;
use crate::data::corpus::{load_split, CorpusManifest, Split};
use crate::data::record::Label;
use crate::eval::detection::detection_experiment;
use crate::eval::dtw::{dtw_multilead, DtwVariant};
use crate::eval::MetricReport;
use crate::model::generator::synthesize_twin;
use crate::model::IN_LEADS;
use crate::text::make_backend;
use crate::{Error, Result, F};

/// One loss-term configuration of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationVariant {
    pub name: String,
    pub use_vq: bool,
    pub use_sim_g: bool,
    pub use_sim_d: bool,
    pub use_rec: bool,
}

impl AblationVariant {
    fn new(name: &str, use_vq: bool, use_sim_g: bool, use_sim_d: bool, use_rec: bool) -> Self {
        AblationVariant {
            name: name.to_string(),
            use_vq,
            use_sim_g,
            use_sim_d,
            use_rec,
        }
    }

    pub fn full() -> Self {
        Self::new("full", true, true, true, true)
    }

    pub fn no_vq() -> Self {
        Self::new("no_vq", false, true, true, true)
    }

    pub fn no_sim_g() -> Self {
        Self::new("no_sim_g", true, false, true, true)
    }

    pub fn no_sim_d() -> Self {
        Self::new("no_sim_d", true, true, false, true)
    }

    pub fn no_rec() -> Self {
        Self::new("no_rec", true, true, true, false)
    }

    /// The standard table: full model plus one row per removed term.
    pub fn table() -> Vec<Self> {
        vec![
            Self::full(),
            Self::no_vq(),
            Self::no_sim_g(),
            Self::no_sim_d(),
            Self::no_rec(),
        ]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::table()
            .into_iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::validation(format!("unknown ablation variant {name}")))
    }

    pub fn apply(&self, cfg: &mut Config) {
        cfg.use_vq = self.use_vq;
        cfg.use_sim_g = self.use_sim_g;
        cfg.use_sim_d = self.use_sim_d;
        cfg.use_rec = self.use_rec;
    }
}

/// Mean DTW between each test-split normal's twin and the real diseased
/// record whose disease it borrowed. References rotate over the training
/// split's diseased records in id order.
pub fn twin_dtw(cfg: &Config, store: &ParamStore<F>, manifest: &CorpusManifest) -> Result<f64> {
    let backend = make_backend(cfg)?;
    let train_recs = load_split(manifest, Split::Train)?;
    let test_recs = load_split(manifest, Split::Test)?;
    let mut references: Vec<_> = train_recs
        .iter()
        .filter(|r| r.rec.label != Label::Norm)
        .collect();
    references.sort_by(|a, b| a.rec.id.cmp(&b.rec.id));
    if references.is_empty() {
        return Err(Error::data("training split has no diseased records to reference"));
    }
    let mut normals: Vec<_> = test_recs
        .iter()
        .filter(|r| r.rec.label == Label::Norm)
        .collect();
    normals.sort_by(|a, b| a.rec.id.cmp(&b.rec.id));
    if normals.is_empty() {
        return Err(Error::data("test split has no normal records to edit"));
    }
    let mut total = 0.0;
    for (i, pre) in normals.iter().enumerate() {
        let reference = references[i % references.len()];
        let twin = synthesize_twin(store, cfg, backend.as_ref(), &pre.rec, &reference.rec)?;
        total += dtw_multilead(
            &twin.samples,
            &reference.rec.samples,
            IN_LEADS,
            twin.samples_per_lead,
            DtwVariant::Classic,
        )?;
    }
    Ok(total / normals.len() as f64)
}

pub struct AblationRow {
    pub name: String,
    pub report: MetricReport,
}

/// Trains one model per variant (run artifacts under `out_dir/<name>`) and
/// scores each with twin DTW plus the detection protocol's utility metrics.
/// Writes `ablation.csv` beside the runs.
pub fn ablation_run(
    base: &Config,
    manifest: &CorpusManifest,
    variants: &[AblationVariant],
    out_dir: &Path,
    detector_epochs: usize,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::validation("ablation needs at least one variant"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for variant in variants {
        let mut cfg = base.clone();
        variant.apply(&mut cfg);
        let run_dir = out_dir.join(&variant.name);
        let trained = train(&cfg, manifest, &run_dir)?;
        let store = load_checkpoint(&trained.checkpoint_path)?.store;
        let dtw_mean = twin_dtw(&cfg, &store, manifest)?;
        let det = detection_experiment(&cfg, &store, manifest, cfg.twins_per_patient, detector_epochs)?;
        let mut report = det.report;
        report.dtw_mean = dtw_mean;
        rows.push(AblationRow {
            name: variant.name.clone(),
            report,
        });
    }
    let mut csv = String::from("variant,dtw_mean,ate\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.name, row.report.dtw_mean, row.report.ate
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(rows)
}

/// Trains one model per mask threshold and reports DTW, ATE, and ECG-wise
/// accuracy per l. Writes `sweep.csv` beside the runs.
pub fn threshold_sweep(
    base: &Config,
    manifest: &CorpusManifest,
    l_values: &[f64],
    out_dir: &Path,
    detector_epochs: usize,
) -> Result<Vec<(f64, MetricReport)>> {
    if l_values.is_empty() {
        return Err(Error::validation("sweep needs at least one threshold"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &l in l_values {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::validation(format!(
                "mask threshold {l} outside [0, 1]"
            )));
        }
        let mut cfg = base.clone();
        cfg.l = l;
        let run_dir = out_dir.join(format!("l_{l}"));
        let trained = train(&cfg, manifest, &run_dir)?;
        let store = load_checkpoint(&trained.checkpoint_path)?.store;
        let dtw_mean = twin_dtw(&cfg, &store, manifest)?;
        let det = detection_experiment(&cfg, &store, manifest, cfg.twins_per_patient, detector_epochs)?;
        let mut report = det.report;
        report.dtw_mean = dtw_mean;
        rows.push((l, report));
    }
    let mut csv = String::from("l,dtw_mean,ate,ecg_acc\n");
    for (l, report) in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            l, report.dtw_mean, report.ate, report.ecg_acc
        ));
    }
    std::fs::write(out_dir.join("sweep.csv"), csv)?;
    Ok(rows)
}
