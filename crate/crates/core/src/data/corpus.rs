//! Corpus assembly: one NORM record plus one diseased record per synthetic
//! patient, split into train/validation/test, persisted with a JSON-lines
//! manifest. Per-record determinism is keyed by patient index, so manifests
//! are reproducible byte for byte.

use std::path::{Path, PathBuf};

use ecgtwin_nn::seed::splitmix64;

use crate::config::Config;
use crate::data::record::{EcgRecord, Label};
use crate::data::synth::{synth_record, DiseaseSpec};
use crate::error::Error;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "validation")]
    Validation,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub label: Label,
    pub report: String,
    pub path: String,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct CorpusManifest {
    pub seed: u64,
    pub records: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    /// Human-readable notes from generation (e.g. reseeded records).
    pub build_log: Vec<String>,
}

/// A loaded record together with its manifest row.
#[derive(Clone, Debug)]
pub struct CorpusRecord {
    pub patient_id: String,
    pub split: Split,
    pub rec: EcgRecord,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "meta.json";

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    seed: u64,
}

fn patient_disease(index: usize) -> Label {
    Label::DISEASES[index % Label::DISEASES.len()]
}

/// Builds the full corpus under `out_dir`. Every patient gets a NORM and a
/// diseased record sharing geometry; a record that comes out with fewer
/// than seven detectable beats is deterministically reseeded (logged).
pub fn build_corpus(cfg: &Config, out_dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let records_dir = out_dir.join("records");
    std::fs::create_dir_all(&records_dir)?;
    let total = cfg.train_patients + cfg.val_patients + cfg.test_patients;
    let mut entries = Vec::with_capacity(total * 2);
    let mut build_log = Vec::new();
    for pi in 0..total {
        let split = if pi < cfg.train_patients {
            Split::Train
        } else if pi < cfg.train_patients + cfg.val_patients {
            Split::Validation
        } else {
            Split::Test
        };
        let patient_id = format!("p{pi:04}");
        let disease = patient_disease(pi);
        for label in [Label::Norm, disease] {
            let spec = DiseaseSpec::for_label(label);
            let mut patient_seed = splitmix64(cfg.seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut rec = None;
            for attempt in 0..8 {
                match synth_record(&spec, patient_seed) {
                    Ok(r) => {
                        rec = Some(r);
                        break;
                    }
                    Err(Error::InsufficientBeats { found, need, .. }) => {
                        build_log.push(format!(
                            "{patient_id} {}: {found}/{need} beats on attempt {attempt}, reseeding",
                            label.as_str()
                        ));
                        patient_seed = splitmix64(patient_seed);
                    }
                    Err(e) => return Err(e),
                }
            }
            let mut rec = rec.ok_or_else(|| {
                Error::data(format!("{patient_id}: no usable record after 8 reseeds"))
            })?;
            let stem = format!("{patient_id}_{}", label.as_str().to_lowercase());
            rec.id = stem.clone();
            let rel = format!("records/{stem}.ecgt");
            rec.save(&out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                patient_id: patient_id.clone(),
                label,
                report: rec.report.clone(),
                path: rel,
                split,
            });
        }
    }

    let mut manifest_text = String::new();
    for e in &entries {
        manifest_text.push_str(&serde_json::to_string(e)?);
        manifest_text.push('\n');
    }
    std::fs::write(out_dir.join(MANIFEST_FILE), &manifest_text)?;
    std::fs::write(
        out_dir.join(META_FILE),
        serde_json::to_string(&Meta { seed: cfg.seed })?,
    )?;
    Ok(CorpusManifest {
        seed: cfg.seed,
        records: entries,
        root: out_dir.to_path_buf(),
        build_log,
    })
}

pub fn load_manifest(manifest_path: &Path) -> Result<CorpusManifest> {
    let root = manifest_path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let text = std::fs::read_to_string(manifest_path)?;
    let mut records = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<ManifestEntry>(line)?);
    }
    let seed = match std::fs::read_to_string(root.join(META_FILE)) {
        Ok(meta) => serde_json::from_str::<Meta>(&meta)?.seed,
        Err(_) => 0,
    };
    Ok(CorpusManifest {
        seed,
        records,
        root,
        build_log: Vec::new(),
    })
}

/// Loads every record of one split, in manifest order. The stored label
/// must agree with the manifest row.
pub fn load_split(manifest: &CorpusManifest, split: Split) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for e in manifest.records.iter().filter(|e| e.split == split) {
        let rec = EcgRecord::load(&manifest.root.join(&e.path))?;
        if rec.label != e.label {
            return Err(Error::data(format!(
                "{}: stored label {} disagrees with manifest {}",
                e.path,
                rec.label.as_str(),
                e.label.as_str()
            )));
        }
        out.push(CorpusRecord {
            patient_id: e.patient_id.clone(),
            split,
            rec,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> Config {
        let mut cfg = Config::desk();
        cfg.train_patients = 3;
        cfg.val_patients = 1;
        cfg.test_patients = 2;
        cfg
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_corpus(&cfg, d1.path()).unwrap();
        build_corpus(&cfg, d2.path()).unwrap();
        let m1 = std::fs::read_to_string(d1.path().join(MANIFEST_FILE)).unwrap();
        let m2 = std::fs::read_to_string(d2.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m1, m2);
        // Record files are bit-identical too.
        for e in load_manifest(&d1.path().join(MANIFEST_FILE)).unwrap().records {
            let b1 = std::fs::read(d1.path().join(&e.path)).unwrap();
            let b2 = std::fs::read(d2.path().join(&e.path)).unwrap();
            assert_eq!(b1, b2, "{}", e.path);
        }
    }

    #[test]
    fn zero_test_patients_rejected() {
        let mut cfg = tiny_config();
        cfg.test_patients = 0;
        let dir = tempfile::tempdir().unwrap();
        let err = build_corpus(&cfg, dir.path()).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn every_patient_has_norm_and_disease() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_corpus(&cfg, dir.path()).unwrap();
        let mut by_patient: std::collections::BTreeMap<&str, Vec<Label>> = Default::default();
        for e in &manifest.records {
            by_patient.entry(&e.patient_id).or_default().push(e.label);
        }
        assert_eq!(by_patient.len(), 6);
        for (pid, labels) in by_patient {
            assert_eq!(labels.len(), 2, "{pid}");
            assert!(labels.contains(&Label::Norm));
            assert!(labels.iter().any(|l| *l != Label::Norm));
        }
        // A patient id lives in exactly one split.
        let mut split_of: std::collections::BTreeMap<&str, Split> = Default::default();
        for e in &manifest.records {
            if let Some(prev) = split_of.insert(&e.patient_id, e.split) {
                assert_eq!(prev, e.split);
            }
        }
    }

    #[test]
    fn manifest_roundtrip_and_loading() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let built = build_corpus(&cfg, dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(built.records, loaded.records);
        assert_eq!(loaded.seed, cfg.seed);
        let train = load_split(&loaded, Split::Train).unwrap();
        assert_eq!(train.len(), 6);
        for r in &train {
            assert_eq!(r.rec.samples_per_lead, 4096);
        }
        let test = load_split(&loaded, Split::Test).unwrap();
        assert_eq!(test.len(), 4);
    }
}
