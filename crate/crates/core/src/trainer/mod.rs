//! Alternating adversarial training: one discriminator step then one
//! generator step per batch, with per-epoch validation reconstruction error,
//! CSV loss logs, and periodic checkpoints.

pub mod ablation;
pub mod checkpoint;

use std::path::{Path, PathBuf};

use ecgtwin_nn::seed::Stream;
use ecgtwin_nn::{AdamW, Graph, ParamStore, Real, Tensor, Var};

use crate::config::Config;
use crate::data::corpus::{load_split, CorpusManifest, CorpusRecord, Split};
use crate::data::preprocess::TARGET_LEN;
use crate::data::record::Label;
use crate::model::discriminator::{adv_d_loss, discriminate};
use crate::model::generator::{adv_g_loss, generate, mean_sim_loss, rec_loss};
use crate::model::separator::{separate, SeparatedVars};
use crate::model::{
    bind_params, collect_grads, init_params, noise_field, trainable_disc, trainable_gen,
    BoundParams, IN_LEADS,
};
use crate::text::{make_backend, TextBackend};
use crate::{Error, Result, F};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

pub const LOSS_CSV_HEADER: &str =
    "epoch,step,l_adv_d,l_sim_d,l_rec,l_vq,l_adv_g,l_sim_g,g_total,d_total";
pub const VAL_CSV_HEADER: &str = "epoch,val_rec";

/// Per-batch loss record, one CSV row. `epoch` and `step` are 1-based.
#[derive(Clone, Debug)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub l_adv_d: f64,
    pub l_sim_d: f64,
    pub l_rec: f64,
    pub l_vq: f64,
    pub l_adv_g: f64,
    pub l_sim_g: f64,
    pub g_total: f64,
    pub d_total: f64,
}

impl LossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.l_adv_d,
            self.l_sim_d,
            self.l_rec,
            self.l_vq,
            self.l_adv_g,
            self.l_sim_g,
            self.g_total,
            self.d_total
        )
    }
}

/// A split's records with their report embeddings computed once up front.
pub struct TrainSet {
    pub records: Vec<CorpusRecord>,
    raw: Vec<F>,
    raw_dim: usize,
}

impl TrainSet {
    pub fn build(
        records: Vec<CorpusRecord>,
        backend: &dyn TextBackend,
        raw_dim: usize,
    ) -> Result<Self> {
        let texts: Vec<&str> = records.iter().map(|r| r.rec.report.as_str()).collect();
        let raw = crate::text::embed_reports(backend, &texts)?;
        Ok(TrainSet {
            records,
            raw,
            raw_dim,
        })
    }

    fn raw_of(&self, i: usize) -> &[F] {
        &self.raw[i * self.raw_dim..(i + 1) * self.raw_dim]
    }
}

/// Epoch pairing: every record appears as the pre-record at most once, in a
/// seeded shuffle order; its reference is a diseased record of a different
/// patient, drawn from the same stream. Pre-records with no eligible
/// reference are skipped; only full batches are kept.
pub fn pair_epoch(
    records: &[CorpusRecord],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let diseased: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.rec.label != Label::Norm)
        .map(|(i, _)| i)
        .collect();
    if diseased.is_empty() {
        return Err(Error::data("training split has no diseased records to edit toward"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut s = Stream::named(seed, &format!("pairs.epoch{epoch}"));
    s.shuffle(&mut order);
    let mut pairs = Vec::new();
    for &pre in &order {
        let candidates: Vec<usize> = diseased
            .iter()
            .copied()
            .filter(|&j| records[j].patient_id != records[pre].patient_id)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let reference = candidates[s.below(candidates.len())];
        pairs.push((pre, reference));
    }
    let batches: Vec<Vec<(usize, usize)>> = pairs
        .chunks(batch_size)
        .filter(|c| c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect();
    if batches.is_empty() {
        return Err(Error::data(format!(
            "pairing produced no full batch of {batch_size}"
        )));
    }
    Ok(batches)
}

/// One batch's inputs, host-side.
pub struct Batch {
    pub x_pre: Tensor<F>,
    pub raw_pre: Tensor<F>,
    pub x_ref: Tensor<F>,
    pub raw_ref: Tensor<F>,
    /// "pre_id+ref_id" per slot, for error reports.
    pub ids: Vec<String>,
    pub n: usize,
}

pub fn make_batch(set: &TrainSet, pairs: &[(usize, usize)]) -> Result<Batch> {
    let n = pairs.len();
    let mut x_pre = Vec::with_capacity(n * IN_LEADS * TARGET_LEN);
    let mut x_ref = Vec::with_capacity(n * IN_LEADS * TARGET_LEN);
    let mut raw_pre = Vec::with_capacity(n * set.raw_dim);
    let mut raw_ref = Vec::with_capacity(n * set.raw_dim);
    let mut ids = Vec::with_capacity(n);
    for &(pre, reference) in pairs {
        for (idx, side) in [(pre, &mut x_pre), (reference, &mut x_ref)] {
            let rec = &set.records[idx].rec;
            if rec.samples_per_lead != TARGET_LEN {
                return Err(Error::validation(format!(
                    "record {} has {} samples per lead; expected preprocessed length {}",
                    rec.id, rec.samples_per_lead, TARGET_LEN
                )));
            }
            side.extend_from_slice(&rec.samples);
        }
        raw_pre.extend_from_slice(set.raw_of(pre));
        raw_ref.extend_from_slice(set.raw_of(reference));
        ids.push(format!(
            "{}+{}",
            set.records[pre].rec.id, set.records[reference].rec.id
        ));
    }
    Ok(Batch {
        x_pre: Tensor::from_vec(&[n, IN_LEADS, TARGET_LEN], x_pre),
        raw_pre: Tensor::from_vec(&[n, set.raw_dim], raw_pre),
        x_ref: Tensor::from_vec(&[n, IN_LEADS, TARGET_LEN], x_ref),
        raw_ref: Tensor::from_vec(&[n, set.raw_dim], raw_ref),
        ids,
        n,
    })
}

/// Handles into a generator-step loss graph.
pub struct GenLossVars {
    pub l_adv: Var,
    pub l_rec: Var,
    pub l_vq: Var,
    pub l_sim: Var,
    pub total: Var,
}

/// Builds the full generator-step loss over any scalar type: separation and
/// reconstruction of the pre-record, adversarial and reconstruction terms,
/// the masked codebook loss, and the edit-consistency term that re-separates
/// the generated twin under the reference's report. `freeze_mask` stops
/// gradients through the binarized masks so finite differences probe a
/// locally smooth function.
#[allow(clippy::too_many_arguments)]
pub fn build_gen_loss<S: Real, T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<S>,
    cfg: &Config,
    x_pre: Tensor<T>,
    raw_pre: Tensor<T>,
    x_ref: Tensor<T>,
    raw_ref: Tensor<T>,
    field: Tensor<T>,
    n: usize,
    trainable: &dyn Fn(&str) -> bool,
    freeze_mask: bool,
) -> (BoundParams, GenLossVars) {
    let p = bind_params(g, store, trainable);
    let x = g.constant(x_pre);
    let raw = g.constant(raw_pre);
    let sep = separate(g, &p, x, raw, &cfg.dims, cfg.l, cfg.use_vq, freeze_mask);
    let fieldv = g.constant(field);
    let recon = generate(g, &p, sep.f_p, sep.f_d, fieldv, &cfg.dims);
    let d_fake = discriminate(g, &p, recon, &cfg.dims);
    let l_adv = adv_g_loss(g, d_fake.logits, cfg.adv_loss_form);
    let zero = g.constant(Tensor::scalar(ecgtwin_nn::real::c(0.0)));
    let l_rec = if cfg.use_rec {
        rec_loss(g, recon, x)
    } else {
        zero
    };
    let l_vq = sep.vq_loss;
    let flat_dim = cfg.dims.c * cfg.dims.l_e;
    let l_sim = if cfg.use_sim_g {
        let x_ref = g.constant(x_ref);
        let raw_ref = g.constant(raw_ref);
        let sep_ref = separate(g, &p, x_ref, raw_ref, &cfg.dims, cfg.l, cfg.use_vq, freeze_mask);
        let twin = generate(g, &p, sep.f_p, sep_ref.f_d, fieldv, &cfg.dims);
        let resep = separate(g, &p, twin, raw_ref, &cfg.dims, cfg.l, cfg.use_vq, freeze_mask);
        let a = g.reshape(resep.f_d, &[n, flat_dim]);
        let b = g.reshape(sep_ref.f_d, &[n, flat_dim]);
        mean_sim_loss(g, a, b)
    } else {
        zero
    };
    let s1 = g.add(l_adv, l_sim);
    let s2 = g.add(s1, l_rec);
    let total = g.add(s2, l_vq);
    (
        p,
        GenLossVars {
            l_adv,
            l_rec,
            l_vq,
            l_sim,
            total,
        },
    )
}

/// Losses from one discriminator step.
#[derive(Clone, Copy, Debug)]
pub struct DStepLosses {
    pub l_adv_d: f64,
    pub l_sim_d: f64,
    pub d_total: f64,
}

/// Losses from one generator step.
#[derive(Clone, Copy, Debug)]
pub struct GStepLosses {
    pub l_rec: f64,
    pub l_vq: f64,
    pub l_adv_g: f64,
    pub l_sim_g: f64,
    pub g_total: f64,
}

pub struct Trainer {
    pub cfg: Config,
    pub store: ParamStore<F>,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    field: Tensor<F>,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let store = init_params(&cfg);
        let field = noise_field(&cfg);
        let opt_g = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        let opt_d = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            store,
            opt_g,
            opt_d,
            field,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let field = noise_field(&ck.config);
        let mut opt_g = AdamW::new(ck.config.learning_rate, ck.config.weight_decay);
        let mut opt_d = AdamW::new(ck.config.learning_rate, ck.config.weight_decay);
        opt_g.t = ck.opt_g_t;
        opt_d.t = ck.opt_d_t;
        Ok(Trainer {
            cfg: ck.config,
            store: ck.store,
            opt_g,
            opt_d,
            field,
        })
    }

    fn check_finite(vals: &[f64], epoch: usize, step: usize, ids: &[String]) -> Result<()> {
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                epoch,
                step,
                batch_ids: ids.to_vec(),
            })
        }
    }

    /// Builds the shared forward pass: separation of the pre-record and its
    /// reconstruction from its own features.
    fn forward_recon(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        batch: &Batch,
    ) -> (Var, SeparatedVars, Var) {
        let cfg = &self.cfg;
        let x = g.constant(batch.x_pre.clone());
        let raw = g.constant(batch.raw_pre.clone());
        let sep = separate(g, p, x, raw, &cfg.dims, cfg.l, cfg.use_vq, false);
        let field = g.constant(self.field.clone());
        let recon = generate(g, p, sep.f_p, sep.f_d, field, &cfg.dims);
        (x, sep, recon)
    }

    /// Discriminator step: real-vs-reconstruction adversarial loss, plus the
    /// disease-head similarity term against the separator's (frozen) disease
    /// features. Updates only discriminator parameters.
    pub fn d_step(&mut self, batch: &Batch, epoch: usize, step: usize) -> Result<DStepLosses> {
        let mut g: Graph<F> = Graph::new();
        let p = bind_params(&mut g, &self.store, &trainable_disc);
        let (x, sep, recon) = self.forward_recon(&mut g, &p, batch);
        let d_real = discriminate(&mut g, &p, x, &self.cfg.dims);
        let d_fake = discriminate(&mut g, &p, recon, &self.cfg.dims);
        let l_adv = adv_d_loss(&mut g, d_real.logits, d_fake.logits);
        let flat_dim = self.cfg.dims.c * self.cfg.dims.l_e;
        let (l_sim, total) = if self.cfg.use_sim_d {
            let flat = g.reshape(sep.f_d, &[batch.n, flat_dim]);
            let target = g.stop_grad(flat);
            let ls = mean_sim_loss(&mut g, d_fake.disease, target);
            (Some(ls), g.add(l_adv, ls))
        } else {
            (None, l_adv)
        };
        g.backward(total);
        let l_adv_v = g.val(l_adv).item().to_f64();
        let l_sim_v = l_sim.map(|v| g.val(v).item().to_f64()).unwrap_or(0.0);
        // Logged totals are sums of the logged components; the in-graph sum
        // only routes gradients, so its rounding never reaches the log.
        let total_v = l_adv_v + l_sim_v;
        Self::check_finite(&[l_adv_v, l_sim_v, total_v], epoch, step, &batch.ids)?;
        let grads = collect_grads(&mut g, &p);
        self.opt_d.step(&mut self.store, &grads);
        Ok(DStepLosses {
            l_adv_d: l_adv_v,
            l_sim_d: l_sim_v,
            d_total: total_v,
        })
    }

    /// Generator step: adversarial + reconstruction + codebook losses on the
    /// pre-record, plus the edit-consistency term that re-separates the
    /// generated twin under the reference's report and compares disease
    /// features. Updates separator, generator, and text parameters.
    pub fn g_step(&mut self, batch: &Batch, epoch: usize, step: usize) -> Result<GStepLosses> {
        let mut g: Graph<F> = Graph::new();
        let (p, vars) = build_gen_loss(
            &mut g,
            &self.store,
            &self.cfg,
            batch.x_pre.clone(),
            batch.raw_pre.clone(),
            batch.x_ref.clone(),
            batch.raw_ref.clone(),
            self.field.clone(),
            batch.n,
            &trainable_gen,
            false,
        );
        g.backward(vars.total);
        let l_rec_v = g.val(vars.l_rec).item().to_f64();
        let l_vq_v = g.val(vars.l_vq).item().to_f64();
        let l_adv_v = g.val(vars.l_adv).item().to_f64();
        let l_sim_v = g.val(vars.l_sim).item().to_f64();
        let losses = GStepLosses {
            l_rec: l_rec_v,
            l_vq: l_vq_v,
            l_adv_g: l_adv_v,
            l_sim_g: l_sim_v,
            g_total: l_adv_v + l_sim_v + l_rec_v + l_vq_v,
        };
        Self::check_finite(
            &[
                losses.l_rec,
                losses.l_vq,
                losses.l_adv_g,
                losses.l_sim_g,
                losses.g_total,
            ],
            epoch,
            step,
            &batch.ids,
        )?;
        let grads = collect_grads(&mut g, &p);
        self.opt_g.step(&mut self.store, &grads);
        Ok(losses)
    }

    /// Reconstruction error over a split: per-record squared L2 norm of the
    /// error, averaged over records, accumulated in f64 in record order. Same
    /// form as the training term, so the two curves share a scale.
    pub fn validation_rec(&self, set: &TrainSet) -> Result<f64> {
        if set.records.is_empty() {
            return Err(Error::data("validation split is empty"));
        }
        let cfg = &self.cfg;
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        let indices: Vec<usize> = (0..set.records.len()).collect();
        for chunk in indices.chunks(cfg.batch_size.max(1)) {
            let pairs: Vec<(usize, usize)> = chunk.iter().map(|&i| (i, i)).collect();
            let batch = make_batch(set, &pairs)?;
            let mut g: Graph<F> = Graph::new();
            let p = bind_params(&mut g, &self.store, &crate::model::trainable_none);
            let (x, _sep, recon) = self.forward_recon(&mut g, &p, &batch);
            let xv = g.val(x).data().to_vec();
            let rv = g.val(recon).data();
            for (a, b) in xv.iter().zip(rv.iter()) {
                let d = a.to_f64() - b.to_f64();
                sum_sq += d * d;
            }
            count += batch.n;
        }
        Ok(sum_sq / count as f64)
    }
}

/// FNV-1a over names and value bits of every parameter the predicate admits.
pub fn group_hash(store: &ParamStore<F>, pred: &dyn Fn(&str) -> bool) -> u64 {
    const PRIME: u64 = 0x100000001b3;
    let mut h = 0xcbf29ce484222325u64;
    let mut fold = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for (name, slot) in store.iter() {
        if !pred(name) {
            continue;
        }
        fold(name.as_bytes());
        for v in slot.value.data() {
            fold(&v.to_bits().to_le_bytes());
        }
    }
    h
}

pub struct TrainReport {
    pub loss_rows: Vec<LossRow>,
    pub val_rec: Vec<f64>,
    pub checkpoint_path: PathBuf,
}

/// Full training loop over a corpus: per batch one discriminator step then
/// one generator step; per epoch a validation pass plus optional checkpoint;
/// loss.csv, val_loss.csv, and final.lvqc land in `out_dir`.
///
/// On the first batch of every epoch the parameter groups are hashed before
/// and after each step to enforce that the discriminator step leaves the
/// generator side untouched and vice versa.
pub fn train(cfg: &Config, manifest: &CorpusManifest, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let backend = make_backend(cfg)?;
    let train_set = TrainSet::build(
        load_split(manifest, Split::Train)?,
        backend.as_ref(),
        cfg.dims.raw_dim,
    )?;
    let val_set = TrainSet::build(
        load_split(manifest, Split::Validation)?,
        backend.as_ref(),
        cfg.dims.raw_dim,
    )?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut rows: Vec<LossRow> = Vec::new();
    let mut val_curve: Vec<f64> = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = pair_epoch(&train_set.records, cfg.batch_size, cfg.seed, epoch)?;
        for (step, pairs) in batches.iter().enumerate() {
            let batch = make_batch(&train_set, pairs)?;
            let isolate = step == 0;
            let gen_side = |n: &str| !trainable_disc(n);
            let before = isolate.then(|| group_hash(&trainer.store, &gen_side));
            let d = trainer.d_step(&batch, epoch + 1, step + 1)?;
            if let Some(h) = before {
                assert_eq!(
                    h,
                    group_hash(&trainer.store, &gen_side),
                    "discriminator step changed generator-side parameters"
                );
            }
            let before = isolate.then(|| group_hash(&trainer.store, &trainable_disc));
            let g = trainer.g_step(&batch, epoch + 1, step + 1)?;
            if let Some(h) = before {
                assert_eq!(
                    h,
                    group_hash(&trainer.store, &trainable_disc),
                    "generator step changed discriminator parameters"
                );
            }
            rows.push(LossRow {
                epoch: epoch + 1,
                step: step + 1,
                l_adv_d: d.l_adv_d,
                l_sim_d: d.l_sim_d,
                l_rec: g.l_rec,
                l_vq: g.l_vq,
                l_adv_g: g.l_adv_g,
                l_sim_g: g.l_sim_g,
                g_total: g.g_total,
                d_total: d.d_total,
            });
        }
        val_curve.push(trainer.validation_rec(&val_set)?);
        if cfg.checkpoint_every > 0
            && (epoch + 1) % cfg.checkpoint_every == 0
            && epoch + 1 < cfg.epochs
        {
            let path = out_dir.join(format!("epoch_{:03}.lvqc", epoch + 1));
            save_checkpoint(
                &path,
                cfg,
                &trainer.store,
                (epoch + 1) as u32,
                trainer.opt_g.t,
                trainer.opt_d.t,
            )?;
        }
    }
    let checkpoint_path = out_dir.join("final.lvqc");
    save_checkpoint(
        &checkpoint_path,
        cfg,
        &trainer.store,
        cfg.epochs as u32,
        trainer.opt_g.t,
        trainer.opt_d.t,
    )?;
    write_loss_csv(&out_dir.join("loss.csv"), &rows)?;
    write_val_csv(&out_dir.join("val_loss.csv"), &val_curve)?;
    Ok(TrainReport {
        loss_rows: rows,
        val_rec: val_curve,
        checkpoint_path,
    })
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_val_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut out = String::from(VAL_CSV_HEADER);
    out.push('\n');
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, v));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::record::EcgRecord;
    use crate::data::synth::{synth_record, DiseaseSpec};

    fn fake_record(patient: &str, n: usize, label: Label) -> CorpusRecord {
        CorpusRecord {
            patient_id: patient.to_string(),
            split: Split::Train,
            rec: EcgRecord {
                id: format!("{patient}_{n}"),
                sampling_rate: 500,
                label,
                report: String::new(),
                segments: vec![],
                samples: vec![0.0; IN_LEADS],
                samples_per_lead: 1,
            },
        }
    }

    #[test]
    fn pairing_is_deterministic_and_never_pairs_within_a_patient() {
        let mut records = Vec::new();
        for p in 0..6 {
            records.push(fake_record(&format!("p{p}"), 0, Label::Norm));
            let label = if p % 2 == 0 { Label::Mi } else { Label::Sttc };
            records.push(fake_record(&format!("p{p}"), 1, label));
        }
        for epoch in 0..50 {
            let a = pair_epoch(&records, 4, 7, epoch).unwrap();
            let b = pair_epoch(&records, 4, 7, epoch).unwrap();
            assert_eq!(a, b);
            for batch in &a {
                for &(pre, reference) in batch {
                    assert_ne!(records[pre].patient_id, records[reference].patient_id);
                    assert_ne!(records[reference].rec.label, Label::Norm);
                }
            }
        }
        let e0 = pair_epoch(&records, 4, 7, 0).unwrap();
        let e1 = pair_epoch(&records, 4, 7, 1).unwrap();
        assert_ne!(e0, e1, "epochs should reshuffle");
    }

    #[test]
    fn pairing_skips_pres_without_references_and_drops_ragged_batches() {
        // Only patient p0 has disease, so p0's own records can never be pres
        // with an eligible reference.
        let records = vec![
            fake_record("p0", 0, Label::Mi),
            fake_record("p0", 1, Label::Cd),
            fake_record("p1", 0, Label::Norm),
            fake_record("p2", 0, Label::Norm),
            fake_record("p3", 0, Label::Norm),
        ];
        let batches = pair_epoch(&records, 2, 0, 0).unwrap();
        // 3 eligible pres -> one full batch of 2, remainder dropped.
        assert_eq!(batches.len(), 1);
        for &(pre, _) in &batches[0] {
            assert_ne!(records[pre].patient_id, "p0");
        }
    }

    #[test]
    fn pairing_without_any_disease_is_an_error() {
        let records = vec![
            fake_record("p0", 0, Label::Norm),
            fake_record("p1", 0, Label::Norm),
        ];
        let err = pair_epoch(&records, 1, 0, 0).unwrap_err();
        assert!(!err.is_validation());
    }

    fn tiny_cfg() -> Config {
        let mut cfg = Config::desk();
        cfg.epochs = 1;
        cfg.batch_size = 2;
        cfg.train_patients = 2;
        cfg.val_patients = 1;
        cfg.test_patients = 1;
        cfg
    }

    fn tiny_set(cfg: &Config) -> TrainSet {
        // Two patients, each one normal and one diseased record.
        let mut records = Vec::new();
        for (p, label) in [(0u64, Label::Mi), (1u64, Label::Sttc)] {
            for (n, lab) in [(0usize, Label::Norm), (1usize, label)] {
                let rec = synth_record(&DiseaseSpec::for_label(lab), 1000 + p).unwrap();
                records.push(CorpusRecord {
                    patient_id: format!("p{p}"),
                    split: Split::Train,
                    rec: EcgRecord {
                        id: format!("p{p}_{n}"),
                        ..rec
                    },
                });
            }
        }
        let backend = make_backend(cfg).unwrap();
        TrainSet::build(records, backend.as_ref(), cfg.dims.raw_dim).unwrap()
    }

    // Bitwise totals of the first optimization step on the fixed tiny batch.
    // Frozen from the first run; any numeric drift in the separator,
    // generator, discriminator, or optimizer shows up here.
    const GOLDEN_D_TOTAL: f64 = f64::from_bits(0x4002a8e5c0000000);
    const GOLDEN_G_TOTAL: f64 = f64::from_bits(0x40f6bccc5e9cd000);

    #[test]
    fn one_step_is_isolated_and_bitwise_stable() {
        let cfg = tiny_cfg();
        let set = tiny_set(&cfg);
        let batch = make_batch(&set, &[(0, 3), (2, 1)]).unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();

        let gen_side = |n: &str| !trainable_disc(n);
        let gen_before = group_hash(&trainer.store, &gen_side);
        let disc_before = group_hash(&trainer.store, &trainable_disc);
        let d = trainer.d_step(&batch, 1, 1).unwrap();
        assert_eq!(gen_before, group_hash(&trainer.store, &gen_side));
        assert_ne!(disc_before, group_hash(&trainer.store, &trainable_disc));

        let disc_after_d = group_hash(&trainer.store, &trainable_disc);
        let g = trainer.g_step(&batch, 1, 1).unwrap();
        assert_eq!(disc_after_d, group_hash(&trainer.store, &trainable_disc));
        assert_ne!(gen_before, group_hash(&trainer.store, &gen_side));

        assert_eq!(trainer.opt_d.t, 1);
        assert_eq!(trainer.opt_g.t, 1);

        // Loss accounting: totals are plain sums of their terms.
        assert!((d.d_total - (d.l_adv_d + d.l_sim_d)).abs() < 1e-7);
        assert!((g.g_total - (g.l_adv_g + g.l_sim_g + g.l_rec + g.l_vq)).abs() < 1e-7);

        assert_eq!(d.d_total.to_bits(), GOLDEN_D_TOTAL.to_bits());
        assert_eq!(g.g_total.to_bits(), GOLDEN_G_TOTAL.to_bits());
    }

    #[test]
    fn ablation_flags_leave_their_parameters_untouched() {
        let mut cfg = tiny_cfg();
        cfg.use_vq = false;
        cfg.use_sim_d = false;
        let set = tiny_set(&cfg);
        let batch = make_batch(&set, &[(0, 3), (2, 1)]).unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();

        let codebook = |n: &str| n == "separator.codebook";
        let dhead = |n: &str| n.starts_with("discriminator.dhead.");
        let trunk = |n: &str| trainable_disc(n) && !n.starts_with("discriminator.dhead.");
        let cb_before = group_hash(&trainer.store, &codebook);
        let dh_before = group_hash(&trainer.store, &dhead);
        let trunk_before = group_hash(&trainer.store, &trunk);
        let d = trainer.d_step(&batch, 1, 1).unwrap();
        let g = trainer.g_step(&batch, 1, 1).unwrap();
        assert_eq!(d.l_sim_d, 0.0);
        assert_eq!(g.l_vq, 0.0);
        assert_eq!(cb_before, group_hash(&trainer.store, &codebook));
        assert_eq!(dh_before, group_hash(&trainer.store, &dhead));
        // The rest of the discriminator still trained.
        assert_ne!(trunk_before, group_hash(&trainer.store, &trunk));
    }

    #[test]
    fn training_smoke_writes_logs_and_a_loadable_checkpoint() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 2;
        cfg.checkpoint_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let run_dir = dir.path().join("run");
        let manifest = crate::data::corpus::build_corpus(&cfg, &corpus_dir).unwrap();
        let report = train(&cfg, &manifest, &run_dir).unwrap();

        assert_eq!(report.val_rec.len(), 2);
        assert!(report.val_rec.iter().all(|v| v.is_finite()));
        let steps_per_epoch = report.loss_rows.len() / 2;
        assert!(steps_per_epoch >= 1);
        assert_eq!(report.loss_rows[0].epoch, 1);
        assert_eq!(report.loss_rows[0].step, 1);
        assert_eq!(report.loss_rows.last().unwrap().epoch, 2);

        let loss_csv = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
        let mut lines = loss_csv.lines();
        assert_eq!(lines.next(), Some(LOSS_CSV_HEADER));
        assert_eq!(lines.count(), report.loss_rows.len());
        let val_csv = std::fs::read_to_string(run_dir.join("val_loss.csv")).unwrap();
        assert_eq!(val_csv.lines().next(), Some(VAL_CSV_HEADER));

        // Intermediate checkpoint for epoch 1, final for epoch 2.
        assert!(run_dir.join("epoch_001.lvqc").exists());
        assert!(!run_dir.join("epoch_002.lvqc").exists());
        let ck = load_checkpoint(&report.checkpoint_path).unwrap();
        assert_eq!(ck.epoch, 2);
        assert_eq!(ck.opt_g_t, steps_per_epoch as u64 * 2);
        let resumed = Trainer::from_checkpoint(ck).unwrap();
        assert_eq!(resumed.opt_d.t, steps_per_epoch as u64 * 2);
        let retrained = train_trainer_store(&cfg, &manifest);
        assert_eq!(
            group_hash(&resumed.store, &|_| true),
            group_hash(&retrained, &|_| true),
        );
    }

    // Re-trains from scratch and returns the parameter store: the cheap way
    // to assert run-to-run bitwise determinism of the whole loop.
    fn train_trainer_store(cfg: &Config, manifest: &CorpusManifest) -> ParamStore<F> {
        let dir = tempfile::tempdir().unwrap();
        let report = train(cfg, manifest, dir.path()).unwrap();
        load_checkpoint(&report.checkpoint_path).unwrap().store
    }

    #[test]
    fn reconstruction_overfits_a_tiny_set() {
        // Four patients, eight records, 200 optimization steps: the
        // reconstruction term must at least halve from its step-1 value.
        let mut cfg = Config::desk();
        cfg.batch_size = 2;
        let mut records = Vec::new();
        for (p, label) in [
            (0u64, Label::Mi),
            (1u64, Label::Sttc),
            (2u64, Label::Cd),
            (3u64, Label::Hyp),
        ] {
            for (n, lab) in [(0usize, Label::Norm), (1usize, label)] {
                let rec = synth_record(&DiseaseSpec::for_label(lab), 4000 + p).unwrap();
                records.push(CorpusRecord {
                    patient_id: format!("p{p}"),
                    split: Split::Train,
                    rec: EcgRecord {
                        id: format!("p{p}_{n}"),
                        ..rec
                    },
                });
            }
        }
        let backend = make_backend(&cfg).unwrap();
        let set = TrainSet::build(records, backend.as_ref(), cfg.dims.raw_dim).unwrap();
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let mut first = None;
        let mut last = 0.0;
        let mut steps = 0;
        'outer: for epoch in 0.. {
            let batches = pair_epoch(&set.records, cfg.batch_size, cfg.seed, epoch).unwrap();
            for pairs in &batches {
                let batch = make_batch(&set, pairs).unwrap();
                trainer.d_step(&batch, epoch + 1, steps + 1).unwrap();
                let g = trainer.g_step(&batch, epoch + 1, steps + 1).unwrap();
                first.get_or_insert(g.l_rec);
                last = g.l_rec;
                steps += 1;
                if steps == 200 {
                    break 'outer;
                }
            }
        }
        let first = first.unwrap();
        assert!(
            last <= 0.5 * first,
            "reconstruction failed to halve: step 1 {first}, step 200 {last}"
        );
    }

    #[test]
    fn non_finite_losses_carry_the_batch_ids() {
        let cfg = tiny_cfg();
        let set = tiny_set(&cfg);
        let batch = make_batch(&set, &[(0, 3), (2, 1)]).unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();
        // Poison one generator weight so the forward pass overflows.
        let name = "generator.final.w";
        let shape = trainer.store.slot(name).value.shape().to_vec();
        trainer
            .store
            .set_value(name, Tensor::full(&shape, F::INFINITY));
        let err = trainer.g_step(&batch, 3, 2).unwrap_err();
        match err {
            Error::NonFinite {
                epoch,
                step,
                batch_ids,
            } => {
                assert_eq!(epoch, 3);
                assert_eq!(step, 2);
                assert_eq!(batch_ids, vec!["p0_0+p1_1", "p1_0+p0_1"]);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
