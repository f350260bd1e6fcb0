//! Localization score: how well the separator's binary mask, projected into
//! the sample domain, overlaps the ground-truth disease segments.

use ecgtwin_nn::seed::Stream;
use ecgtwin_nn::Graph;

use crate::config::Config;
use crate::data::preprocess::TARGET_LEN;
use crate::data::record::{EcgRecord, Segment};
use crate::model::separator::separate;
use crate::model::{bind_params, trainable_none};
use crate::text::{embed_reports, TextBackend};
use crate::{Error, Result, F};

/// Collapse a [C, L_e] binary mask to a per-sample density: mean over
/// channels, then nearest-neighbor upsample so each latent column covers an
/// equal stretch of the 4096-sample record.
pub fn mask_sample_density(mask: &[F], c: usize, l_e: usize, target_len: usize) -> Vec<f64> {
    let stride = target_len / l_e;
    let mut density = vec![0.0; target_len];
    for (col, d) in density.iter_mut().enumerate() {
        let latent = (col / stride).min(l_e - 1);
        let mut sum = 0.0;
        for ch in 0..c {
            sum += mask[ch * l_e + latent] as f64;
        }
        *d = sum / c as f64;
    }
    density
}

/// Indicator of samples covered by any disease segment on any lead.
pub fn segment_indicator(segments: &[Segment], target_len: usize) -> Vec<f64> {
    let mut g = vec![0.0; target_len];
    for seg in segments {
        let start = seg.start as usize;
        let end = (seg.end as usize).min(target_len);
        for v in &mut g[start.min(target_len)..end] {
            *v = 1.0;
        }
    }
    g
}

/// Soft intersection-over-union of two per-sample densities in [0, 1].
pub fn soft_iou(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (x, y) in a.iter().zip(b) {
        inter += x.min(*y);
        union += x.max(*y);
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU between a model mask and a record's ground-truth segments.
pub fn localization_iou(
    mask: &[F],
    c: usize,
    l_e: usize,
    segments: &[Segment],
    target_len: usize,
) -> Result<f64> {
    if mask.len() != c * l_e {
        return Err(Error::validation(format!(
            "mask of {} values cannot fill {c} x {l_e}",
            mask.len()
        )));
    }
    if segments.is_empty() {
        return Err(Error::validation(
            "localization needs a record with disease segments",
        ));
    }
    let density = mask_sample_density(mask, c, l_e, target_len);
    let truth = segment_indicator(segments, target_len);
    Ok(soft_iou(&density, &truth))
}

/// Mean IoU of `trials` random binary masks with exactly `ones` active
/// entries, against the same segments: the chance-level baseline.
pub fn random_mask_baseline(
    ones: usize,
    c: usize,
    l_e: usize,
    segments: &[Segment],
    target_len: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let total = c * l_e;
    if ones > total {
        return Err(Error::validation(format!(
            "cannot place {ones} ones in a {c} x {l_e} mask"
        )));
    }
    let mut s = Stream::named(seed, "localize.baseline");
    let mut sum = 0.0;
    for _ in 0..trials {
        let mut positions: Vec<usize> = (0..total).collect();
        s.shuffle(&mut positions);
        let mut mask = vec![0.0 as F; total];
        for &p in positions.iter().take(ones) {
            mask[p] = 1.0;
        }
        sum += localization_iou(&mask, c, l_e, segments, target_len)?;
    }
    Ok(sum / trials as f64)
}

/// Runs the frozen separator on one record and returns its binary mask
/// values, flat [C, L_e].
pub fn record_mask(
    store: &ecgtwin_nn::ParamStore<F>,
    cfg: &Config,
    backend: &dyn TextBackend,
    rec: &EcgRecord,
) -> Result<Vec<F>> {
    if rec.samples_per_lead != TARGET_LEN {
        return Err(Error::validation(format!(
            "record {} has {} samples per lead; expected preprocessed length {}",
            rec.id, rec.samples_per_lead, TARGET_LEN
        )));
    }
    let mut g: Graph<F> = Graph::new();
    let p = bind_params(&mut g, store, &trainable_none);
    let x = g.constant(ecgtwin_nn::Tensor::from_vec(
        &[1, crate::model::IN_LEADS, TARGET_LEN],
        rec.samples.clone(),
    ));
    let raw = embed_reports(backend, &[rec.report.as_str()])?;
    let raw = g.constant(ecgtwin_nn::Tensor::from_vec(&[1, cfg.dims.raw_dim], raw));
    let sep = separate(&mut g, &p, x, raw, &cfg.dims, cfg.l, cfg.use_vq, false);
    Ok(g.val(sep.mask).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_projection_averages_channels_and_tiles_columns() {
        // 2 channels x 4 columns, target 16: stride 4.
        let mask: Vec<F> = vec![
            1.0, 0.0, 1.0, 0.0, //
            1.0, 0.0, 0.0, 0.0,
        ];
        let d = mask_sample_density(&mask, 2, 4, 16);
        assert_eq!(&d[0..4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(&d[4..8], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&d[8..12], &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn iou_reference_points() {
        assert_eq!(soft_iou(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(soft_iou(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(soft_iou(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        let half = soft_iou(&[1.0, 1.0], &[1.0, 0.0]);
        assert_eq!(half, 0.5);
    }

    #[test]
    fn perfectly_aligned_mask_scores_one() {
        // Segment covers exactly the stretch of latent column 1.
        let segments = vec![Segment {
            lead: 0,
            start: 4,
            end: 8,
        }];
        let mask: Vec<F> = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]; // 2 ch x 4
        let iou = localization_iou(&mask, 2, 4, &segments, 16).unwrap();
        assert_eq!(iou, 1.0);
    }

    #[test]
    fn random_baseline_sits_near_the_density_product() {
        // Segments cover half the record; random masks at density 1/2
        // overlap about min-half, IoU well below 1.
        let segments = vec![Segment {
            lead: 0,
            start: 0,
            end: 2048,
        }];
        let base = random_mask_baseline(256, 64, 8, &segments, 4096, 100, 0).unwrap();
        assert!(base > 0.1 && base < 0.6, "{base}");
    }

    #[test]
    fn segment_free_records_are_rejected() {
        let mask = vec![0.0 as F; 8];
        assert!(localization_iou(&mask, 2, 4, &[], 16).unwrap_err().is_validation());
    }
}
