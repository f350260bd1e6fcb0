//! Synthetic 12-lead ECG generator with analytic ground truth. Beats are
//! sums of Gaussian bumps (P, Q, R, S, T) on a per-patient geometry;
//! disease phenotypes are additive morphology edits on known leads and
//! beats, so every diseased sample span is annotated exactly.

use ecgtwin_nn::seed::Stream;

use crate::data::preprocess::preprocess_record;
use crate::data::record::{EcgRecord, Label, Segment, LEADS};
use crate::error::Error;
use crate::Result;

pub const FS: u32 = 500;
pub const RAW_SECONDS: f64 = 10.0;
pub const RAW_LEN: usize = (FS as usize) * 10;

/// One Gaussian bump: center offset from the R peak in ms, standard
/// deviation in ms, and unit amplitude before lead gain.
#[derive(Clone, Copy, Debug)]
pub struct WaveParams {
    pub center_ms: f64,
    pub width_ms: f64,
    pub amplitude: f64,
}

const P: usize = 0;
const Q: usize = 1;
const R: usize = 2;
const S: usize = 3;
const T: usize = 4;

#[derive(Clone, Debug)]
pub struct DiseaseSpec {
    pub label: Label,
    /// P, Q, R, S, T in that order.
    pub waves: [WaveParams; 5],
    /// Projection of the beat template onto each of the 12 leads.
    pub lead_gains: [f64; LEADS],
    pub rr_mean_ms: f64,
    /// Half-width of the per-patient RR draw around the mean.
    pub rr_spread_ms: f64,
    /// Fractional per-beat RR jitter.
    pub rr_jitter: f64,
    pub noise_std: f64,
    /// Per-patient severity multiplier on all morphology edits.
    pub severity_range: (f64, f64),
    /// ST plateau height (used when label = STTC).
    pub st_offset: f64,
    /// Extra pathological Q amplitude, negative (MI).
    pub q_depth: f64,
    /// Fractional T amplitude increase (MI).
    pub t_gain: f64,
    /// Fractional QRS amplitude increase (HYP).
    pub qrs_gain: f64,
    /// Fractional T amplitude decrease (HYP).
    pub t_flatten: f64,
    /// PR prolongation in ms (CD).
    pub pr_prolong_ms: f64,
    /// Residual QRS scale on the near-dropped beat (CD).
    pub drop_scale: f64,
}

/// Leads touched by each phenotype plus the edited beat indices.
fn edit_sites(label: Label) -> (&'static [usize], &'static [usize]) {
    match label {
        Label::Norm => (&[], &[]),
        // V1, V2, V3
        Label::Mi => (&[6, 7, 8], &[1, 2, 3]),
        // V2, V3, V4
        Label::Sttc => (&[7, 8, 9], &[2, 3, 4]),
        // II, III, aVF
        Label::Cd => (&[1, 2, 5], &[2, 3, 4, 5]),
        // I, V5, V6
        Label::Hyp => (&[0, 10, 11], &[3, 4, 5]),
    }
}

fn report_for(label: Label) -> &'static str {
    match label {
        Label::Norm => "sinus rhythm normal ecg no significant abnormalities",
        Label::Mi => "myocardial infarction pathological q waves and tall t waves in leads v1 v2 v3",
        Label::Sttc => "significant st segment elevation in leads v2 v3 v4",
        Label::Cd => "conduction disturbance prolonged pr interval with dropped qrs in leads ii iii avf",
        Label::Hyp => "ventricular hypertrophy increased qrs voltage with t wave flattening in leads i v5 v6",
    }
}

impl DiseaseSpec {
    pub fn for_label(label: Label) -> DiseaseSpec {
        DiseaseSpec {
            label,
            waves: [
                WaveParams { center_ms: -160.0, width_ms: 25.0, amplitude: 0.12 },
                WaveParams { center_ms: -25.0, width_ms: 8.0, amplitude: -0.10 },
                WaveParams { center_ms: 0.0, width_ms: 12.0, amplitude: 1.00 },
                WaveParams { center_ms: 30.0, width_ms: 9.0, amplitude: -0.25 },
                WaveParams { center_ms: 300.0, width_ms: 60.0, amplitude: 0.30 },
            ],
            lead_gains: [0.60, 1.00, 0.45, -0.75, 0.30, 0.70, -0.35, 0.55, 0.80, 0.95, 0.85, 0.65],
            rr_mean_ms: 800.0,
            rr_spread_ms: 150.0,
            rr_jitter: 0.02,
            noise_std: 0.02,
            severity_range: (0.4, 1.0),
            st_offset: 0.25,
            q_depth: -0.35,
            t_gain: 1.5,
            qrs_gain: 0.8,
            t_flatten: 0.7,
            pr_prolong_ms: 60.0,
            drop_scale: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.waves.iter().enumerate() {
            if !(w.width_ms > 0.0) {
                return Err(Error::validation(format!("waves[{i}].width_ms must be > 0")));
            }
        }
        if !(self.rr_mean_ms > 0.0) {
            return Err(Error::validation("rr_mean_ms must be > 0"));
        }
        if self.rr_spread_ms < 0.0 || self.rr_spread_ms >= self.rr_mean_ms {
            return Err(Error::validation("rr_spread_ms must be in [0, rr_mean_ms)"));
        }
        if !(0.0..=0.2).contains(&self.rr_jitter) {
            return Err(Error::validation("rr_jitter must be in [0, 0.2]"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::validation("noise_std must be >= 0"));
        }
        let (lo, hi) = self.severity_range;
        if !(lo <= hi && lo >= 0.0) {
            return Err(Error::validation("severity_range must satisfy 0 <= lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.drop_scale) {
            return Err(Error::validation("drop_scale must be in [0, 1]"));
        }
        if self.pr_prolong_ms < 0.0 {
            return Err(Error::validation("pr_prolong_ms must be >= 0"));
        }
        Ok(())
    }
}

fn ms_to_sample(ms: f64) -> f64 {
    ms * FS as f64 / 1000.0
}

fn add_gaussian(lead: &mut [f32], center_ms: f64, width_ms: f64, amp: f64) {
    if amp == 0.0 {
        return;
    }
    let c = ms_to_sample(center_ms);
    let sigma = ms_to_sample(width_ms);
    let lo = ((c - 4.0 * sigma).floor().max(0.0)) as usize;
    let hi = ((c + 4.0 * sigma).ceil().min((lead.len() - 1) as f64)) as usize;
    if lo > hi {
        return;
    }
    for i in lo..=hi {
        let z = (i as f64 - c) / sigma;
        lead[i] += (amp * (-0.5 * z * z).exp()) as f32;
    }
}

/// Smoothstep-edged plateau between start_ms and end_ms (30 ms ramps).
fn add_plateau(lead: &mut [f32], start_ms: f64, end_ms: f64, amp: f64) {
    let ramp = ms_to_sample(30.0);
    let s = ms_to_sample(start_ms);
    let e = ms_to_sample(end_ms);
    let lo = (s.floor().max(0.0)) as usize;
    let hi = (e.ceil().min((lead.len() - 1) as f64)) as usize;
    if lo > hi {
        return;
    }
    for i in lo..=hi {
        let t = i as f64;
        let rise = ((t - s) / ramp).clamp(0.0, 1.0);
        let fall = ((e - t) / ramp).clamp(0.0, 1.0);
        let w_rise = rise * rise * (3.0 - 2.0 * rise);
        let w_fall = fall * fall * (3.0 - 2.0 * fall);
        lead[i] += (amp * w_rise.min(w_fall)) as f32;
    }
}

/// Exclusive-end sample span covering every index the edit wrote, clamped
/// to the record. Matches add_gaussian's clipped support exactly.
fn clamp_span(start_ms: f64, end_ms: f64) -> Option<(u32, u32)> {
    let s = ms_to_sample(start_ms).floor().max(0.0) as u32;
    let e = (ms_to_sample(end_ms).ceil() as i64 + 1).clamp(0, RAW_LEN as i64) as u32;
    if e > s && (s as usize) < RAW_LEN {
        Some((s, e))
    } else {
        None
    }
}

/// Raw 10-second record at 500 Hz with ground-truth segments in raw sample
/// coordinates. Geometry (beat schedule, gains, amplitudes) depends only on
/// patient_seed, so one patient's NORM and diseased records line up outside
/// the edited spans; noise is keyed by (patient_seed, label).
pub fn synth_raw(spec: &DiseaseSpec, patient_seed: u64) -> Result<EcgRecord> {
    spec.validate()?;
    let mut geom = Stream::named(patient_seed, "geometry");
    let rr = spec.rr_mean_ms + spec.rr_spread_ms * geom.uniform_in(-1.0, 1.0);
    let r_amp = spec.waves[R].amplitude * (1.0 + geom.uniform_in(-0.2, 0.2));
    let first_beat = geom.uniform_in(350.0, 420.0);
    let mut gains = [0.0f64; LEADS];
    for (g, base) in gains.iter_mut().zip(&spec.lead_gains) {
        *g = base * (1.0 + geom.uniform_in(-0.1, 0.1));
    }

    let mut rhythm = Stream::named(patient_seed, "rhythm");
    let mut centers_ms: Vec<f64> = Vec::new();
    let mut t = first_beat;
    while t < RAW_SECONDS * 1000.0 + 600.0 {
        centers_ms.push(t);
        t += rr * (1.0 + spec.rr_jitter * rhythm.uniform_in(-1.0, 1.0));
    }

    let mut disease = Stream::named(patient_seed, spec.label.as_str());
    let (sev_lo, sev_hi) = spec.severity_range;
    let severity = disease.uniform_in(sev_lo, sev_hi);
    let (edit_leads, edit_beats) = edit_sites(spec.label);
    // CD: one of the edited beats nearly loses its QRS.
    let drop_beat = if spec.label == Label::Cd {
        Some(edit_beats[disease.below(edit_beats.len())])
    } else {
        None
    };

    let mut samples = vec![0.0f32; LEADS * RAW_LEN];
    let mut segments: Vec<Segment> = Vec::new();
    for lead_idx in 0..LEADS {
        let gain = gains[lead_idx];
        let lead = &mut samples[lead_idx * RAW_LEN..(lead_idx + 1) * RAW_LEN];
        for &c in &centers_ms {
            for (wi, w) in spec.waves.iter().enumerate() {
                let amp = if wi == R { r_amp } else { w.amplitude };
                add_gaussian(lead, c + w.center_ms, w.width_ms, amp * gain);
            }
        }
        if !edit_leads.contains(&lead_idx) {
            continue;
        }
        for &b in edit_beats {
            if b >= centers_ms.len() {
                continue;
            }
            let c = centers_ms[b];
            let mut note = |span: Option<(u32, u32)>| {
                if let Some((s, e)) = span {
                    segments.push(Segment { lead: lead_idx as u16, start: s, end: e });
                }
            };
            match spec.label {
                Label::Sttc => {
                    add_plateau(lead, c + 40.0, c + 220.0, spec.st_offset * severity);
                    note(clamp_span(c + 40.0, c + 220.0));
                }
                Label::Mi => {
                    let q = &spec.waves[Q];
                    add_gaussian(lead, c + q.center_ms, q.width_ms, spec.q_depth * severity);
                    note(clamp_span(c + q.center_ms - 4.0 * q.width_ms, c + q.center_ms + 4.0 * q.width_ms));
                    let tw = &spec.waves[T];
                    add_gaussian(lead, c + tw.center_ms, tw.width_ms, tw.amplitude * spec.t_gain * severity);
                    note(clamp_span(c + tw.center_ms - 4.0 * tw.width_ms, c + tw.center_ms + 4.0 * tw.width_ms));
                }
                Label::Hyp => {
                    for wi in [Q, R, S] {
                        let w = &spec.waves[wi];
                        let amp = if wi == R { r_amp } else { w.amplitude };
                        add_gaussian(lead, c + w.center_ms, w.width_ms, amp * gain * spec.qrs_gain * severity);
                    }
                    note(clamp_span(
                        c + spec.waves[Q].center_ms - 4.0 * spec.waves[Q].width_ms,
                        c + spec.waves[S].center_ms + 4.0 * spec.waves[S].width_ms,
                    ));
                    let tw = &spec.waves[T];
                    add_gaussian(lead, c + tw.center_ms, tw.width_ms, -tw.amplitude * spec.t_flatten * severity);
                    note(clamp_span(c + tw.center_ms - 4.0 * tw.width_ms, c + tw.center_ms + 4.0 * tw.width_ms));
                }
                Label::Cd => {
                    let p = &spec.waves[P];
                    let shift = spec.pr_prolong_ms * severity;
                    add_gaussian(lead, c + p.center_ms, p.width_ms, -p.amplitude * gain);
                    add_gaussian(lead, c + p.center_ms - shift, p.width_ms, p.amplitude * gain);
                    note(clamp_span(
                        c + p.center_ms - shift - 4.0 * p.width_ms,
                        c + p.center_ms + 4.0 * p.width_ms,
                    ));
                    if drop_beat == Some(b) {
                        for wi in [Q, R, S] {
                            let w = &spec.waves[wi];
                            let amp = if wi == R { r_amp } else { w.amplitude };
                            add_gaussian(lead, c + w.center_ms, w.width_ms, -amp * gain * (1.0 - spec.drop_scale));
                        }
                        note(clamp_span(
                            c + spec.waves[Q].center_ms - 4.0 * spec.waves[Q].width_ms,
                            c + spec.waves[S].center_ms + 4.0 * spec.waves[S].width_ms,
                        ));
                    }
                }
                Label::Norm => {}
            }
        }
    }

    if spec.noise_std > 0.0 {
        let mut noise = Stream::named(patient_seed, &format!("noise-{}", spec.label.as_str()));
        for v in samples.iter_mut() {
            *v += (noise.normal() * spec.noise_std) as f32;
        }
    }

    Ok(EcgRecord {
        id: format!("p{patient_seed:04}_{}", spec.label.as_str().to_lowercase()),
        sampling_rate: FS,
        label: spec.label,
        report: report_for(spec.label).to_string(),
        segments,
        samples,
        samples_per_lead: RAW_LEN,
    })
}

/// Raw synthesis followed by the standard preprocessing chain.
pub fn synth_record(spec: &DiseaseSpec, patient_seed: u64) -> Result<EcgRecord> {
    let raw = synth_raw(spec, patient_seed)?;
    preprocess_record(&raw)
}

/// The generator's own beat schedule in raw sample coordinates, for tests
/// that compare detector output against ground truth.
pub fn beat_centers(spec: &DiseaseSpec, patient_seed: u64) -> Vec<usize> {
    let mut geom = Stream::named(patient_seed, "geometry");
    let rr = spec.rr_mean_ms + spec.rr_spread_ms * geom.uniform_in(-1.0, 1.0);
    let _ = geom.uniform_in(-0.2, 0.2);
    let first_beat = geom.uniform_in(350.0, 420.0);
    let mut rhythm = Stream::named(patient_seed, "rhythm");
    let mut out = Vec::new();
    let mut t = first_beat;
    while t < RAW_SECONDS * 1000.0 + 600.0 {
        if t < (RAW_LEN - 1) as f64 * 1000.0 / FS as f64 {
            out.push(ms_to_sample(t).round() as usize);
        }
        t += rr * (1.0 + spec.rr_jitter * rhythm.uniform_in(-1.0, 1.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::preprocess::detect_r_peaks;

    #[test]
    fn determinism_bit_identical() {
        let spec = DiseaseSpec::for_label(Label::Norm);
        let a = synth_raw(&spec, 7).unwrap();
        let b = synth_raw(&spec, 7).unwrap();
        assert_eq!(a, b);
        let pa = synth_record(&spec, 7).unwrap();
        let pb = synth_record(&spec, 7).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn zero_edit_sttc_equals_norm_outside_noise() {
        let mut sttc = DiseaseSpec::for_label(Label::Sttc);
        sttc.st_offset = 0.0;
        sttc.noise_std = 0.0;
        let mut norm = DiseaseSpec::for_label(Label::Norm);
        norm.noise_std = 0.0;
        let a = synth_raw(&sttc, 11).unwrap();
        let b = synth_raw(&norm, 11).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn detector_recovers_beat_schedule() {
        let spec = DiseaseSpec::for_label(Label::Mi);
        let rec = synth_raw(&spec, 3).unwrap();
        let truth = beat_centers(&spec, 3);
        let peaks = detect_r_peaks(rec.lead(1), rec.sampling_rate).unwrap();
        assert!(peaks.len() >= 7, "found {} peaks", peaks.len());
        // Every detected peak must sit within 2 samples of a scheduled beat;
        // the clamped moving-average windows earn a looser bound at the edges.
        for &p in &peaks {
            let nearest = truth
                .iter()
                .map(|&c| (c as i64 - p as i64).abs())
                .min()
                .unwrap();
            let tol = if p < 150 || p + 150 > RAW_LEN { 10 } else { 2 };
            assert!(nearest <= tol, "peak {p} off by {nearest}: truth {truth:?}");
        }
        // And the first seven scheduled beats must all be found.
        for &c in truth.iter().take(7) {
            let nearest = peaks.iter().map(|&p| (c as i64 - p as i64).abs()).min().unwrap();
            assert!(nearest <= 2, "beat {c} missed: peaks {peaks:?}");
        }
    }

    #[test]
    fn diseased_records_carry_segments() {
        for label in Label::DISEASES {
            let spec = DiseaseSpec::for_label(label);
            let raw = synth_raw(&spec, 21).unwrap();
            assert!(!raw.segments.is_empty(), "{label:?} raw should have segments");
            let (leads, _) = edit_sites(label);
            for seg in &raw.segments {
                assert!(leads.contains(&(seg.lead as usize)));
                assert!(seg.end > seg.start);
                assert!((seg.end as usize) <= RAW_LEN);
            }
            let pre = synth_record(&spec, 21).unwrap();
            assert!(!pre.segments.is_empty(), "{label:?} preprocessed should keep segments");
            for seg in &pre.segments {
                assert!((seg.end as usize) <= pre.samples_per_lead);
                assert!(seg.end > seg.start);
            }
        }
        let norm = synth_raw(&DiseaseSpec::for_label(Label::Norm), 21).unwrap();
        assert!(norm.segments.is_empty());
    }

    #[test]
    fn edits_confined_to_annotated_spans() {
        // Outside the annotated segments the diseased record must match the
        // same patient's NORM record exactly (noise disabled for both).
        for label in Label::DISEASES {
            let mut spec = DiseaseSpec::for_label(label);
            spec.noise_std = 0.0;
            let mut norm = DiseaseSpec::for_label(Label::Norm);
            norm.noise_std = 0.0;
            let dis = synth_raw(&spec, 33).unwrap();
            let base = synth_raw(&norm, 33).unwrap();
            for lead in 0..LEADS {
                let d = dis.lead(lead);
                let b = base.lead(lead);
                for i in 0..RAW_LEN {
                    let inside = dis.segments.iter().any(|s| {
                        s.lead as usize == lead && (s.start as usize) <= i && i < s.end as usize
                    });
                    if !inside {
                        // Annotations cover the full written support, so the
                        // match must be exact.
                        assert!(d[i] == b[i], "{label:?} lead {lead} sample {i}: {} vs {}", d[i], b[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn preprocessed_shape_and_normalization() {
        let spec = DiseaseSpec::for_label(Label::Hyp);
        let rec = synth_record(&spec, 5).unwrap();
        assert_eq!(rec.samples_per_lead, 4096);
        assert_eq!(rec.samples.len(), 12 * 4096);
        for lead in 0..LEADS {
            let xs = rec.lead(lead);
            let mean: f64 = xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = DiseaseSpec::for_label(Label::Mi);
        spec.waves[0].width_ms = 0.0;
        let err = synth_raw(&spec, 0).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("width_ms"));
    }
}
