//! Preprocessing chain: R-peak detection, seven-beat window extraction,
//! linear resampling to 4096 samples, per-lead z-scoring, and rhythm
//! rescaling. Every step is deterministic and allocation-explicit.

use crate::data::record::{EcgRecord, Segment, LEADS};
use crate::error::Error;
use crate::Result;

/// Fixed output length of the preprocessing chain.
pub const TARGET_LEN: usize = 4096;
/// Lead II drives peak detection.
pub const REFERENCE_LEAD: usize = 1;
/// Samples kept before the first and after the seventh R peak.
pub const WINDOW_MARGIN: usize = 100;
/// Beats required for a usable record.
pub const MIN_BEATS: usize = 7;

/// Centered moving average with edge clamping; window is the nominal width
/// in samples (split as floor/ceil halves around the center).
fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let w = window.max(1);
    let left = w / 2;
    let right = w - 1 - left;
    let mut out = vec![0.0; n];
    for i in 0..n {
        let lo = i.saturating_sub(left);
        let hi = (i + right).min(n - 1);
        let mut acc = 0.0;
        for v in &x[lo..=hi] {
            acc += v;
        }
        out[i] = acc / (hi - lo + 1) as f64;
    }
    out
}

/// QRS-band emphasis: difference of a short and a long moving average.
fn band_limit(x: &[f64], fs: u32) -> Vec<f64> {
    let fs = fs as f64;
    let short_w = ((0.025 * fs).round() as usize).max(1);
    let long_w = ((0.200 * fs).round() as usize).max(short_w + 1);
    let short = moving_average(x, short_w);
    let long = moving_average(x, long_w);
    short.iter().zip(&long).map(|(s, l)| s - l).collect()
}

/// Derivative -> square -> moving-window integration, the classic QRS
/// energy trace. Peaks of this trace sit on QRS complexes.
fn qrs_energy(bp: &[f64], fs: u32) -> Vec<f64> {
    let n = bp.len();
    let mut deriv = vec![0.0; n];
    for i in 0..n {
        let prev = bp[i.saturating_sub(1)];
        let next = bp[(i + 1).min(n - 1)];
        deriv[i] = 0.5 * (next - prev);
    }
    for d in deriv.iter_mut() {
        *d = *d * *d;
    }
    let mwi_w = ((0.150 * fs as f64).round() as usize).max(1);
    moving_average(&deriv, mwi_w)
}

/// Rolling maximum over a centered window of `half` samples each side.
fn rolling_max(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let mut m = f64::NEG_INFINITY;
        for &v in &x[lo..=hi] {
            if v > m {
                m = v;
            }
        }
        out[i] = m;
    }
    out
}

/// Detects R peaks on one lead. Adaptive threshold: half the rolling
/// maximum of the QRS energy over two-second windows; 200 ms refractory;
/// each detection is refined to the local maximum of the band-limited
/// signal so the index lands on the R wave itself.
pub fn detect_r_peaks(signal: &[f32], fs: u32) -> Result<Vec<usize>> {
    assert!(signal.len() >= 2, "detect_r_peaks needs at least 2 samples");
    assert!(fs > 0);
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite sample in signal"));
    }
    let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    let bp = band_limit(&x, fs);
    let energy = qrs_energy(&bp, fs);
    let thr = rolling_max(&energy, fs as usize);

    let refractory = (0.200 * fs as f64).round() as usize;
    let mut candidates: Vec<usize> = Vec::new();
    for i in 1..energy.len() - 1 {
        let is_local_max = energy[i] > energy[i - 1] && energy[i] >= energy[i + 1];
        if is_local_max && energy[i] > 0.5 * thr[i] {
            match candidates.last().copied() {
                Some(last) if i - last <= refractory => {
                    if energy[i] > energy[last] {
                        *candidates.last_mut().unwrap() = i;
                    }
                }
                _ => candidates.push(i),
            }
        }
    }

    let refine = ((0.100 * fs as f64).round() as usize).max(1);
    let mut peaks: Vec<usize> = Vec::with_capacity(candidates.len());
    for &c in &candidates {
        let lo = c.saturating_sub(refine);
        let hi = (c + refine).min(bp.len() - 1);
        let mut best = lo;
        for j in lo..=hi {
            if bp[j] > bp[best] {
                best = j;
            }
        }
        if peaks.last() != Some(&best) {
            peaks.push(best);
        }
    }
    peaks.dedup();
    debug_assert!(peaks.windows(2).all(|w| w[0] < w[1]));
    Ok(peaks)
}

/// Window [first peak - 100, seventh peak + 100], inclusive, clamped to the
/// signal. Fewer than seven peaks is an insufficient-beats error.
pub fn extract_window(r_peaks: &[usize], n: usize, record_id: &str) -> Result<(usize, usize)> {
    if r_peaks.len() < MIN_BEATS {
        return Err(Error::InsufficientBeats {
            record_id: record_id.to_string(),
            found: r_peaks.len(),
            need: MIN_BEATS,
        });
    }
    let start = r_peaks[0].saturating_sub(WINDOW_MARGIN);
    let end = (r_peaks[MIN_BEATS - 1] + WINDOW_MARGIN).min(n - 1);
    Ok((start, end))
}

/// Linear interpolation of one lead onto `target` uniformly spaced
/// positions; endpoints are preserved exactly.
pub fn resample_to_fixed(segment: &[f32], target: usize) -> Result<Vec<f32>> {
    let m = segment.len();
    if m < 2 {
        return Err(Error::data(format!("resample needs >= 2 samples, got {m}")));
    }
    assert!(target >= 2);
    if m == target {
        return Ok(segment.to_vec());
    }
    let scale = (m - 1) as f64 / (target - 1) as f64;
    let mut out = Vec::with_capacity(target);
    for i in 0..target {
        let pos = i as f64 * scale;
        let j = (pos.floor() as usize).min(m - 2);
        let frac = pos - j as f64;
        let v = segment[j] as f64 * (1.0 - frac) + segment[j + 1] as f64 * frac;
        out.push(v as f32);
    }
    // Guard against floating-point drift at the boundary.
    out[0] = segment[0];
    out[target - 1] = segment[m - 1];
    Ok(out)
}

/// Per-lead z-score with population standard deviation. A constant lead
/// maps to all zeros.
pub fn normalize_lead(lead: &mut [f32]) {
    let n = lead.len();
    assert!(n > 0);
    let mut mean = 0.0f64;
    for &v in lead.iter() {
        mean += v as f64;
    }
    mean /= n as f64;
    let mut var = 0.0f64;
    for &v in lead.iter() {
        let d = v as f64 - mean;
        var += d * d;
    }
    var /= n as f64;
    let std = var.sqrt();
    if std == 0.0 {
        for v in lead.iter_mut() {
            *v = 0.0;
        }
    } else {
        for v in lead.iter_mut() {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
}

/// Maps a sample index from the extracted window into resampled coordinates.
fn map_index(p: usize, s0: usize, m: usize, target: usize) -> usize {
    let rel = p.saturating_sub(s0).min(m - 1);
    let pos = rel as f64 * (target - 1) as f64 / (m - 1) as f64;
    (pos.round() as usize).min(target - 1)
}

/// Full chain: detect peaks on lead II, cut the seven-beat window, resample
/// every lead to 4096, z-score per lead. Ground-truth segments are mapped
/// through the same coordinate transform; the stored sampling rate is
/// adjusted so sample spacing stays truthful after resampling.
pub fn preprocess_record(raw: &EcgRecord) -> Result<EcgRecord> {
    let peaks = detect_r_peaks(raw.lead(REFERENCE_LEAD), raw.sampling_rate)?;
    let (s0, s1) = extract_window(&peaks, raw.samples_per_lead, &raw.id)?;
    let m = s1 - s0 + 1;
    let mut samples = Vec::with_capacity(LEADS * TARGET_LEN);
    for lead in 0..LEADS {
        let mut resampled = resample_to_fixed(&raw.lead(lead)[s0..=s1], TARGET_LEN)?;
        normalize_lead(&mut resampled);
        samples.extend_from_slice(&resampled);
    }
    let mut segments = Vec::new();
    for seg in &raw.segments {
        let (a, b) = (seg.start as usize, seg.end as usize);
        if b <= s0 || a > s1 {
            continue;
        }
        let a = a.max(s0);
        let b = b.min(s1 + 1);
        let start = map_index(a, s0, m, TARGET_LEN) as u32;
        let end = map_index(b - 1, s0, m, TARGET_LEN) as u32 + 1;
        if end > start {
            segments.push(Segment { lead: seg.lead, start, end });
        }
    }
    let eff_rate = (raw.sampling_rate as f64 * TARGET_LEN as f64 / m as f64).round() as u32;
    Ok(EcgRecord {
        id: raw.id.clone(),
        sampling_rate: eff_rate.max(1),
        label: raw.label,
        report: raw.report.clone(),
        segments,
        samples,
        samples_per_lead: TARGET_LEN,
    })
}

/// Rescales the time axis by `rr_ratio` (output RR = ratio x input RR), then
/// tiles (ratio < 1) or crops (ratio > 1) back to exactly 4096 samples.
/// Segment annotations are carried through for the first tile only.
pub fn rhythm_scale(record: &EcgRecord, rr_ratio: f64) -> Result<EcgRecord> {
    if !(0.25..=4.0).contains(&rr_ratio) || !rr_ratio.is_finite() {
        return Err(Error::validation(format!(
            "rr_ratio must be in [0.25, 4], got {rr_ratio}"
        )));
    }
    let n = record.samples_per_lead;
    assert!(n >= 2);
    let scaled_len = ((n as f64 * rr_ratio).round() as usize).clamp(2, 4 * n);
    let mut samples = Vec::with_capacity(LEADS * n);
    for lead in 0..LEADS {
        let x = record.lead(lead);
        let mut y = Vec::with_capacity(scaled_len);
        for j in 0..scaled_len {
            // Position in input coordinates; the last scaled sample lands on
            // the last input sample so tiles join without a gap.
            let pos = j as f64 * (n - 1) as f64 / (scaled_len - 1) as f64;
            let k = (pos.floor() as usize).min(n - 2);
            let frac = pos - k as f64;
            y.push((x[k] as f64 * (1.0 - frac) + x[k + 1] as f64 * frac) as f32);
        }
        for i in 0..n {
            samples.push(y[i % scaled_len]);
        }
    }
    let mut segments = Vec::new();
    for seg in &record.segments {
        let map = |p: u32| ((p as f64 * (scaled_len - 1) as f64 / (n - 1) as f64).round()) as u32;
        let start = map(seg.start).min(n as u32);
        let end = map(seg.end).min(n as u32);
        if end > start && (start as usize) < scaled_len.min(n) {
            segments.push(Segment { lead: seg.lead, start, end: end.min(scaled_len.min(n) as u32) });
        }
    }
    Ok(EcgRecord {
        id: record.id.clone(),
        sampling_rate: record.sampling_rate,
        label: record.label,
        report: record.report.clone(),
        segments,
        samples,
        samples_per_lead: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::record::Label;
    use proptest::prelude::*;

    fn gaussian_bump(out: &mut [f32], center: f64, sigma: f64, amp: f64) {
        let lo = ((center - 4.0 * sigma).floor().max(0.0)) as usize;
        let hi = ((center + 4.0 * sigma).ceil() as usize).min(out.len() - 1);
        for i in lo..=hi {
            let z = (i as f64 - center) / sigma;
            out[i] += (amp * (-0.5 * z * z).exp()) as f32;
        }
    }

    fn beat_train(n: usize, centers: &[f64]) -> Vec<f32> {
        let mut x = vec![0.0f32; n];
        for &c in centers {
            gaussian_bump(&mut x, c, 6.0, 1.0);
        }
        x
    }

    #[test]
    fn constant_zero_has_no_peaks() {
        let x = vec![0.0f32; 4000];
        assert!(detect_r_peaks(&x, 500).unwrap().is_empty());
    }

    #[test]
    fn single_spike_found_within_two_samples() {
        let mut x = vec![0.0f32; 2000];
        gaussian_bump(&mut x, 500.0, 6.0, 1.0);
        let peaks = detect_r_peaks(&x, 500).unwrap();
        assert_eq!(peaks.len(), 1);
        assert!((peaks[0] as i64 - 500).abs() <= 2, "got {:?}", peaks);
    }

    #[test]
    fn regular_train_recovers_rr() {
        let centers: Vec<f64> = (0..10).map(|k| 300.0 + 400.0 * k as f64).collect();
        let x = beat_train(4300, &centers);
        let peaks = detect_r_peaks(&x, 500).unwrap();
        assert_eq!(peaks.len(), 10, "{peaks:?}");
        let mut rrs: Vec<i64> = peaks.windows(2).map(|w| (w[1] - w[0]) as i64).collect();
        rrs.sort_unstable();
        let median = rrs[rrs.len() / 2];
        assert!((median - 400).abs() <= 2, "median {median}");
        for (p, c) in peaks.iter().zip(&centers) {
            assert!((*p as f64 - c).abs() <= 2.0);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut x = vec![0.0f32; 100];
        x[50] = f32::NAN;
        assert!(detect_r_peaks(&x, 500).is_err());
    }

    #[test]
    fn window_arithmetic() {
        let peaks = [200, 400, 600, 800, 1000, 1200, 1400];
        assert_eq!(extract_window(&peaks, 5000, "x").unwrap(), (100, 1500));
        let early = [50, 400, 600, 800, 1000, 1200, 1400];
        assert_eq!(extract_window(&early, 5000, "x").unwrap(), (0, 1500));
        let few = [200, 400, 600, 800, 1000, 1200];
        match extract_window(&few, 5000, "p9") {
            Err(Error::InsufficientBeats { record_id, found, need }) => {
                assert_eq!(record_id, "p9");
                assert_eq!((found, need), (6, 7));
            }
            other => panic!("expected InsufficientBeats, got {other:?}"),
        }
        // Extra peaks beyond the seventh are ignored.
        let many = [200, 400, 600, 800, 1000, 1200, 1400, 1600, 1800];
        assert_eq!(extract_window(&many, 5000, "x").unwrap(), (100, 1500));
    }

    #[test]
    fn resample_identity_and_ramp() {
        let x: Vec<f32> = (0..4096).map(|i| (i as f32).sin()).collect();
        assert_eq!(resample_to_fixed(&x, 4096).unwrap(), x);

        let ramp: Vec<f32> = (0..2048).map(|i| i as f32 / 2047.0).collect();
        let out = resample_to_fixed(&ramp, 4096).unwrap();
        assert_eq!(out.len(), 4096);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[4095], 1.0);
        for (i, &v) in out.iter().enumerate() {
            let expect = i as f32 / 4095.0;
            assert!((v - expect).abs() < 1e-5, "i={i} v={v} expect={expect}");
        }
    }

    #[test]
    fn resample_matches_pointwise_oracle() {
        // Independent oracle: direct evaluation of the interpolation formula
        // in f64 at each output position, written before the implementation.
        let m = 1401usize;
        let seg: Vec<f32> = (0..m)
            .map(|i| ((i as f64 * 0.037).sin() + 0.3 * (i as f64 * 0.011).cos()) as f32)
            .collect();
        let out = resample_to_fixed(&seg, 4096).unwrap();
        for i in 0..4096 {
            let pos = i as f64 * (m - 1) as f64 / 4095.0;
            let j = (pos.floor() as usize).min(m - 2);
            let frac = pos - j as f64;
            let oracle = seg[j] as f64 * (1.0 - frac) + seg[j + 1] as f64 * frac;
            assert!((out[i] as f64 - oracle).abs() < 1e-6, "i={i}");
        }
        assert!(resample_to_fixed(&seg[..1], 4096).is_err());
    }

    #[test]
    fn normalize_examples() {
        let mut constant = vec![1.0f32; 64];
        normalize_lead(&mut constant);
        assert!(constant.iter().all(|&v| v == 0.0));

        let mut lead: Vec<f32> = (0..4096).map(|i| (i as f32 * 0.01).sin() * 3.0 + 0.7).collect();
        normalize_lead(&mut lead);
        let mean: f64 = lead.iter().map(|&v| v as f64).sum::<f64>() / lead.len() as f64;
        let var: f64 = lead.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / lead.len() as f64;
        assert!(mean.abs() <= 1e-6);
        assert!((var.sqrt() - 1.0).abs() <= 1e-6);

        let before = lead.clone();
        normalize_lead(&mut lead);
        for (a, b) in before.iter().zip(&lead) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    fn test_record(rr: f64) -> EcgRecord {
        let n = TARGET_LEN;
        let centers: Vec<f64> = (0..)
            .map(|k| 300.0 + rr * k as f64)
            .take_while(|&c| c < n as f64 - 100.0)
            .collect();
        let mut samples = Vec::with_capacity(LEADS * n);
        for _ in 0..LEADS {
            samples.extend_from_slice(&beat_train(n, &centers));
        }
        EcgRecord {
            id: "t".into(),
            sampling_rate: 1462,
            label: Label::Norm,
            report: String::new(),
            segments: vec![Segment { lead: 0, start: 10, end: 20 }],
            samples,
            samples_per_lead: n,
        }
    }

    #[test]
    fn rhythm_scale_identity() {
        let rec = test_record(1100.0);
        let out = rhythm_scale(&rec, 1.0).unwrap();
        assert_eq!(out.samples_per_lead, TARGET_LEN);
        for (a, b) in rec.samples.iter().zip(&out.samples) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn rhythm_scale_halves_rr() {
        let rec = test_record(1100.0);
        let out = rhythm_scale(&rec, 0.5).unwrap();
        assert_eq!(out.samples.len(), LEADS * TARGET_LEN);
        let peaks = detect_r_peaks(out.lead(REFERENCE_LEAD), out.sampling_rate).unwrap();
        assert!(peaks.len() >= 4);
        let mut rrs: Vec<i64> = peaks.windows(2).map(|w| (w[1] - w[0]) as i64).collect();
        rrs.sort_unstable();
        let median = rrs[rrs.len() / 2];
        assert!((median - 550).abs() <= 4, "median {median} peaks {peaks:?}");
    }

    #[test]
    fn rhythm_scale_range_checked() {
        let rec = test_record(1100.0);
        assert!(rhythm_scale(&rec, 0.2).is_err());
        assert!(rhythm_scale(&rec, 4.5).is_err());
        assert!(rhythm_scale(&rec, f64::NAN).is_err());
        let out = rhythm_scale(&rec, 2.0).unwrap();
        assert_eq!(out.samples_per_lead, TARGET_LEN);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn resample_preserves_monotonicity(m in 2usize..600, up in proptest::bool::ANY) {
            let seg: Vec<f32> = (0..m)
                .map(|i| if up { i as f32 } else { -(i as f32) * 0.5 })
                .collect();
            let out = resample_to_fixed(&seg, 1024).unwrap();
            for w in out.windows(2) {
                if up { prop_assert!(w[1] >= w[0]); } else { prop_assert!(w[1] <= w[0]); }
            }
        }

        #[test]
        fn normalize_is_idempotent(seed in 0u64..500, n in 8usize..200) {
            let mut s = ecgtwin_nn::seed::Stream::new(seed);
            let mut lead: Vec<f32> = (0..n).map(|_| s.uniform_in(-2.0, 2.0) as f32).collect();
            normalize_lead(&mut lead);
            let once = lead.clone();
            normalize_lead(&mut lead);
            for (a, b) in once.iter().zip(&lead) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn detected_peaks_strictly_ascend(seed in 0u64..100) {
            let mut s = ecgtwin_nn::seed::Stream::new(seed);
            let mut centers = Vec::new();
            let mut t = 250.0 + s.uniform_in(0.0, 100.0);
            while t < 3800.0 {
                centers.push(t);
                t += s.uniform_in(300.0, 500.0);
            }
            let mut x = beat_train(4096, &centers);
            for v in x.iter_mut() {
                *v += (s.normal() * 0.01) as f32;
            }
            let peaks = detect_r_peaks(&x, 500).unwrap();
            for w in peaks.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
        }
    }
}
