//! Heart-rate series extraction from the filtered PPG.
//!
//! Systolic peaks are found with an adaptive-threshold local-maximum
//! detector: a candidate is kept when it exceeds half the moving 75th
//! percentile of positive amplitudes in a 5-second window, and candidates
//! closer than the 220 BPM refractory distance are resolved in favor of the
//! larger amplitude (ties to the earlier index).
//!
//! Consecutive peaks give inter-beat intervals; per-beat heart rates
//! (`60 / IBI` in BPM) are anchored at the interval midpoints, linearly
//! interpolated onto the sample grid with edge hold, and normalized two
//! ways: against the fixed [30, 220] BPM operating range (covers rapid
//! ventricular response) and against the segment's own min/max so regular
//! rhythms keep usable dynamic range.

use thiserror::Error;

use crate::channels::normalize_unit;

/// Maximum plausible heart rate; sets the detector's refractory distance.
pub const MAX_HR_BPM: f64 = 220.0;
/// Minimum of the fixed normalization range, in BPM.
pub const MIN_HR_BPM: f64 = 30.0;
/// Width of the moving-percentile window, in seconds.
const THRESHOLD_WINDOW_S: f64 = 5.0;
/// Fraction of the windowed 75th percentile used as the peak threshold.
const THRESHOLD_FRACTION: f64 = 0.5;

/// Detected beats and their per-beat heart rates.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatSeries {
    /// Sample indices of systolic peaks, strictly increasing.
    pub peak_indices: Vec<usize>,
    /// Heart rate of each consecutive peak pair, in BPM; length is
    /// `peak_indices.len() − 1`.
    pub hr_bpm: Vec<f64>,
    /// Sampling rate the indices refer to.
    pub fs: f64,
}

impl BeatSeries {
    /// Midpoint (in fractional samples) of each consecutive peak pair; the
    /// anchor positions for interpolation.
    pub fn midpoints(&self) -> Vec<f64> {
        self.peak_indices
            .windows(2)
            .map(|w| (w[0] + w[1]) as f64 / 2.0)
            .collect()
    }
}

/// The three per-sample heart-rate channels derived from one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct HrChannels {
    /// Interpolated heart rate in BPM.
    pub hr_interp: Vec<f64>,
    /// Heart rate normalized against the fixed [30, 220] BPM range.
    pub hr_fixed: Vec<f64>,
    /// Heart rate normalized against the segment's own min/max.
    pub hr_zoom: Vec<f64>,
    /// Set when the segment's heart rate was constant; the zoom channel is
    /// then all zeros but the segment stays usable.
    pub zoom_degenerate: bool,
}

/// Heart-rate extraction failures; these reject the segment.
#[derive(Debug, Error)]
pub enum HrError {
    #[error("only {found} peaks detected, need at least 3 for a heart-rate series")]
    TooFewPeaks { found: usize },
    #[error("peak indices must be strictly increasing with spacing >= {min_spacing} samples")]
    InvalidPeaks { min_spacing: usize },
}

/// Refractory distance in samples: `round(fs·60/220)`.
pub fn refractory_samples(fs: f64) -> usize {
    (fs * 60.0 / MAX_HR_BPM).round() as usize
}

/// Detect systolic peaks in a bandpass-filtered PPG trace.
///
/// Returns the peak sample indices, or an error when fewer than 3 peaks are
/// found (heart rate is then undefined for the segment).
pub fn detect_peaks(ppg_filtered: &[f64], fs: f64) -> Result<Vec<usize>, HrError> {
    let n = ppg_filtered.len();
    let min_spacing = refractory_samples(fs);
    let half_window = (THRESHOLD_WINDOW_S * fs / 2.0).round() as usize;

    // Candidate local maxima above the adaptive threshold. Plateaus keep
    // their first sample (strict rise in, non-strict fall out).
    let mut candidates: Vec<usize> = Vec::new();
    for t in 1..n.saturating_sub(1) {
        if ppg_filtered[t] > ppg_filtered[t - 1] && ppg_filtered[t] >= ppg_filtered[t + 1] {
            let lo = t.saturating_sub(half_window);
            let hi = (t + half_window + 1).min(n);
            match positive_percentile_75(&ppg_filtered[lo..hi]) {
                Some(p75) if ppg_filtered[t] > THRESHOLD_FRACTION * p75 => candidates.push(t),
                _ => {}
            }
        }
    }

    // Resolve refractory conflicts: larger amplitude wins, ties go to the
    // earlier index.
    candidates.sort_by(|&a, &b| {
        ppg_filtered[b]
            .partial_cmp(&ppg_filtered[a])
            .expect("filtered PPG is finite")
            .then(a.cmp(&b))
    });
    let mut accepted: Vec<usize> = Vec::new();
    for &idx in &candidates {
        if accepted
            .iter()
            .all(|&kept| idx.abs_diff(kept) >= min_spacing)
        {
            accepted.push(idx);
        }
    }
    accepted.sort_unstable();

    if accepted.len() < 3 {
        return Err(HrError::TooFewPeaks {
            found: accepted.len(),
        });
    }
    Ok(accepted)
}

/// 75th percentile (linear interpolation between order statistics) of the
/// strictly positive values in `window`. `None` when there are none.
fn positive_percentile_75(window: &[f64]) -> Option<f64> {
    let mut positives: Vec<f64> = window.iter().copied().filter(|&v| v > 0.0).collect();
    if positives.is_empty() {
        return None;
    }
    positives.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let rank = 0.75 * (positives.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(positives[lo] + (positives[hi] - positives[lo]) * frac)
}

/// Convert detected peaks into a per-beat heart-rate series.
pub fn beats_to_hr(peaks: &[usize], fs: f64) -> Result<BeatSeries, HrError> {
    if peaks.len() < 3 {
        return Err(HrError::TooFewPeaks { found: peaks.len() });
    }
    let min_spacing = refractory_samples(fs);
    let spacing_ok = peaks
        .windows(2)
        .all(|w| w[1] > w[0] && w[1] - w[0] >= min_spacing);
    if !spacing_ok {
        return Err(HrError::InvalidPeaks { min_spacing });
    }
    let hr_bpm = peaks
        .windows(2)
        .map(|w| {
            let ibi_s = (w[1] - w[0]) as f64 / fs;
            60.0 / ibi_s
        })
        .collect();
    Ok(BeatSeries {
        peak_indices: peaks.to_vec(),
        hr_bpm,
        fs,
    })
}

/// Linearly interpolate per-beat heart rates onto an `len`-sample grid.
///
/// Anchors sit at the beat-pair midpoints; before the first and after the
/// last anchor the nearest value is held.
pub fn interpolate_hr(beats: &BeatSeries, len: usize) -> Vec<f64> {
    let anchors_x = beats.midpoints();
    let anchors_y = &beats.hr_bpm;
    debug_assert_eq!(anchors_x.len(), anchors_y.len());
    debug_assert!(!anchors_x.is_empty());

    let mut out = Vec::with_capacity(len);
    let mut seg = 0; // index of the anchor interval containing t
    for t in 0..len {
        let t = t as f64;
        if t <= anchors_x[0] {
            out.push(anchors_y[0]);
            continue;
        }
        if t >= *anchors_x.last().unwrap() {
            out.push(*anchors_y.last().unwrap());
            continue;
        }
        while anchors_x[seg + 1] < t {
            seg += 1;
        }
        let (x0, x1) = (anchors_x[seg], anchors_x[seg + 1]);
        let (y0, y1) = (anchors_y[seg], anchors_y[seg + 1]);
        out.push(y0 + (y1 - y0) * (t - x0) / (x1 - x0));
    }
    out
}

/// Normalize heart rates against the fixed [30, 220] BPM range, clamped to
/// [0, 1].
pub fn hr_fixed(hr: &[f64]) -> Vec<f64> {
    hr.iter()
        .map(|&v| ((v - MIN_HR_BPM) / (MAX_HR_BPM - MIN_HR_BPM)).clamp(0.0, 1.0))
        .collect()
}

/// Normalize heart rates against the segment's own min/max.
///
/// A constant series yields all zeros with the degenerate flag set; the
/// segment is kept (a perfectly regular rhythm is valid NSR).
pub fn hr_zoom(hr: &[f64]) -> (Vec<f64>, bool) {
    normalize_unit(hr)
}

/// Full heart-rate channel extraction for one filtered segment.
pub fn compute_hr_channels(ppg_filtered: &[f64], fs: f64) -> Result<HrChannels, HrError> {
    let peaks = detect_peaks(ppg_filtered, fs)?;
    let beats = beats_to_hr(&peaks, fs)?;
    let hr_interp = interpolate_hr(&beats, ppg_filtered.len());
    let fixed = hr_fixed(&hr_interp);
    let (zoom, zoom_degenerate) = hr_zoom(&hr_interp);
    Ok(HrChannels {
        hr_interp,
        hr_fixed: fixed,
        hr_zoom: zoom,
        zoom_degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Gaussian pulse train used to exercise the detector directly.
    fn pulse_train(period: usize, n: usize, amps: impl Fn(usize) -> f64) -> Vec<f64> {
        let sigma = 3.0;
        let mut x = vec![0.0; n];
        let mut beat = 0;
        let mut center = period / 2;
        while center < n {
            let a = amps(beat);
            let lo = center.saturating_sub(12);
            let hi = (center + 12).min(n - 1);
            for t in lo..=hi {
                let d = t as f64 - center as f64;
                x[t] += a * (-d * d / (2.0 * sigma * sigma)).exp();
            }
            beat += 1;
            center += period;
        }
        x
    }

    #[test]
    fn refractory_is_14_samples_at_50_hz() {
        assert_eq!(refractory_samples(50.0), 14);
    }

    #[test]
    fn detects_regular_train_at_period_50() {
        let x = pulse_train(50, 1500, |_| 1.0);
        let peaks = detect_peaks(&x, 50.0).unwrap();
        assert_eq!(peaks.len(), 30, "one peak per rendered pulse");
        for w in peaks.windows(2) {
            let spacing = w[1] - w[0];
            assert!(
                (49..=51).contains(&spacing),
                "spacing {spacing} not within 50 ± 1"
            );
        }
    }

    #[test]
    fn constant_signal_is_rejected() {
        let x = vec![0.7; 1500];
        assert!(matches!(
            detect_peaks(&x, 50.0),
            Err(HrError::TooFewPeaks { found: 0 })
        ));
    }

    #[test]
    fn halved_pulse_still_detected_by_adaptive_threshold() {
        let full = detect_peaks(&pulse_train(50, 1500, |_| 1.0), 50.0).unwrap();
        let halved = detect_peaks(
            &pulse_train(50, 1500, |b| if b == 14 { 0.5 } else { 1.0 }),
            50.0,
        )
        .unwrap();
        assert_eq!(full.len(), halved.len(), "threshold is adaptive, not global");
    }

    #[test]
    fn beats_to_hr_examples() {
        let b = beats_to_hr(&[0, 50, 100], 50.0).unwrap();
        assert_eq!(b.hr_bpm, vec![60.0, 60.0]);

        let b = beats_to_hr(&[0, 25, 50], 50.0).unwrap();
        assert_eq!(b.hr_bpm, vec![120.0, 120.0]);

        let b = beats_to_hr(&[0, 50, 80, 130], 50.0).unwrap();
        assert_eq!(b.hr_bpm, vec![60.0, 100.0, 60.0]);
    }

    #[test]
    fn beats_to_hr_rejects_two_peaks() {
        assert!(matches!(
            beats_to_hr(&[0, 50], 50.0),
            Err(HrError::TooFewPeaks { found: 2 })
        ));
    }

    #[test]
    fn beats_to_hr_rejects_decreasing_peaks() {
        assert!(matches!(
            beats_to_hr(&[0, 50, 40], 50.0),
            Err(HrError::InvalidPeaks { .. })
        ));
    }

    #[test]
    fn interpolate_constant_hr() {
        let beats = beats_to_hr(&[0, 50, 100, 150], 50.0).unwrap();
        let hr = interpolate_hr(&beats, 1500);
        assert_eq!(hr.len(), 1500);
        assert!(hr.iter().all(|&v| v == 60.0));
    }

    #[test]
    fn interpolate_two_anchor_example() {
        // Midpoint anchors at samples 100 and 200 carrying 60 and 120 BPM.
        let beats = BeatSeries {
            peak_indices: vec![50, 150, 250],
            hr_bpm: vec![60.0, 120.0],
            fs: 50.0,
        };
        let hr = interpolate_hr(&beats, 1500);
        assert_eq!(hr[0], 60.0, "edge hold before first anchor");
        assert_eq!(hr[150], 90.0, "linear midpoint");
        assert_eq!(hr[1499], 120.0, "edge hold after last anchor");
    }

    #[test]
    fn interpolate_piecewise_from_varying_beats() {
        let beats = beats_to_hr(&[0, 50, 80, 130], 50.0).unwrap();
        let hr = interpolate_hr(&beats, 150);
        let max = hr.iter().cloned().fold(f64::MIN, f64::max);
        let min = hr.iter().cloned().fold(f64::MAX, f64::min);
        assert_eq!(max, 100.0);
        assert_eq!(min, 60.0);
        // The 100 BPM anchor sits at the midpoint of peaks 50 and 80.
        assert_eq!(hr[65], 100.0);
    }

    #[test]
    fn hr_fixed_examples() {
        assert_eq!(hr_fixed(&[30.0]), vec![0.0]);
        assert_eq!(hr_fixed(&[220.0]), vec![1.0]);
        assert_eq!(hr_fixed(&[125.0]), vec![0.5]);
        assert_eq!(hr_fixed(&[250.0]), vec![1.0], "clamped above range");
        assert_eq!(hr_fixed(&[10.0]), vec![0.0], "clamped below range");
    }

    #[test]
    fn hr_zoom_examples() {
        let (z, flag) = hr_zoom(&[60.0, 90.0, 120.0]);
        assert_eq!(z, vec![0.0, 0.5, 1.0]);
        assert!(!flag);

        let (z, flag) = hr_zoom(&[60.0; 8]);
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(flag, "constant heart rate flags degeneracy but keeps the segment");

        let ramp: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let (z, _) = hr_zoom(&ramp);
        assert_eq!(z, ramp, "already-normalized input is unchanged");
    }

    proptest! {
        #[test]
        fn hr_fixed_is_monotone(mut values in proptest::collection::vec(0.0f64..400.0, 2..64)) {
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mapped = hr_fixed(&values);
            for w in mapped.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }

        #[test]
        fn interpolation_stays_within_beat_range(
            ibis in proptest::collection::vec(15usize..80, 3..20)
        ) {
            let mut peaks = vec![0usize];
            for ibi in &ibis {
                peaks.push(peaks.last().unwrap() + ibi);
            }
            let beats = beats_to_hr(&peaks, 50.0).unwrap();
            let lo = beats.hr_bpm.iter().cloned().fold(f64::MAX, f64::min);
            let hi = beats.hr_bpm.iter().cloned().fold(f64::MIN, f64::max);
            for v in interpolate_hr(&beats, 1500) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn hr_zoom_preserves_extrema_positions(
            values in proptest::collection::vec(30.0f64..200.0, 4..64)
        ) {
            let spread = values.iter().cloned().fold(f64::MIN, f64::max)
                - values.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-9);
            let argmax = |xs: &[f64]| {
                xs.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            };
            let argmin = |xs: &[f64]| {
                xs.iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            };
            let (z, flag) = hr_zoom(&values);
            prop_assert!(!flag);
            prop_assert_eq!(argmax(&z), argmax(&values));
            prop_assert_eq!(argmin(&z), argmin(&values));
        }
    }
}
