//! Synthetic rhythm cohort generator — the desk-scale verification oracle.
//!
//! The generator is an oracle, not a physiological simulator: every
//! constant below (premature/compensatory IBI factors, pulse template
//! shapes) is fixed to make the class structure unambiguous, so that a
//! failure downstream indicts the pipeline or model code rather than the
//! data. Ground-truth beat times and per-beat heart rates are retained for
//! every generated segment and emitted in the cohort manifest.
//!
//! Rhythm phenomenology encoded here:
//!
//! * NSR — near-constant inter-beat intervals (Gaussian jitter, small CV);
//! * AF — i.i.d. log-normal IBIs with large CV and no serial structure;
//! * PAC/PVC — an NSR base train where a beat is occasionally replaced by a
//!   premature beat at 0.6× the base IBI (rendered at 0.6× amplitude)
//!   followed by a compensatory pause at 1.4× the base IBI.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, stream, RNG_ALGORITHM};
use crate::segment::{Label, Segment, SAMPLE_RATE_HZ, SEGMENT_LEN};

/// Segment duration in seconds.
pub const SEGMENT_DURATION_S: f64 = 30.0;
/// Premature beats arrive at this fraction of the base IBI.
pub const PREMATURE_IBI_FACTOR: f64 = 0.6;
/// The compensatory pause following a premature beat, as a fraction of the
/// base IBI.
pub const COMPENSATORY_IBI_FACTOR: f64 = 1.4;
/// Premature beats are rendered at this fraction of the pulse amplitude.
pub const PREMATURE_AMPLITUDE_FACTOR: f64 = 0.6;
/// IBIs are floored here (redraw below) so genuine beats always clear the
/// detector's 220 BPM refractory distance.
const MIN_IBI_S: f64 = 0.32;

/// Parameters of one synthetic subject's rhythm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhythmProfile {
    pub rhythm: Label,
    /// Mean heart rate in BPM.
    pub base_hr: f64,
    /// Coefficient of variation of the inter-beat intervals.
    pub hr_jitter_cv: f64,
    /// Per-beat probability of a premature beat (PAC/PVC only).
    pub premature_rate: f64,
    /// AF running above 100 BPM (rapid ventricular response).
    pub rvr: bool,
    /// Motion-artifact severity in [0, 1].
    pub motion_level: f64,
}

impl RhythmProfile {
    pub fn nsr(base_hr: f64, cv: f64, motion_level: f64) -> Self {
        let p = Self {
            rhythm: Label::Nsr,
            base_hr,
            hr_jitter_cv: cv,
            premature_rate: 0.0,
            rvr: false,
            motion_level,
        };
        p.validate().expect("valid NSR profile");
        p
    }

    pub fn af(base_hr: f64, cv: f64, motion_level: f64) -> Self {
        let p = Self {
            rhythm: Label::Af,
            base_hr,
            hr_jitter_cv: cv,
            premature_rate: 0.0,
            rvr: base_hr > 100.0,
            motion_level,
        };
        p.validate().expect("valid AF profile");
        p
    }

    pub fn pac_pvc(base_hr: f64, cv: f64, premature_rate: f64, motion_level: f64) -> Self {
        let p = Self {
            rhythm: Label::PacPvc,
            base_hr,
            hr_jitter_cv: cv,
            premature_rate,
            rvr: false,
            motion_level,
        };
        p.validate().expect("valid PAC/PVC profile");
        p
    }

    /// Check the per-rhythm parameter constraints.
    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = (40.0..=180.0).contains(&self.base_hr)
            && (0.0..=1.0).contains(&self.motion_level)
            && match self.rhythm {
                Label::Nsr => self.hr_jitter_cv <= 0.05,
                Label::Af => self.hr_jitter_cv >= 0.15,
                Label::PacPvc => {
                    self.hr_jitter_cv <= 0.05 && (0.05..=0.3).contains(&self.premature_rate)
                }
            };
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidProfile(*self))
        }
    }
}

/// Ground-truth beat train for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatTrain {
    /// Beat times in seconds, strictly increasing within [0, 30).
    pub times: Vec<f64>,
    /// Marks beats that arrived prematurely.
    pub premature: Vec<bool>,
}

impl BeatTrain {
    /// Inter-beat intervals in seconds.
    pub fn ibis(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Per-beat heart rates: `(interval midpoint in seconds, BPM)`.
    pub fn beat_hr(&self) -> Vec<(f64, f64)> {
        self.times
            .windows(2)
            .map(|w| ((w[0] + w[1]) / 2.0, 60.0 / (w[1] - w[0])))
            .collect()
    }

    /// Instantaneous heart rate at time `t`: the rate of the interval
    /// containing `t`, or `None` outside the first/last beat.
    pub fn instantaneous_hr(&self, t: f64) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let idx = self.times.partition_point(|&b| b <= t);
        if idx == 0 || idx >= self.times.len() {
            return None;
        }
        Some(60.0 / (self.times[idx] - self.times[idx - 1]))
    }
}

/// Ground truth retained for each generated segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTruth {
    pub train: BeatTrain,
    /// Sample window `[start, end)` of the injected motion burst, if any.
    pub motion_window: Option<(usize, usize)>,
}

/// Errors from synthetic generation.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error("profile violates its rhythm constraints: {0:?}")]
    InvalidProfile(RhythmProfile),
    #[error("need at least 6 subjects (2 per rhythm class), requested {0}")]
    TooFewSubjects(usize),
    #[error("class mix must be positive and sum to 1, got {0:?}")]
    BadClassMix([f64; 3]),
}

/// Generate the ground-truth beat train for one segment.
pub fn gen_beat_train(profile: &RhythmProfile, duration_s: f64, rng: &mut ChaCha8Rng) -> BeatTrain {
    let mean_ibi = 60.0 / profile.base_hr;

    // Base-IBI draw per rhythm, floored at MIN_IBI_S by redrawing.
    let draw_base = {
        let normal = Normal::new(mean_ibi, profile.hr_jitter_cv * mean_ibi).expect("valid normal");
        let lognormal = {
            let cv2 = profile.hr_jitter_cv * profile.hr_jitter_cv;
            let sigma_sq = (1.0 + cv2).ln();
            LogNormal::new(mean_ibi.ln() - sigma_sq / 2.0, sigma_sq.sqrt()).expect("valid lognormal")
        };
        let rhythm = profile.rhythm;
        move |rng: &mut ChaCha8Rng| loop {
            let ibi = match rhythm {
                Label::Af => lognormal.sample(rng),
                _ => normal.sample(rng),
            };
            if ibi >= MIN_IBI_S {
                return ibi;
            }
        }
    };

    let mut times = Vec::new();
    let mut premature = Vec::new();
    let first = draw_base(rng);
    let mut t = 0.5 * first;
    times.push(t);
    premature.push(false);

    loop {
        let base = draw_base(rng);
        let is_premature =
            profile.rhythm == Label::PacPvc && rng.random::<f64>() < profile.premature_rate;
        if is_premature {
            let t_early = t + PREMATURE_IBI_FACTOR * base;
            if t_early >= duration_s {
                break;
            }
            times.push(t_early);
            premature.push(true);
            let t_pause = t_early + COMPENSATORY_IBI_FACTOR * base;
            if t_pause >= duration_s {
                break;
            }
            times.push(t_pause);
            premature.push(false);
            t = t_pause;
        } else {
            let t_next = t + base;
            if t_next >= duration_s {
                break;
            }
            times.push(t_next);
            premature.push(false);
            t = t_next;
        }
    }
    BeatTrain { times, premature }
}

/// Waveform rendering parameters. Every term scales with `amplitude`, so
/// rescaling the template leaves min/max-normalized channels unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpgRender {
    /// Peak amplitude of a normal systolic pulse, in sensor units.
    pub amplitude: f64,
    /// Standard deviation of the primary Gaussian bump, seconds.
    pub pulse_width_s: f64,
    /// Dicrotic bump amplitude relative to the primary bump.
    pub dicrotic_amp: f64,
    /// Dicrotic bump delay after the systolic peak, seconds. Kept below the
    /// detector's refractory distance so the bump can never register as a
    /// beat.
    pub dicrotic_delay_s: f64,
    /// Standard deviation of the dicrotic bump, seconds.
    pub dicrotic_width_s: f64,
    /// Constant baseline offset relative to `amplitude`; keeps the rendered
    /// waveform strictly positive.
    pub baseline_offset: f64,
    /// Amplitude of the 0.2 Hz baseline wander relative to `amplitude`.
    pub wander_amp: f64,
    /// White-noise standard deviation relative to `amplitude` (≈ 23 dB SNR
    /// at the default).
    pub noise_amp: f64,
}

impl Default for PpgRender {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            pulse_width_s: 0.06,
            dicrotic_amp: 0.25,
            dicrotic_delay_s: 0.22,
            dicrotic_width_s: 0.08,
            baseline_offset: 0.5,
            wander_amp: 0.10,
            noise_amp: 0.02,
        }
    }
}

/// Frequency of the baseline wander, Hz. Below the 0.5 Hz passband edge,
/// so filtering removes most of it.
const WANDER_HZ: f64 = 0.2;

/// Render a beat train into a 1,500-sample PPG waveform.
pub fn render_ppg(train: &BeatTrain, cfg: &PpgRender, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE_HZ;
    let mut y = vec![cfg.baseline_offset * cfg.amplitude; SEGMENT_LEN];

    let add_bump = |y: &mut [f64], center_s: f64, amp: f64, sigma_s: f64| {
        let center = center_s * fs;
        let sigma = sigma_s * fs;
        let lo = ((center - 4.0 * sigma).floor().max(0.0)) as usize;
        let hi = ((center + 4.0 * sigma).ceil() as usize).min(SEGMENT_LEN - 1);
        for t in lo..=hi {
            let d = t as f64 - center;
            y[t] += amp * (-d * d / (2.0 * sigma * sigma)).exp();
        }
    };

    for (i, &t_beat) in train.times.iter().enumerate() {
        let scale = if train.premature[i] {
            PREMATURE_AMPLITUDE_FACTOR
        } else {
            1.0
        };
        let amp = cfg.amplitude * scale;
        add_bump(&mut y, t_beat, amp, cfg.pulse_width_s);
        add_bump(
            &mut y,
            t_beat + cfg.dicrotic_delay_s,
            amp * cfg.dicrotic_amp,
            cfg.dicrotic_width_s,
        );
    }

    // Draw order is fixed: wander phase, then one noise sample per index.
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    if cfg.wander_amp != 0.0 {
        for (t, v) in y.iter_mut().enumerate() {
            let time = t as f64 / fs;
            *v += cfg.wander_amp
                * cfg.amplitude
                * (std::f64::consts::TAU * WANDER_HZ * time + phase).sin();
        }
    }
    let noise = Normal::new(0.0, 1.0).unwrap();
    if cfg.noise_amp != 0.0 {
        for v in y.iter_mut() {
            *v += cfg.noise_amp * cfg.amplitude * noise.sample(rng);
        }
    }
    y
}

/// Render tri-axial accelerometer traces.
///
/// At `motion_level` 0 the output is a gravity-like offset plus small
/// sensor noise. A positive level injects one band-limited burst of at most
/// 5 seconds whose peak magnitude reaches `20 · motion_level` m/s²; the
/// burst window is returned so the PPG can be corrupted in the same place.
pub fn render_acc(
    motion_level: f64,
    rng: &mut ChaCha8Rng,
) -> ([Vec<f64>; 3], Option<(usize, usize)>) {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let base_sigma = 0.05;
    let mut acc = [
        vec![0.0; SEGMENT_LEN],
        vec![0.0; SEGMENT_LEN],
        vec![9.81; SEGMENT_LEN],
    ];
    for axis in acc.iter_mut() {
        for v in axis.iter_mut() {
            *v += base_sigma * noise.sample(rng);
        }
    }
    if motion_level <= 0.0 {
        return (acc, None);
    }

    let level = motion_level.min(1.0);
    let burst_len = ((level * 5.0 * SAMPLE_RATE_HZ).round() as usize).clamp(25, SEGMENT_LEN);
    let start = rng.random_range(0..=SEGMENT_LEN - burst_len);
    let window = (start, start + burst_len);

    // Band-limited burst: one-pole smoothed white noise under a Hann
    // envelope, rescaled so the peak magnitude is exactly 20·level.
    let mut burst = [vec![0.0; burst_len], vec![0.0; burst_len], vec![0.0; burst_len]];
    for axis in burst.iter_mut() {
        let mut state = 0.0;
        for (i, v) in axis.iter_mut().enumerate() {
            state = 0.7 * state + 0.3 * noise.sample(rng);
            let env = hann(i, burst_len);
            *v = state * env;
        }
    }
    let peak_mag = (0..burst_len)
        .map(|i| {
            (burst[0][i] * burst[0][i] + burst[1][i] * burst[1][i] + burst[2][i] * burst[2][i])
                .sqrt()
        })
        .fold(0.0, f64::max);
    if peak_mag > 0.0 {
        let scale = 20.0 * level / peak_mag;
        for (axis, b) in acc.iter_mut().zip(burst.iter()) {
            for (i, &v) in b.iter().enumerate() {
                axis[start + i] += scale * v;
            }
        }
    }
    (acc, Some(window))
}

fn hann(i: usize, n: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    let x = std::f64::consts::PI * i as f64 / (n - 1) as f64;
    x.sin() * x.sin()
}

/// Additive PPG corruption applied inside the motion window, relative to
/// the PPG amplitude.
const PPG_MOTION_SCALE: f64 = 0.8;

/// Generate one complete segment with its ground truth.
///
/// Deterministic in `seed`; samples are quantized to `f32` precision so
/// in-memory segments match their on-disk representation exactly.
pub fn gen_segment(
    subject_id: &str,
    profile: &RhythmProfile,
    render: &PpgRender,
    seed: u64,
) -> (Segment, SegmentTruth) {
    let mut rng = stream(seed, "segment-render", 0);
    let train = gen_beat_train(profile, SEGMENT_DURATION_S, &mut rng);
    let mut ppg = render_ppg(&train, render, &mut rng);
    let (acc, motion_window) = render_acc(profile.motion_level, &mut rng);
    if let Some((start, end)) = motion_window {
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut state = 0.0;
        for (i, v) in ppg[start..end].iter_mut().enumerate() {
            state = 0.7 * state + 0.3 * noise.sample(&mut rng);
            *v += PPG_MOTION_SCALE
                * render.amplitude
                * profile.motion_level.min(1.0)
                * hann(i, end - start)
                * state;
        }
    }

    let quantize = |xs: Vec<f64>| -> Vec<f64> { xs.into_iter().map(|v| v as f32 as f64).collect() };
    let segment = Segment {
        subject_id: subject_id.to_string(),
        label: profile.rhythm,
        ppg: quantize(ppg),
        acc: acc.map(quantize),
    };
    (
        segment,
        SegmentTruth {
            train,
            motion_window,
        },
    )
}

/// Cohort generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_subjects: usize,
    /// Mean segments per subject; actual per-subject counts vary so the
    /// within-fold 80/10/10 subject-granular split has room to balance.
    pub segments_per_subject: usize,
    /// Target per-class segment shares (NSR, AF, PAC/PVC).
    pub class_mix: [f64; 3],
    /// Upper bound on per-subject motion severity; 0 disables motion.
    pub motion_level: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 24,
            segments_per_subject: 100,
            class_mix: [0.68, 0.21, 0.11],
            motion_level: 0.0,
            seed: 7,
        }
    }
}

/// One synthetic subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSubject {
    pub id: String,
    pub profile: RhythmProfile,
    pub n_segments: usize,
    pub seed: u64,
}

/// A generated segment with its ground truth.
#[derive(Debug, Clone)]
pub struct CohortSegment {
    pub segment: Segment,
    pub truth: SegmentTruth,
    pub seed: u64,
}

/// A complete synthetic cohort.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub config: CohortConfig,
    pub render: PpgRender,
    pub subjects: Vec<SyntheticSubject>,
    pub segments: Vec<CohortSegment>,
}

/// Subject-allocation weights per class. More PAC/PVC subjects than AF
/// keeps at least two PAC/PVC subjects in every training split, which is
/// where class identity is hardest to learn.
const SUBJECT_WEIGHTS: [f64; 3] = [5.0, 3.0, 4.0];

/// Generate a deterministic cohort.
pub fn gen_cohort(config: &CohortConfig) -> Result<Cohort, SynthError> {
    gen_cohort_with(config, &PpgRender::default())
}

/// Cohort generation with explicit rendering parameters.
pub fn gen_cohort_with(config: &CohortConfig, render: &PpgRender) -> Result<Cohort, SynthError> {
    if config.n_subjects < 6 {
        return Err(SynthError::TooFewSubjects(config.n_subjects));
    }
    let mix_sum: f64 = config.class_mix.iter().sum();
    if config.class_mix.iter().any(|&m| m <= 0.0) || (mix_sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::BadClassMix(config.class_mix));
    }

    let subjects_per_class = apportion_subjects(config.n_subjects);
    let total_segments = config.n_subjects * config.segments_per_subject;
    let class_totals = largest_remainder(total_segments, &config.class_mix);

    let mut cohort_rng = stream(config.seed, "cohort", 0);
    let mut subjects = Vec::with_capacity(config.n_subjects);
    let mut global_idx = 0u64;
    for (class_idx, &n_class) in subjects_per_class.iter().enumerate() {
        let label = Label::from_index(class_idx).unwrap();
        let counts = spread_counts(class_totals[class_idx], n_class, &mut cohort_rng);
        for count in counts {
            global_idx += 1;
            let motion = if config.motion_level > 0.0 {
                cohort_rng.random_range(0.0..=config.motion_level)
            } else {
                0.0
            };
            let profile = match label {
                Label::Nsr => RhythmProfile::nsr(
                    cohort_rng.random_range(52.0..95.0),
                    cohort_rng.random_range(0.01..0.04),
                    motion,
                ),
                Label::Af => RhythmProfile::af(
                    cohort_rng.random_range(70.0..130.0),
                    cohort_rng.random_range(0.20..0.32),
                    motion,
                ),
                Label::PacPvc => RhythmProfile::pac_pvc(
                    cohort_rng.random_range(55.0..90.0),
                    cohort_rng.random_range(0.015..0.04),
                    cohort_rng.random_range(0.10..0.25),
                    motion,
                ),
            };
            subjects.push(SyntheticSubject {
                id: format!("s{global_idx:03}"),
                profile,
                n_segments: count,
                seed: derive_seed(config.seed, "subject", global_idx),
            });
        }
    }

    let mut segments = Vec::with_capacity(total_segments);
    for subject in &subjects {
        for k in 0..subject.n_segments {
            let seed = derive_seed(subject.seed, "segment", k as u64);
            let (segment, truth) = gen_segment(&subject.id, &subject.profile, render, seed);
            segments.push(CohortSegment {
                segment,
                truth,
                seed,
            });
        }
    }

    Ok(Cohort {
        config: *config,
        render: *render,
        subjects,
        segments,
    })
}

/// Allocate subjects to classes: largest-remainder apportionment by
/// [`SUBJECT_WEIGHTS`], a floor of 2 per class, and (for even cohorts)
/// per-class counts adjusted to even numbers so the two folds can hold the
/// same number of subjects per class.
fn apportion_subjects(n: usize) -> [usize; 3] {
    let weight_sum: f64 = SUBJECT_WEIGHTS.iter().sum();
    let shares: [f64; 3] = std::array::from_fn(|i| SUBJECT_WEIGHTS[i] / weight_sum);
    let mut counts = largest_remainder(n, &shares);

    // Floor of two subjects per class, stolen from the largest class.
    for i in 0..3 {
        while counts[i] < 2 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }

    if n % 2 == 0 {
        // An even total leaves an even number of odd classes; pair them up,
        // moving one subject from the larger to the smaller.
        loop {
            let odds: Vec<usize> = (0..3).filter(|&i| counts[i] % 2 == 1).collect();
            if odds.is_empty() {
                break;
            }
            let (a, b) = (odds[0], odds[1]);
            if counts[a] >= counts[b] {
                counts[a] -= 1;
                counts[b] += 1;
            } else {
                counts[b] -= 1;
                counts[a] += 1;
            }
        }
    }
    counts
}

/// Largest-remainder rounding of `total · share` per class.
fn largest_remainder(total: usize, shares: &[f64; 3]) -> [usize; 3] {
    let exact: [f64; 3] = std::array::from_fn(|i| total as f64 * shares[i]);
    let mut counts: [usize; 3] = std::array::from_fn(|i| exact[i].floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % 3]] += 1;
    }
    counts
}

/// Distribute a class's segment total over its subjects with ±30%
/// variation, summing exactly.
fn spread_counts(total: usize, n_subjects: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n_subjects == 0 {
        return Vec::new();
    }
    let weights: Vec<f64> = (0..n_subjects).map(|_| rng.random_range(0.7..1.3)).collect();
    let weight_sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights
        .iter()
        .map(|w| total as f64 * w / weight_sum)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for i in 0..total - assigned {
        counts[order[i % n_subjects]] += 1;
    }
    // Keep every subject non-trivial where the class total allows it.
    let floor = (total / n_subjects).min(4);
    for i in 0..n_subjects {
        while counts[i] < floor {
            let donor = (0..n_subjects).max_by_key(|&j| counts[j]).unwrap();
            if counts[donor] <= counts[i] + 1 {
                break;
            }
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

#[derive(Serialize)]
struct ManifestSegment<'a> {
    subject_id: &'a str,
    index: usize,
    label: u8,
    seed: u64,
    beat_times: &'a [f64],
    premature_beats: Vec<usize>,
    motion_window: Option<(usize, usize)>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    rng: &'static str,
    config: &'a CohortConfig,
    render: &'a PpgRender,
    subjects: &'a [SyntheticSubject],
    segments: Vec<ManifestSegment<'a>>,
}

impl Cohort {
    /// Deterministic JSON manifest: profiles, seeds, and ground-truth beat
    /// times for every segment.
    pub fn manifest_json(&self) -> String {
        let mut per_subject_index: std::collections::BTreeMap<&str, usize> = Default::default();
        let segments = self
            .segments
            .iter()
            .map(|cs| {
                let idx = per_subject_index
                    .entry(cs.segment.subject_id.as_str())
                    .or_insert(0);
                let current = *idx;
                *idx += 1;
                ManifestSegment {
                    subject_id: &cs.segment.subject_id,
                    index: current,
                    label: cs.segment.label as u8,
                    seed: cs.seed,
                    beat_times: &cs.truth.train.times,
                    premature_beats: cs
                        .truth
                        .train
                        .premature
                        .iter()
                        .enumerate()
                        .filter_map(|(i, &p)| p.then_some(i))
                        .collect(),
                    motion_window: cs.truth.motion_window,
                }
            })
            .collect();
        let manifest = Manifest {
            schema_version: 1,
            rng: RNG_ALGORITHM,
            config: &self.config,
            render: &self.render,
            subjects: &self.subjects,
            segments,
        };
        serde_json::to_string_pretty(&manifest).expect("manifest serializes")
    }
}
