//! Butterworth bandpass filtering of the raw PPG.
//!
//! The front end of the pipeline is a 6th-order Butterworth bandpass IIR
//! filter with edges at 0.5 and 20 Hz, run at the 50 Hz sensor rate. The
//! filter is designed analytically:
//!
//! 1. 3rd-order analog Butterworth lowpass prototype (3 poles on the unit
//!    circle in the s-plane),
//! 2. lowpass→bandpass transform `ŝ = (s² + ω₀²)/(B·s)` with pre-warped
//!    edge frequencies, which doubles the order to 6,
//! 3. bilinear transform of each pole into the z-plane.
//!
//! The result is realized as a cascade of three second-order sections
//! rather than a single 6th-order polynomial; with a 0.5 Hz edge at a 50 Hz
//! sample rate the direct high-order form is numerically ill-conditioned.
//!
//! Filtering is causal single-pass with zero initial state. The bandpass
//! numerator `(z−1)(z+1)` gives exact zeros at DC and Nyquist.

use num_complex::Complex64;
use thiserror::Error;

use crate::segment::SAMPLE_RATE_HZ;

/// Lower passband edge in Hz.
pub const BAND_LOW_HZ: f64 = 0.5;
/// Upper passband edge in Hz.
pub const BAND_HIGH_HZ: f64 = 20.0;
/// Bandpass filter order (pole count of the digital filter).
pub const FILTER_ORDER: usize = 6;

/// One second-order section, denominator normalized to `a0 = 1`:
/// `y[n] = b0·x[n] + b1·x[n−1] + b2·x[n−2] − a1·y[n−1] − a2·y[n−2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Complex frequency response of this section at angular frequency
    /// `theta` (radians/sample).
    pub fn response_at(&self, theta: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -theta);
        let z2 = Complex64::from_polar(1.0, -2.0 * theta);
        let num = Complex64::new(self.b0, 0.0) + z1 * self.b1 + z2 * self.b2;
        let den = Complex64::new(1.0, 0.0) + z1 * self.a1 + z2 * self.a2;
        num / den
    }

    /// Magnitudes of the two poles of this section.
    pub fn pole_magnitudes(&self) -> [f64; 2] {
        // Roots of z² + a1·z + a2.
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let r1 = (Complex64::new(-self.a1, 0.0) + disc) / 2.0;
        let r2 = (Complex64::new(-self.a1, 0.0) - disc) / 2.0;
        [r1.norm(), r2.norm()]
    }
}

/// A designed bandpass filter: cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub sections: Vec<Biquad>,
    pub fs: f64,
}

impl FilterSpec {
    /// |H(f)| evaluated directly from the section coefficients.
    pub fn magnitude_at(&self, freq_hz: f64) -> f64 {
        let theta = 2.0 * std::f64::consts::PI * freq_hz / self.fs;
        self.sections
            .iter()
            .map(|s| s.response_at(theta).norm())
            .product()
    }

    /// True when every pole of every section lies strictly inside the unit
    /// circle.
    pub fn is_stable(&self) -> bool {
        self.sections
            .iter()
            .flat_map(|s| s.pole_magnitudes())
            .all(|m| m < 1.0)
    }
}

/// Errors from applying a filter.
#[derive(Debug, Error)]
pub enum FilterError {
    #[error("input sample {index} is not finite")]
    NonFiniteInput { index: usize },
}

/// Design the 0.5–20 Hz 6th-order Butterworth bandpass at 50 Hz.
pub fn design_bandpass() -> FilterSpec {
    design_bandpass_at(BAND_LOW_HZ, BAND_HIGH_HZ, SAMPLE_RATE_HZ)
}

/// Butterworth bandpass design for arbitrary edges; the digital order is
/// twice the 3-pole analog prototype.
fn design_bandpass_at(f_low: f64, f_high: f64, fs: f64) -> FilterSpec {
    use std::f64::consts::PI;
    assert!(
        0.0 < f_low && f_low < f_high && f_high < fs / 2.0,
        "band edges must satisfy 0 < low < high < Nyquist"
    );
    let n = 3; // analog prototype order
    let k = 2.0 * fs;

    // Pre-warp the edges so the bilinear transform lands them exactly.
    let w1 = k * (PI * f_low / fs).tan();
    let w2 = k * (PI * f_high / fs).tan();
    let bw = w2 - w1;
    let w0_sq = w1 * w2;
    let w0 = w0_sq.sqrt();

    // Analog Butterworth prototype poles: exp(j·π·(2m + n − 1)/(2n)), m = 1..n.
    let prototype: Vec<Complex64> = (1..=n)
        .map(|m| Complex64::from_polar(1.0, PI * (2 * m + n - 1) as f64 / (2 * n) as f64))
        .collect();

    // Lowpass→bandpass: each prototype pole p yields the two roots of
    // s² − p·B·s + ω₀² = 0. Roots of conjugate prototype poles are the
    // conjugates of these, so it suffices to expand poles with Im ≥ 0.
    let bilinear = |s: Complex64| (k + s) / (k - s);
    let mut sections = Vec::with_capacity(n);
    for &p in prototype.iter().filter(|p| p.im >= 0.0) {
        let pb = p * bw;
        let sq = (pb * pb - 4.0 * w0_sq).sqrt();
        let s_a = (pb + sq) / 2.0;
        let s_b = (pb - sq) / 2.0;
        let z_a = bilinear(s_a);
        let z_b = bilinear(s_b);
        if p.im > 0.0 {
            // Complex prototype pole: z_a and z_b each pair with their own
            // conjugate (contributed by the conjugate prototype pole).
            for z in [z_a, z_b] {
                sections.push(Biquad {
                    b0: 1.0,
                    b1: 0.0,
                    b2: -1.0,
                    a1: -2.0 * z.re,
                    a2: z.norm_sqr(),
                });
            }
        } else {
            // Real prototype pole: its two bandpass roots form one section
            // (they are either both real or a conjugate pair).
            sections.push(Biquad {
                b0: 1.0,
                b1: 0.0,
                b2: -1.0,
                a1: -(z_a + z_b).re,
                a2: (z_a * z_b).re,
            });
        }
    }

    // The analog response is exactly 1 at ω₀ and the bilinear transform
    // preserves response values, so normalize at the digital image of ω₀.
    let theta0 = 2.0 * (w0 / k).atan();
    let mut spec = FilterSpec { sections, fs };
    let unnormalized: f64 = spec
        .sections
        .iter()
        .map(|s| s.response_at(theta0).norm())
        .product();
    let per_section_gain = (1.0 / unnormalized).powf(1.0 / spec.sections.len() as f64);
    for s in &mut spec.sections {
        s.b0 *= per_section_gain;
        s.b1 *= per_section_gain;
        s.b2 *= per_section_gain;
    }
    debug_assert!(spec.is_stable());
    spec
}

/// Causal forward-pass cascade filtering with zero initial state.
///
/// Output length equals input length. Non-finite input is rejected.
pub fn apply_filter(spec: &FilterSpec, x: &[f64]) -> Result<Vec<f64>, FilterError> {
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(FilterError::NonFiniteInput { index });
    }
    let mut y = x.to_vec();
    // Direct form II transposed per section.
    for s in &spec.sections {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for v in y.iter_mut() {
            let x_n = *v;
            let y_n = s.b0 * x_n + s1;
            s1 = s.b1 * x_n - s.a1 * y_n + s2;
            s2 = s.b2 * x_n - s.a2 * y_n;
            *v = y_n;
        }
    }
    Ok(y)
}
