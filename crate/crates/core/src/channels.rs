//! Assembly of the normalized multi-channel input matrix.
//!
//! Each accepted segment becomes an `(L, d)` matrix with every entry in
//! [0, 1]. Three channel configurations exist, selected by name on the CLI:
//!
//! | config   | d | channels, in column order                                |
//! |----------|---|----------------------------------------------------------|
//! | `ppg`    | 1 | filtered + min/max-normalized PPG                        |
//! | `hr-acc` | 2 | fixed-range HR, ACC magnitude                            |
//! | `four`   | 4 | normalized PPG, fixed-range HR, zoom HR, ACC magnitude   |
//!
//! Heart-rate extraction runs for every configuration, so a segment is
//! accepted or rejected independently of `d` and ablation runs see the same
//! cohort.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::filter::{apply_filter, design_bandpass, FilterError};
use crate::hr::{compute_hr_channels, HrError};
use crate::segment::{Label, Segment, SegmentError, SAMPLE_RATE_HZ, SEGMENT_LEN};

/// Accelerometer magnitudes are mapped against this daily-activity ceiling,
/// in m/s².
pub const ACC_RANGE_MS2: f64 = 20.0;

const TENSOR_MAGIC: &[u8; 4] = b"PWTN";
const TENSOR_VERSION: u16 = 1;

/// Which channels feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChannelConfig {
    /// Filtered PPG waveform only (d = 1).
    PpgOnly,
    /// Fixed-range heart rate plus ACC magnitude (d = 2).
    HrAcc,
    /// PPG, both heart-rate normalizations, and ACC magnitude (d = 4).
    Four,
}

impl ChannelConfig {
    /// Number of input channels `d`.
    pub fn d(self) -> usize {
        match self {
            ChannelConfig::PpgOnly => 1,
            ChannelConfig::HrAcc => 2,
            ChannelConfig::Four => 4,
        }
    }

    /// CLI name of this configuration.
    pub fn name(self) -> &'static str {
        match self {
            ChannelConfig::PpgOnly => "ppg",
            ChannelConfig::HrAcc => "hr-acc",
            ChannelConfig::Four => "four",
        }
    }

    /// Parse a CLI name.
    pub fn from_name(name: &str) -> Option<ChannelConfig> {
        match name {
            "ppg" => Some(ChannelConfig::PpgOnly),
            "hr-acc" => Some(ChannelConfig::HrAcc),
            "four" => Some(ChannelConfig::Four),
            _ => None,
        }
    }
}

/// The `(L, d)` normalized input matrix for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    /// Row-major `(SEGMENT_LEN, d)` matrix, all entries in [0, 1].
    pub data: Array2<f64>,
    /// The filtered PPG was constant; its normalized channel is all zeros.
    pub ppg_degenerate: bool,
    /// The heart rate was constant; the zoom channel is all zeros.
    pub hr_zoom_degenerate: bool,
}

/// Why a segment could not be converted into a [`ChannelStack`].
#[derive(Debug, Error)]
pub enum PrepError {
    #[error("invalid segment: {0}")]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("segment rejected: {0}")]
    Rejected(#[from] HrError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Errors from individual channel computations.
#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("accelerometer axes have mismatched lengths ({x}, {y}, {z})")]
    AccLengthMismatch { x: usize, y: usize, z: usize },
}

/// Min/max normalization onto [0, 1].
///
/// `y = (x − min) / (max − min)`. A constant input is degenerate: the
/// output is all zeros and the returned flag is set.
pub fn normalize_unit(x: &[f64]) -> (Vec<f64>, bool) {
    debug_assert!(x.iter().all(|v| v.is_finite()));
    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if x.is_empty() || range == 0.0 {
        return (vec![0.0; x.len()], true);
    }
    (x.iter().map(|&v| (v - min) / range).collect(), false)
}

/// Accelerometer magnitude channel: `clamp(√(x²+y²+z²) / 20, 0, 1)`.
///
/// Magnitudes above the 20 m/s² daily-activity ceiling clamp rather than
/// rescale, preserving the fixed-range semantics.
pub fn acc_channel(acc: &[Vec<f64>; 3]) -> Result<Vec<f64>, ChannelError> {
    let (x, y, z) = (&acc[0], &acc[1], &acc[2]);
    if x.len() != y.len() || x.len() != z.len() {
        return Err(ChannelError::AccLengthMismatch {
            x: x.len(),
            y: y.len(),
            z: z.len(),
        });
    }
    Ok((0..x.len())
        .map(|i| {
            let m = (x[i] * x[i] + y[i] * y[i] + z[i] * z[i]).sqrt();
            (m / ACC_RANGE_MS2).clamp(0.0, 1.0)
        })
        .collect())
}

/// Run the full preparation pipeline for one segment.
///
/// Filtering, heart-rate extraction, and normalization happen for every
/// configuration; a segment whose heart rate cannot be extracted is
/// rejected regardless of `d`.
pub fn assemble_channels(seg: &Segment, config: ChannelConfig) -> Result<ChannelStack, PrepError> {
    seg.validate()?;
    let spec = design_bandpass();
    let filtered = apply_filter(&spec, &seg.ppg)?;
    let hr = compute_hr_channels(&filtered, SAMPLE_RATE_HZ)?;
    let (ppg_norm, ppg_degenerate) = normalize_unit(&filtered);
    let acc = acc_channel(&seg.acc)?;

    let columns: Vec<&[f64]> = match config {
        ChannelConfig::PpgOnly => vec![&ppg_norm],
        ChannelConfig::HrAcc => vec![&hr.hr_fixed, &acc],
        ChannelConfig::Four => vec![&ppg_norm, &hr.hr_fixed, &hr.hr_zoom, &acc],
    };
    let d = columns.len();
    let mut data = Array2::zeros((SEGMENT_LEN, d));
    for (c, col) in columns.into_iter().enumerate() {
        for (t, &v) in col.iter().enumerate() {
            data[(t, c)] = v;
        }
    }
    Ok(ChannelStack {
        data,
        ppg_degenerate,
        hr_zoom_degenerate: hr.zoom_degenerate,
    })
}

/// Serialize a channel stack to `.pwten` bytes.
///
/// Layout (little-endian): magic `"PWTN"`, version `u16` = 1, label `u8`,
/// subject-id length `u8` + UTF-8 bytes, flags `u8`
/// (bit 0: ppg degenerate, bit 1: hr-zoom degenerate), rows `u32`,
/// cols `u16`, then row-major `f32` data.
pub fn tensor_bytes(
    stack: &ChannelStack,
    subject_id: &str,
    label: Label,
) -> Result<Vec<u8>, SegmentError> {
    if subject_id.len() > u8::MAX as usize {
        return Err(SegmentError::SubjectIdTooLong(subject_id.len()));
    }
    let (rows, cols) = stack.data.dim();
    let mut out = Vec::with_capacity(16 + subject_id.len() + rows * cols * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(label as u8);
    out.push(subject_id.len() as u8);
    out.extend_from_slice(subject_id.as_bytes());
    let flags = stack.ppg_degenerate as u8 | (stack.hr_zoom_degenerate as u8) << 1;
    out.push(flags);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u16).to_le_bytes());
    for &v in stack.data.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Write a channel stack as a `.pwten` file.
pub fn write_tensor(
    stack: &ChannelStack,
    subject_id: &str,
    label: Label,
    path: &Path,
) -> Result<(), SegmentError> {
    let bytes = tensor_bytes(stack, subject_id, label)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a `.pwten` file back into a stack plus its metadata.
pub fn read_tensor(path: &Path) -> Result<(ChannelStack, String, Label), SegmentError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], SegmentError> {
        if *pos + n > bytes.len() {
            return Err(SegmentError::Truncated);
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != TENSOR_MAGIC {
        return Err(SegmentError::BadMagic);
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(SegmentError::BadVersion(version));
    }
    let label = Label::try_from(take(&mut pos, 1)?[0])?;
    let id_len = take(&mut pos, 1)?[0] as usize;
    let subject_id = String::from_utf8(take(&mut pos, id_len)?.to_vec())
        .map_err(|_| SegmentError::BadSidecar("subject id is not UTF-8".into()))?;
    let flags = take(&mut pos, 1)?[0];
    let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cols = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let mut data = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let raw = take(&mut pos, 4)?;
            data[(r, c)] = f32::from_le_bytes(raw.try_into().unwrap()) as f64;
        }
    }
    Ok((
        ChannelStack {
            data,
            ppg_degenerate: flags & 1 != 0,
            hr_zoom_degenerate: flags & 2 != 0,
        },
        subject_id,
        label,
    ))
}
