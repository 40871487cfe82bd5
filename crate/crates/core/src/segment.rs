//! 30-second recording segments and their on-disk formats.
//!
//! A [`Segment`] is the unit of everything downstream: 1,500 samples of raw
//! PPG plus tri-axial accelerometer data recorded at 50 Hz, tagged with a
//! subject id and an adjudicated rhythm label.
//!
//! Two interchangeable file formats are supported:
//!
//! * `.pwseg` — a compact little-endian binary container (see
//!   [`write_pwseg`] for the exact layout),
//! * CSV (`t,ppg,acc_x,acc_y,acc_z`) with a JSON sidecar carrying
//!   `{subject_id, label}`.
//!
//! Samples are stored as `f32` in both formats; the two round-trip
//! bit-exactly at `f32` precision.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples per segment: 30 s at 50 Hz.
pub const SEGMENT_LEN: usize = 1500;

/// Fixed sampling rate of the smartwatch recordings, in Hz.
pub const SAMPLE_RATE_HZ: f64 = 50.0;

const PWSEG_MAGIC: &[u8; 4] = b"PWSG";
const PWSEG_VERSION: u16 = 1;

/// Rhythm class of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    /// Normal sinus rhythm.
    Nsr = 0,
    /// Atrial fibrillation.
    Af = 1,
    /// Premature atrial/ventricular contraction.
    PacPvc = 2,
}

impl Label {
    /// All labels in class-index order.
    pub const ALL: [Label; 3] = [Label::Nsr, Label::Af, Label::PacPvc];

    /// Class index in `0..3`.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Human-readable rhythm name as used in report tables.
    pub fn name(self) -> &'static str {
        match self {
            Label::Nsr => "NSR",
            Label::Af => "AF",
            Label::PacPvc => "PAC/PVC",
        }
    }

    /// Parse a class index.
    pub fn from_index(idx: usize) -> Option<Label> {
        match idx {
            0 => Some(Label::Nsr),
            1 => Some(Label::Af),
            2 => Some(Label::PacPvc),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<u8> for Label {
    type Error = SegmentError;

    fn try_from(value: u8) -> Result<Self, SegmentError> {
        Label::from_index(value as usize).ok_or(SegmentError::BadLabel(value))
    }
}

/// One 30-second recording unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub subject_id: String,
    pub label: Label,
    /// Raw PPG in arbitrary sensor units, length [`SEGMENT_LEN`].
    pub ppg: Vec<f64>,
    /// Tri-axial accelerometer in m/s², each length [`SEGMENT_LEN`].
    pub acc: [Vec<f64>; 3],
}

impl Segment {
    /// Check the structural invariants: fixed length, finite samples.
    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.ppg.len() != SEGMENT_LEN {
            return Err(SegmentError::BadLength {
                channel: "ppg",
                len: self.ppg.len(),
            });
        }
        for (name, axis) in ["acc_x", "acc_y", "acc_z"].iter().zip(self.acc.iter()) {
            if axis.len() != SEGMENT_LEN {
                return Err(SegmentError::BadLength {
                    channel: name,
                    len: axis.len(),
                });
            }
        }
        let finite = self.ppg.iter().all(|v| v.is_finite())
            && self.acc.iter().all(|a| a.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(SegmentError::NonFinite);
        }
        if self.subject_id.len() > u8::MAX as usize {
            return Err(SegmentError::SubjectIdTooLong(self.subject_id.len()));
        }
        Ok(())
    }
}

/// Errors from segment validation and file IO.
#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("channel {channel} has length {len}, expected {SEGMENT_LEN}")]
    BadLength { channel: &'static str, len: usize },
    #[error("segment contains non-finite samples")]
    NonFinite,
    #[error("label byte {0} is not in {{0, 1, 2}}")]
    BadLabel(u8),
    #[error("subject id of {0} bytes exceeds the 255-byte format limit")]
    SubjectIdTooLong(usize),
    #[error("not a .pwseg file (bad magic)")]
    BadMagic,
    #[error("unsupported .pwseg version {0}")]
    BadVersion(u16),
    #[error("file declares sample rate {0} Hz, expected 50")]
    BadSampleRate(u16),
    #[error("file declares segment length {0}, expected {SEGMENT_LEN}")]
    BadFileLength(u32),
    #[error("truncated file")]
    Truncated,
    #[error("malformed CSV at line {line}: {reason}")]
    BadCsv { line: usize, reason: String },
    #[error("malformed sidecar JSON: {0}")]
    BadSidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serialize a segment to `.pwseg` bytes.
///
/// Layout (all little-endian):
/// magic `"PWSG"` (4 bytes), version `u16` = 1, label `u8`,
/// subject-id length `u8` + UTF-8 bytes, fs `u16` = 50, length `u32` = 1500,
/// then four `f32` arrays (ppg, acc_x, acc_y, acc_z), each 1500×4 bytes.
pub fn pwseg_bytes(seg: &Segment) -> Result<Vec<u8>, SegmentError> {
    seg.validate()?;
    let id = seg.subject_id.as_bytes();
    let mut out = Vec::with_capacity(13 + id.len() + 4 * SEGMENT_LEN * 4);
    out.extend_from_slice(PWSEG_MAGIC);
    out.extend_from_slice(&PWSEG_VERSION.to_le_bytes());
    out.push(seg.label as u8);
    out.push(id.len() as u8);
    out.extend_from_slice(id);
    out.extend_from_slice(&(SAMPLE_RATE_HZ as u16).to_le_bytes());
    out.extend_from_slice(&(SEGMENT_LEN as u32).to_le_bytes());
    for channel in [&seg.ppg, &seg.acc[0], &seg.acc[1], &seg.acc[2]] {
        for &v in channel.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Write a segment as a `.pwseg` file.
pub fn write_pwseg(seg: &Segment, path: &Path) -> Result<(), SegmentError> {
    let bytes = pwseg_bytes(seg)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parse `.pwseg` bytes.
pub fn pwseg_from_bytes(bytes: &[u8]) -> Result<Segment, SegmentError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != PWSEG_MAGIC {
        return Err(SegmentError::BadMagic);
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != PWSEG_VERSION {
        return Err(SegmentError::BadVersion(version));
    }
    let label = Label::try_from(cur.take(1)?[0])?;
    let id_len = cur.take(1)?[0] as usize;
    let subject_id = String::from_utf8(cur.take(id_len)?.to_vec())
        .map_err(|_| SegmentError::BadSidecar("subject id is not UTF-8".into()))?;
    let fs_hz = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if fs_hz != SAMPLE_RATE_HZ as u16 {
        return Err(SegmentError::BadSampleRate(fs_hz));
    }
    let len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if len as usize != SEGMENT_LEN {
        return Err(SegmentError::BadFileLength(len));
    }
    let mut channels = Vec::with_capacity(4);
    for _ in 0..4 {
        let mut channel = Vec::with_capacity(SEGMENT_LEN);
        for _ in 0..SEGMENT_LEN {
            let raw = cur.take(4)?;
            channel.push(f32::from_le_bytes(raw.try_into().unwrap()) as f64);
        }
        channels.push(channel);
    }
    let acc_z = channels.pop().unwrap();
    let acc_y = channels.pop().unwrap();
    let acc_x = channels.pop().unwrap();
    let ppg = channels.pop().unwrap();
    let seg = Segment {
        subject_id,
        label,
        ppg,
        acc: [acc_x, acc_y, acc_z],
    };
    seg.validate()?;
    Ok(seg)
}

/// Read a `.pwseg` file.
pub fn read_pwseg(path: &Path) -> Result<Segment, SegmentError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    pwseg_from_bytes(&bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    subject_id: String,
    label: u8,
}

/// Write a segment as CSV plus a JSON sidecar.
///
/// Columns are `t,ppg,acc_x,acc_y,acc_z` with `t` in seconds. Sample values
/// are written with shortest-round-trip formatting at `f32` precision, so a
/// CSV/pwseg round trip is bit-exact.
pub fn write_csv(seg: &Segment, csv_path: &Path, sidecar_path: &Path) -> Result<(), SegmentError> {
    seg.validate()?;
    let mut out = String::with_capacity(SEGMENT_LEN * 40);
    out.push_str("t,ppg,acc_x,acc_y,acc_z\n");
    for i in 0..SEGMENT_LEN {
        let t = i as f64 / SAMPLE_RATE_HZ;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t,
            seg.ppg[i] as f32,
            seg.acc[0][i] as f32,
            seg.acc[1][i] as f32,
            seg.acc[2][i] as f32
        ));
    }
    fs::write(csv_path, out)?;
    let sidecar = Sidecar {
        subject_id: seg.subject_id.clone(),
        label: seg.label as u8,
    };
    fs::write(
        sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

/// Read a CSV segment with its JSON sidecar.
///
/// Row order defines the sample index; the `t` column is not re-derived.
pub fn read_csv(csv_path: &Path, sidecar_path: &Path) -> Result<Segment, SegmentError> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?)
        .map_err(|e| SegmentError::BadSidecar(e.to_string()))?;
    let text = fs::read_to_string(csv_path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "t,ppg,acc_x,acc_y,acc_z" => {}
        Some((line, _)) => {
            return Err(SegmentError::BadCsv {
                line: line + 1,
                reason: "expected header t,ppg,acc_x,acc_y,acc_z".into(),
            })
        }
        None => {
            return Err(SegmentError::BadCsv {
                line: 1,
                reason: "empty file".into(),
            })
        }
    }
    let mut ppg = Vec::with_capacity(SEGMENT_LEN);
    let mut acc: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(SegmentError::BadCsv {
                line: idx + 1,
                reason: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, SegmentError> {
            s.trim()
                .parse::<f32>()
                .map(|v| v as f64)
                .map_err(|e| SegmentError::BadCsv {
                    line: idx + 1,
                    reason: e.to_string(),
                })
        };
        ppg.push(parse(fields[1])?);
        acc[0].push(parse(fields[2])?);
        acc[1].push(parse(fields[3])?);
        acc[2].push(parse(fields[4])?);
    }
    let seg = Segment {
        subject_id: sidecar.subject_id,
        label: Label::try_from(sidecar.label)?,
        ppg,
        acc,
    };
    seg.validate()?;
    Ok(seg)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SegmentError> {
        if self.pos + n > self.bytes.len() {
            return Err(SegmentError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_segment() -> Segment {
        let ppg: Vec<f64> = (0..SEGMENT_LEN)
            .map(|i| ((i as f32 * 0.11).sin() * 0.8 + 0.2) as f64)
            .collect();
        let acc_x: Vec<f64> = (0..SEGMENT_LEN).map(|i| (i as f32 * 0.01) as f64).collect();
        let acc_y = vec![0.5f32 as f64; SEGMENT_LEN];
        let acc_z = vec![9.81f32 as f64; SEGMENT_LEN];
        Segment {
            subject_id: "s001".into(),
            label: Label::Af,
            ppg,
            acc: [acc_x, acc_y, acc_z],
        }
    }

    #[test]
    fn pwseg_round_trip() {
        let seg = sample_segment();
        let bytes = pwseg_bytes(&seg).unwrap();
        let back = pwseg_from_bytes(&bytes).unwrap();
        assert_eq!(seg, back);
    }

    #[test]
    fn csv_round_trips_bit_exactly_with_pwseg() {
        let dir = std::env::temp_dir().join("pulsegru_segment_test");
        fs::create_dir_all(&dir).unwrap();
        let seg = sample_segment();
        let csv = dir.join("seg.csv");
        let sidecar = dir.join("seg.json");
        write_csv(&seg, &csv, &sidecar).unwrap();
        let back = read_csv(&csv, &sidecar).unwrap();
        assert_eq!(
            pwseg_bytes(&seg).unwrap(),
            pwseg_bytes(&back).unwrap(),
            "CSV round trip must preserve every f32 bit"
        );
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_bad_magic() {
        let seg = sample_segment();
        let mut bytes = pwseg_bytes(&seg).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            pwseg_from_bytes(&bytes),
            Err(SegmentError::BadMagic)
        ));
    }

    #[test]
    fn rejects_truncated_file() {
        let seg = sample_segment();
        let bytes = pwseg_bytes(&seg).unwrap();
        assert!(matches!(
            pwseg_from_bytes(&bytes[..bytes.len() - 7]),
            Err(SegmentError::Truncated)
        ));
    }

    #[test]
    fn rejects_bad_label() {
        let seg = sample_segment();
        let mut bytes = pwseg_bytes(&seg).unwrap();
        bytes[6] = 9; // label byte follows magic + version
        assert!(matches!(
            pwseg_from_bytes(&bytes),
            Err(SegmentError::BadLabel(9))
        ));
    }

    #[test]
    fn validate_rejects_non_finite() {
        let mut seg = sample_segment();
        seg.ppg[3] = f64::NAN;
        assert!(matches!(seg.validate(), Err(SegmentError::NonFinite)));
    }

    #[test]
    fn validate_rejects_short_channel() {
        let mut seg = sample_segment();
        seg.acc[1].pop();
        assert!(matches!(
            seg.validate(),
            Err(SegmentError::BadLength { channel: "acc_y", .. })
        ));
    }
}
