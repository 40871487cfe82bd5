//! Multiclass PPG arrhythmia classification at desk scale.
//!
//! End-to-end pieces: signal preparation of 30-second smartwatch segments
//! into normalized channel stacks, a compact 1D bidirectional GRU network
//! with analytic backpropagation, subject-exclusive two-fold training and
//! evaluation, cost accounting, and a synthetic rhythm generator that
//! doubles as the verification oracle for all of it.

pub mod channels;
pub mod eval;
pub mod filter;
pub mod hr;
pub mod model;
pub mod rng;
pub mod segment;
pub mod synth;
pub mod training;

pub use channels::{assemble_channels, ChannelConfig, ChannelStack};
pub use segment::{Label, Segment, SAMPLE_RATE_HZ, SEGMENT_LEN};
