//! The 1D-Bi-GRU network: configuration, parameters, and cost accounting.
//!
//! Layer stack for an `(L, d)` input:
//!
//! 1. 1D convolution embedding with `4d` filters, kernel 5, stride 1,
//!    padding 2 → `(L, 4d)`;
//! 2. bidirectional GRU, 128 units per direction, opposite-direction
//!    hidden sequences concatenated per timestep → `(L, 256)`;
//! 3. batch normalization, then 20% dropout;
//! 4. a shared dense layer per timestep → `(L, 3)`;
//! 5. mean pooling over time to one 3-class logit vector per segment.
//!
//! Forward and backward passes are written directly (no autograd); every
//! layer's analytic gradients are checked against central finite
//! differences in the tests. Arithmetic is generic over `f32`/`f64`:
//! gradient checks run in 64-bit, training typically in 32-bit.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, NdFloat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::ChannelConfig;
use crate::rng::stream;

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gru;
pub mod head;
pub mod network;
pub mod norm;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use gru::GruParams;
pub use network::{forward_logits, train_forward_backward, train_loss_only, DropoutMask};

/// Floating-point element type of the network: `f32` or `f64`.
pub trait Real: NdFloat {}
impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the active element type.
#[inline]
pub(crate) fn real<F: Real>(x: f64) -> F {
    F::from(x).expect("f64 constant representable")
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Timesteps per segment.
    pub seq_len: usize,
    /// Input channels `d`.
    pub input_channels: usize,
    /// GRU units per direction.
    pub gru_hidden: usize,
    /// Convolution kernel width.
    pub kernel: usize,
    /// Dropout rate after batch normalization.
    pub dropout_rate: f64,
    /// Output classes.
    pub classes: usize,
}

impl ModelConfig {
    /// The production configuration for a channel set: `L` = 1500, 128 GRU
    /// units, kernel 5, 20% dropout, 3 classes.
    pub fn for_channels(channels: ChannelConfig) -> Self {
        Self {
            seq_len: crate::segment::SEGMENT_LEN,
            input_channels: channels.d(),
            gru_hidden: 128,
            kernel: 5,
            dropout_rate: 0.20,
            classes: 3,
        }
    }

    /// Convolution filter count: `4d`.
    pub fn conv_filters(&self) -> usize {
        4 * self.input_channels
    }

    /// Zero padding on each side; keeps the output length at `L`.
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Width of the concatenated bidirectional GRU output.
    pub fn bigru_width(&self) -> usize {
        2 * self.gru_hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.seq_len > 0
            && self.input_channels > 0
            && self.gru_hidden > 0
            && self.kernel % 2 == 1
            && self.classes > 1
            && (0.0..1.0).contains(&self.dropout_rate);
        if ok {
            Ok(())
        } else {
            Err(ModelError::BadConfig(format!("{self:?}")))
        }
    }

    /// Shapes of every parameter array, in serialization order. The first
    /// [`LEARNABLE_COUNT`] entries are learnable; the batch-norm running
    /// statistics follow.
    pub fn array_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.input_channels;
        let f = self.conv_filters();
        let h = self.gru_hidden;
        let w = self.bigru_width();
        let c = self.classes;
        vec![
            ("conv.w", vec![f, d, self.kernel]),
            ("conv.b", vec![f]),
            ("gru_fwd.w", vec![3 * h, f]),
            ("gru_fwd.u", vec![3 * h, h]),
            ("gru_fwd.b_input", vec![3 * h]),
            ("gru_fwd.b_hidden", vec![3 * h]),
            ("gru_bwd.w", vec![3 * h, f]),
            ("gru_bwd.u", vec![3 * h, h]),
            ("gru_bwd.b_input", vec![3 * h]),
            ("gru_bwd.b_hidden", vec![3 * h]),
            ("bn.gamma", vec![w]),
            ("bn.beta", vec![w]),
            ("dense.w", vec![c, w]),
            ("dense.b", vec![c]),
            ("bn.running_mean", vec![w]),
            ("bn.running_var", vec![w]),
        ]
    }
}

/// Number of learnable arrays in [`ModelConfig::array_shapes`] order.
pub const LEARNABLE_COUNT: usize = 14;

/// Errors from model construction and execution.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite gradient in {0}; training aborted")]
    NonFiniteGradient(&'static str),
    #[error("non-finite loss; training aborted")]
    NonFiniteLoss,
}

pub(crate) fn shape_error(op: &'static str, expected: String, got: String) -> ModelError {
    ModelError::Shape { op, expected, got }
}

/// All arrays of the network. Learnable weights plus the non-learnable
/// batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    pub conv_w: Array3<F>,
    pub conv_b: Array1<F>,
    pub gru_fwd: GruParams<F>,
    pub gru_bwd: GruParams<F>,
    pub bn_gamma: Array1<F>,
    pub bn_beta: Array1<F>,
    pub bn_running_mean: Array1<F>,
    pub bn_running_var: Array1<F>,
    pub dense_w: Array2<F>,
    pub dense_b: Array1<F>,
}

impl<F: Real> ModelParams<F> {
    /// Zero-initialized parameters with the shapes of `config`, except
    /// batch-norm gamma = 1 and running variance = 1.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.input_channels;
        let f = config.conv_filters();
        let h = config.gru_hidden;
        let w = config.bigru_width();
        let gru = || GruParams {
            w: Array2::zeros((3 * h, f)),
            u: Array2::zeros((3 * h, h)),
            b_input: Array1::zeros(3 * h),
            b_hidden: Array1::zeros(3 * h),
        };
        Self {
            conv_w: Array3::zeros((f, d, config.kernel)),
            conv_b: Array1::zeros(f),
            gru_fwd: gru(),
            gru_bwd: gru(),
            bn_gamma: Array1::ones(w),
            bn_beta: Array1::zeros(w),
            bn_running_mean: Array1::zeros(w),
            bn_running_var: Array1::ones(w),
            dense_w: Array2::zeros((config.classes, w)),
            dense_b: Array1::zeros(config.classes),
        }
    }

    /// Views of every array in [`ModelConfig::array_shapes`] order.
    pub fn named_views(&self) -> Vec<(&'static str, ArrayViewD<'_, F>)> {
        vec![
            ("conv.w", self.conv_w.view().into_dyn()),
            ("conv.b", self.conv_b.view().into_dyn()),
            ("gru_fwd.w", self.gru_fwd.w.view().into_dyn()),
            ("gru_fwd.u", self.gru_fwd.u.view().into_dyn()),
            ("gru_fwd.b_input", self.gru_fwd.b_input.view().into_dyn()),
            ("gru_fwd.b_hidden", self.gru_fwd.b_hidden.view().into_dyn()),
            ("gru_bwd.w", self.gru_bwd.w.view().into_dyn()),
            ("gru_bwd.u", self.gru_bwd.u.view().into_dyn()),
            ("gru_bwd.b_input", self.gru_bwd.b_input.view().into_dyn()),
            ("gru_bwd.b_hidden", self.gru_bwd.b_hidden.view().into_dyn()),
            ("bn.gamma", self.bn_gamma.view().into_dyn()),
            ("bn.beta", self.bn_beta.view().into_dyn()),
            ("dense.w", self.dense_w.view().into_dyn()),
            ("dense.b", self.dense_b.view().into_dyn()),
            ("bn.running_mean", self.bn_running_mean.view().into_dyn()),
            ("bn.running_var", self.bn_running_var.view().into_dyn()),
        ]
    }

    /// Mutable views in the same order as [`Self::named_views`].
    pub fn named_views_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, F>)> {
        vec![
            ("conv.w", self.conv_w.view_mut().into_dyn()),
            ("conv.b", self.conv_b.view_mut().into_dyn()),
            ("gru_fwd.w", self.gru_fwd.w.view_mut().into_dyn()),
            ("gru_fwd.u", self.gru_fwd.u.view_mut().into_dyn()),
            ("gru_fwd.b_input", self.gru_fwd.b_input.view_mut().into_dyn()),
            (
                "gru_fwd.b_hidden",
                self.gru_fwd.b_hidden.view_mut().into_dyn(),
            ),
            ("gru_bwd.w", self.gru_bwd.w.view_mut().into_dyn()),
            ("gru_bwd.u", self.gru_bwd.u.view_mut().into_dyn()),
            ("gru_bwd.b_input", self.gru_bwd.b_input.view_mut().into_dyn()),
            (
                "gru_bwd.b_hidden",
                self.gru_bwd.b_hidden.view_mut().into_dyn(),
            ),
            ("bn.gamma", self.bn_gamma.view_mut().into_dyn()),
            ("bn.beta", self.bn_beta.view_mut().into_dyn()),
            ("dense.w", self.dense_w.view_mut().into_dyn()),
            ("dense.b", self.dense_b.view_mut().into_dyn()),
            ("bn.running_mean", self.bn_running_mean.view_mut().into_dyn()),
            ("bn.running_var", self.bn_running_var.view_mut().into_dyn()),
        ]
    }

    /// Views of the learnable arrays only.
    pub fn learnable_views(&self) -> Vec<ArrayViewD<'_, F>> {
        self.named_views()
            .into_iter()
            .take(LEARNABLE_COUNT)
            .map(|(_, v)| v)
            .collect()
    }

    /// Mutable views of the learnable arrays only.
    pub fn learnable_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        self.named_views_mut()
            .into_iter()
            .take(LEARNABLE_COUNT)
            .map(|(_, v)| v)
            .collect()
    }

    /// Total learnable element count.
    pub fn learnable_len(&self) -> usize {
        self.learnable_views().iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_views()
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Check that shapes match a configuration.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        for ((name, expected), (_, view)) in config.array_shapes().iter().zip(self.named_views()) {
            if view.shape() != expected.as_slice() {
                return Err(shape_error(
                    name,
                    format!("{expected:?}"),
                    format!("{:?}", view.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Gradients of the learnable arrays, in the same order as
/// [`ModelParams::learnable_views`].
#[derive(Debug, Clone)]
pub struct Gradients<F: Real> {
    pub conv_w: Array3<F>,
    pub conv_b: Array1<F>,
    pub gru_fwd: gru::GruGrads<F>,
    pub gru_bwd: gru::GruGrads<F>,
    pub bn_gamma: Array1<F>,
    pub bn_beta: Array1<F>,
    pub dense_w: Array2<F>,
    pub dense_b: Array1<F>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.input_channels;
        let f = config.conv_filters();
        let h = config.gru_hidden;
        let w = config.bigru_width();
        let gru = || gru::GruGrads {
            w: Array2::zeros((3 * h, f)),
            u: Array2::zeros((3 * h, h)),
            b_input: Array1::zeros(3 * h),
            b_hidden: Array1::zeros(3 * h),
        };
        Self {
            conv_w: Array3::zeros((f, d, config.kernel)),
            conv_b: Array1::zeros(f),
            gru_fwd: gru(),
            gru_bwd: gru(),
            bn_gamma: Array1::zeros(w),
            bn_beta: Array1::zeros(w),
            dense_w: Array2::zeros((config.classes, w)),
            dense_b: Array1::zeros(config.classes),
        }
    }

    /// Views in [`ModelParams::learnable_views`] order.
    pub fn views(&self) -> Vec<ArrayViewD<'_, F>> {
        vec![
            self.conv_w.view().into_dyn(),
            self.conv_b.view().into_dyn(),
            self.gru_fwd.w.view().into_dyn(),
            self.gru_fwd.u.view().into_dyn(),
            self.gru_fwd.b_input.view().into_dyn(),
            self.gru_fwd.b_hidden.view().into_dyn(),
            self.gru_bwd.w.view().into_dyn(),
            self.gru_bwd.u.view().into_dyn(),
            self.gru_bwd.b_input.view().into_dyn(),
            self.gru_bwd.b_hidden.view().into_dyn(),
            self.bn_gamma.view().into_dyn(),
            self.bn_beta.view().into_dyn(),
            self.dense_w.view().into_dyn(),
            self.dense_b.view().into_dyn(),
        ]
    }

    /// Accumulate another gradient set (used to reduce per-chunk results in
    /// a fixed order).
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        self.conv_w += &other.conv_w;
        self.conv_b += &other.conv_b;
        self.gru_fwd.add_assign(&other.gru_fwd);
        self.gru_bwd.add_assign(&other.gru_bwd);
        self.bn_gamma += &other.bn_gamma;
        self.bn_beta += &other.bn_beta;
        self.dense_w += &other.dense_w;
        self.dense_b += &other.dense_b;
    }

    pub fn all_finite(&self) -> bool {
        self.views().iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Initialize parameters: each weight array uniform in
/// `(−1/√fan_in, +1/√fan_in)`, biases zero, batch-norm gamma 1 / beta 0.
///
/// Draws are made in `f64` and converted, so `f32` and `f64` instantiations
/// of the same seed carry identical values at `f32` precision.
pub fn init_params<F: Real>(config: &ModelConfig, seed: u64) -> ModelParams<F> {
    use rand::Rng;
    let mut rng = stream(seed, "init", 0);
    let mut params = ModelParams::zeros(config);
    let d = config.input_channels;
    let f = config.conv_filters();
    let h = config.gru_hidden;

    fn fill<'a, F: Real>(
        values: impl Iterator<Item = &'a mut F>,
        fan_in: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in values {
            *v = real(rng.random_range(-bound..bound));
        }
    }
    fill(params.conv_w.iter_mut(), d * config.kernel, &mut rng);
    fill(params.gru_fwd.w.iter_mut(), f, &mut rng);
    fill(params.gru_fwd.u.iter_mut(), h, &mut rng);
    fill(params.gru_bwd.w.iter_mut(), f, &mut rng);
    fill(params.gru_bwd.u.iter_mut(), h, &mut rng);
    fill(params.dense_w.iter_mut(), config.bigru_width(), &mut rng);
    params
}

/// Closed-form learnable parameter count.
///
/// conv `5·d·4d + 4d`; per GRU direction `3H·4d + 3H·H + 2·3H`; batch norm
/// `2·2H`; dense `3·2H + 3`.
pub fn count_params(config: &ModelConfig) -> usize {
    let d = config.input_channels;
    let f = config.conv_filters();
    let h = config.gru_hidden;
    let w = config.bigru_width();
    let conv = config.kernel * d * f + f;
    let gru_per_direction = 3 * h * f + 3 * h * h + 2 * 3 * h;
    let bn = 2 * w;
    let dense = config.classes * w + config.classes;
    conv + 2 * gru_per_direction + bn + dense
}

/// A FLOP estimate with its counting methodology spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub conv: u64,
    pub gru: u64,
    pub batch_norm: u64,
    pub dense: u64,
    pub total: u64,
    pub methodology: String,
}

/// Estimate FLOPs for one single-segment forward pass of length `seq_len`.
///
/// Counting rules (stated because conventions differ between papers):
/// one multiply-accumulate = 2 FLOPs; each gate nonlinearity
/// (sigmoid/tanh) = 4 FLOPs; batch norm = 4 FLOPs per element.
pub fn estimate_flops(config: &ModelConfig, seq_len: usize) -> FlopsEstimate {
    let l = seq_len as u64;
    let d = config.input_channels as u64;
    let f = 4 * d;
    let h = config.gru_hidden as u64;
    let w = 2 * h;
    let c = config.classes as u64;
    let k = config.kernel as u64;

    let conv = 2 * l * f * (k * d);
    // Per timestep per direction: 3H·(4d + H) MACs plus 3H nonlinearities.
    let gru = l * 2 * (2 * (3 * h * (f + h)) + 4 * (3 * h));
    let batch_norm = 4 * l * w;
    let dense = 2 * l * w * c;
    FlopsEstimate {
        conv,
        gru,
        batch_norm,
        dense,
        total: conv + gru + batch_norm + dense,
        methodology: "MAC = 2 FLOPs; gate nonlinearity (sigmoid/tanh) = 4 FLOPs; \
                      batch norm = 4 FLOPs/element; one segment, forward pass only"
            .to_string(),
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
