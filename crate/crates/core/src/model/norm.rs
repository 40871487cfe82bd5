//! Batch normalization and dropout.
//!
//! Batch norm operates per feature channel over all `B·L` timesteps of a
//! batch, flattened to an `(N, C)` matrix. Training mode normalizes with
//! batch statistics (biased variance) and exposes them for the running
//! update (momentum 0.1); inference mode uses the running statistics,
//! which default to mean 0 / variance 1 before any training step.
//!
//! Dropout is inverted: surviving activations are scaled by `1/(1−rate)`
//! during training so inference is the plain identity. The mask is a value
//! in its own right — gradient checks differentiate through a fixed mask.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{real, shape_error, ModelError, Real};

/// Batch-norm epsilon inside the square root.
pub const BN_EPS: f64 = 1e-5;
/// Momentum of the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Values cached by the training-mode forward pass.
pub struct BnCache<F: Real> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
    pub batch_mean: Array1<F>,
    pub batch_var: Array1<F>,
}

/// Training-mode batch norm over `(N, C)`.
pub fn batchnorm_train<F: Real>(
    gamma: &Array1<F>,
    beta: &Array1<F>,
    x: &Array2<F>,
) -> Result<(Array2<F>, BnCache<F>), ModelError> {
    let (n, c) = x.dim();
    if gamma.len() != c || beta.len() != c || n == 0 {
        return Err(shape_error(
            "batchnorm",
            format!("gamma/beta of {c} channels, nonempty batch"),
            format!("gamma {}, beta {}, rows {n}", gamma.len(), beta.len()),
        ));
    }
    let count = real::<F>(n as f64);
    let mean = x.sum_axis(Axis(0)) / count;
    let mut var = Array1::<F>::zeros(c);
    for row in x.rows() {
        for (j, &v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] = var[j] + d * d;
        }
    }
    var /= count;

    let eps = real::<F>(BN_EPS);
    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
    let mut xhat = x.clone();
    for mut row in xhat.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[j]) * inv_std[j];
        }
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = gamma[j] * *v + beta[j];
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Inference-mode batch norm using running statistics.
pub fn batchnorm_infer<F: Real>(
    gamma: &Array1<F>,
    beta: &Array1<F>,
    running_mean: &Array1<F>,
    running_var: &Array1<F>,
    x: &Array2<F>,
) -> Result<Array2<F>, ModelError> {
    let (_, c) = x.dim();
    if gamma.len() != c || running_mean.len() != c {
        return Err(shape_error(
            "batchnorm",
            format!("{c} channels"),
            format!("gamma {}, running mean {}", gamma.len(), running_mean.len()),
        ));
    }
    let eps = real::<F>(BN_EPS);
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let inv = F::one() / (running_var[j] + eps).sqrt();
            *v = gamma[j] * (*v - running_mean[j]) * inv + beta[j];
        }
    }
    Ok(y)
}

/// Backward pass through training-mode batch norm.
///
/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<F: Real>(
    gamma: &Array1<F>,
    cache: &BnCache<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (n, c) = dy.dim();
    let count = real::<F>(n as f64);

    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    let mut sum_dxhat = Array1::<F>::zeros(c);
    let mut sum_dxhat_xhat = Array1::<F>::zeros(c);
    for (dy_row, xhat_row) in dy.rows().into_iter().zip(cache.xhat.rows()) {
        for j in 0..c {
            let dyv = dy_row[j];
            let xh = xhat_row[j];
            dgamma[j] = dgamma[j] + dyv * xh;
            dbeta[j] = dbeta[j] + dyv;
            let dxh = dyv * gamma[j];
            sum_dxhat[j] = sum_dxhat[j] + dxh;
            sum_dxhat_xhat[j] = sum_dxhat_xhat[j] + dxh * xh;
        }
    }

    let mut dx = Array2::<F>::zeros((n, c));
    for ((mut dx_row, dy_row), xhat_row) in dx
        .rows_mut()
        .into_iter()
        .zip(dy.rows())
        .zip(cache.xhat.rows())
    {
        for j in 0..c {
            let dxh = dy_row[j] * gamma[j];
            dx_row[j] = cache.inv_std[j] / count
                * (count * dxh - sum_dxhat[j] - xhat_row[j] * sum_dxhat_xhat[j]);
        }
    }
    (dx, dgamma, dbeta)
}

/// Exponential running update of the batch-norm statistics.
pub fn update_running<F: Real>(
    running_mean: &mut Array1<F>,
    running_var: &mut Array1<F>,
    batch_mean: &Array1<F>,
    batch_var: &Array1<F>,
) {
    let m = real::<F>(BN_MOMENTUM);
    let keep = F::one() - m;
    for (r, &b) in running_mean.iter_mut().zip(batch_mean.iter()) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.iter_mut().zip(batch_var.iter()) {
        *r = keep * *r + m * b;
    }
}

/// An inverted-dropout mask: entries are 0 (dropped) or `1/(1−rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<F: Real> {
    pub values: Array2<F>,
    pub rate: f64,
}

impl<F: Real> DropoutMask<F> {
    /// Draw a mask for an `(n, c)` activation matrix. Entries are visited
    /// in row-major order, one uniform draw each.
    pub fn generate(n: usize, c: usize, rate: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        let keep_scale = real::<F>(1.0 / (1.0 - rate));
        let values = Array2::from_shape_simple_fn((n, c), || {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep_scale
            }
        });
        Self { values, rate }
    }

    /// The identity mask (inference behavior).
    pub fn identity(n: usize, c: usize) -> Self {
        Self {
            values: Array2::ones((n, c)),
            rate: 0.0,
        }
    }

    /// Apply the mask. The same function serves forward and backward since
    /// masking is elementwise-linear.
    pub fn apply(&self, x: &Array2<F>) -> Array2<F> {
        x * &self.values
    }
}

/// The spec-level dropout operation: training mode masks with a seeded
/// draw, inference mode is exactly the identity.
pub fn dropout<F: Real>(x: &Array2<F>, rate: f64, training: bool, seed: u64) -> Array2<F> {
    if !training {
        return x.clone();
    }
    let (n, c) = x.dim();
    let mut rng = crate::rng::stream(seed, "dropout-op", 0);
    DropoutMask::generate(n, c, rate, &mut rng).apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::arr1;
    use rand::Rng;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut rng = stream(5, "bn-test", 0);
        let x = Array2::from_shape_fn((64, 4), |_| rng.random_range(-3.0..5.0));
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let (y, _) = batchnorm_train(&gamma, &beta, &x).unwrap();
        for j in 0..4 {
            let col = y.column(j);
            let mean: f64 = col.sum() / 64.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-10, "channel {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {j} variance {var}");
        }
    }

    #[test]
    fn affine_parameters_shift_and_scale() {
        let mut rng = stream(6, "bn-test", 1);
        let x = Array2::<f64>::from_shape_fn((32, 2), |_| rng.random_range(-1.0..1.0));
        let ones = Array1::ones(2);
        let zeros = Array1::zeros(2);
        let (plain, _) = batchnorm_train(&ones, &zeros, &x).unwrap();
        let gamma = arr1(&[2.0, 2.0]);
        let beta = arr1(&[3.0, 3.0]);
        let (scaled, _) = batchnorm_train(&gamma, &beta, &x).unwrap();
        for (p, s) in plain.iter().zip(scaled.iter()) {
            assert!((2.0 * p + 3.0 - s).abs() < 1e-12_f64);
        }
    }

    #[test]
    fn inference_uses_default_running_stats_before_training() {
        let x = Array2::from_elem((4, 3), 1.5f64);
        let gamma = Array1::ones(3);
        let beta = Array1::zeros(3);
        let mean = Array1::zeros(3);
        let var = Array1::ones(3);
        let y = batchnorm_infer(&gamma, &beta, &mean, &var, &x).unwrap();
        for &v in y.iter() {
            assert!((v - 1.5 / (1.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn running_update_applies_momentum() {
        let mut mean = arr1(&[0.0f64]);
        let mut var = arr1(&[1.0f64]);
        update_running(&mut mean, &mut var, &arr1(&[10.0]), &arr1(&[5.0]));
        assert!((mean[0] - 1.0).abs() < 1e-12);
        assert!((var[0] - (0.9 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // (B=2, L=8, C=4) flattened to (16, 4); differentiates through the
        // batch statistics, not just the affine part.
        let mut rng = stream(7, "bn-test", 2);
        let x = Array2::from_shape_fn((16, 4), |_| rng.random_range(-2.0..2.0));
        let gamma = Array1::from_shape_fn(4, |_| rng.random_range(0.5..1.5));
        let beta = Array1::from_shape_fn(4, |_| rng.random_range(-0.5..0.5));
        let proj = Array2::from_shape_fn((16, 4), |_| rng.random_range(-1.0..1.0));

        let loss = |gamma: &Array1<f64>, beta: &Array1<f64>, x: &Array2<f64>| {
            let (y, _) = batchnorm_train(gamma, beta, x).unwrap();
            (&y * &proj).sum()
        };

        let (_, cache) = batchnorm_train(&gamma, &beta, &x).unwrap();
        let (dx, dgamma, dbeta) = batchnorm_backward(&gamma, &cache, &proj);

        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-7);
            assert!(rel < 1e-5, "{what}: analytic {analytic} vs fd {fd}");
        };
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            check(
                dx.as_slice().unwrap()[idx],
                loss(&gamma, &beta, &xp),
                loss(&gamma, &beta, &xm),
                "dx",
            );
        }
        for j in 0..4 {
            let mut gp = gamma.clone();
            let mut gm = gamma.clone();
            gp[j] += h;
            gm[j] -= h;
            check(dgamma[j], loss(&gp, &beta, &x), loss(&gm, &beta, &x), "dgamma");
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[j] += h;
            bm[j] -= h;
            check(dbeta[j], loss(&gamma, &bp, &x), loss(&gamma, &bm, &x), "dbeta");
        }
    }

    #[test]
    fn dropout_inference_is_identity() {
        let x = Array2::from_shape_fn((100, 7), |(i, j)| (i * 7 + j) as f64 * 0.01);
        let y = dropout(&x, 0.2, false, 1);
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_zero_fraction_matches_rate() {
        let mut rng = stream(8, "dropout-test", 0);
        let mask = DropoutMask::<f64>::generate(1000, 1000, 0.2, &mut rng);
        let zeros = mask.values.iter().filter(|&&v| v == 0.0).count();
        let fraction = zeros as f64 / 1e6;
        assert!(
            (fraction - 0.2).abs() < 0.005,
            "zero fraction {fraction} strays from the 20% rate"
        );
    }

    #[test]
    fn dropout_preserves_expectation() {
        let x = Array2::from_elem((50, 40), 1.0f64);
        let mut acc = Array2::<f64>::zeros((50, 40));
        let trials = 400;
        for s in 0..trials {
            let mut rng = stream(s, "dropout-test", 1);
            let mask = DropoutMask::generate(50, 40, 0.2, &mut rng);
            acc += &mask.apply(&x);
        }
        let mean = acc.sum() / (50.0 * 40.0 * trials as f64);
        assert!(
            (mean - 1.0).abs() < 0.01,
            "inverted dropout must be unbiased, got mean {mean}"
        );
    }
}
