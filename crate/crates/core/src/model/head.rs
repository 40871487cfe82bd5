//! Classifier head: shared dense layer, temporal pooling, softmax loss.

use ndarray::{Array1, Array2, Axis};

use super::{real, shape_error, ModelError, Real};

/// Per-timestep affine map with weights shared across timesteps.
///
/// `x (N, in) → x·Wᵀ + b (N, out)` where `N` is batch × time.
pub fn dense_forward<F: Real>(
    w: &Array2<F>,
    b: &Array1<F>,
    x: &Array2<F>,
) -> Result<Array2<F>, ModelError> {
    let (out_dim, in_dim) = w.dim();
    if x.dim().1 != in_dim || b.len() != out_dim {
        return Err(shape_error(
            "dense",
            format!("input width {in_dim}, bias {out_dim}"),
            format!("input width {}, bias {}", x.dim().1, b.len()),
        ));
    }
    let mut y = x.dot(&w.t());
    y += b;
    Ok(y)
}

/// Backward pass of the dense layer. Returns `(dx, dw, db)`.
pub fn dense_backward<F: Real>(
    w: &Array2<F>,
    x: &Array2<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Mean-pool per-timestep logits `(L, classes)` into one logit vector.
pub fn segment_logits<F: Real>(per_step: &Array2<F>) -> Array1<F> {
    let l = per_step.dim().0;
    per_step.sum_axis(Axis(0)) / real::<F>(l as f64)
}

/// Predicted class: argmax with ties broken toward the lowest index.
pub fn predicted_class<F: Real>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Numerically stabilized softmax.
pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .cloned()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy loss and its gradient w.r.t. the logits.
///
/// `loss = −log p_label`, `grad = softmax − onehot(label)`.
pub fn softmax_xent<F: Real>(logits: &[F], label: usize) -> (F, Vec<F>) {
    debug_assert!(label < logits.len());
    let probs = softmax(logits);
    let p = probs[label].max(real(f64::MIN_POSITIVE));
    let loss = -p.ln();
    let mut grad = probs;
    grad[label] = grad[label] - F::one();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::arr1;
    use rand::Rng;

    #[test]
    fn dense_zero_weights_emit_bias() {
        let w = Array2::<f64>::zeros((3, 8));
        let b = arr1(&[1.0, 2.0, 3.0]);
        let x = Array2::from_elem((5, 8), 0.7);
        let y = dense_forward(&w, &b, &x).unwrap();
        for row in y.rows() {
            assert_eq!(row.to_vec(), vec![1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn dense_maps_256_to_3() {
        let w = Array2::<f64>::from_elem((3, 256), 0.001);
        let b = Array1::zeros(3);
        let x = Array2::from_elem((1500, 256), 0.5);
        let y = dense_forward(&w, &b, &x).unwrap();
        assert_eq!(y.dim(), (1500, 3));
    }

    #[test]
    fn dense_rejects_width_mismatch() {
        let w = Array2::<f64>::zeros((3, 8));
        let b = Array1::zeros(3);
        let x = Array2::zeros((5, 9));
        assert!(dense_forward(&w, &b, &x).is_err());
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = stream(9, "dense-test", 0);
        let w = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let proj = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));

        let loss = |w: &Array2<f64>, b: &Array1<f64>, x: &Array2<f64>| {
            (&dense_forward(w, b, x).unwrap() * &proj).sum()
        };
        let (dx, dw, db) = dense_backward(&w, &x, &proj);

        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-6);
        };
        for idx in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[idx] += h;
            wm.as_slice_mut().unwrap()[idx] -= h;
            check(dw.as_slice().unwrap()[idx], loss(&wp, &b, &x), loss(&wm, &b, &x));
        }
        for idx in 0..b.len() {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[idx] += h;
            bm[idx] -= h;
            check(db[idx], loss(&w, &bp, &x), loss(&w, &bm, &x));
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            check(dx.as_slice().unwrap()[idx], loss(&w, &b, &xp), loss(&w, &b, &xm));
        }
    }

    #[test]
    fn pooling_averages_timesteps() {
        let mut per_step = Array2::zeros((10, 3));
        for t in 0..10 {
            per_step[(t, 1)] = 1.0;
        }
        let logits = segment_logits(&per_step);
        assert_eq!(logits.to_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(predicted_class(logits.as_slice().unwrap()), 1);
    }

    #[test]
    fn pooling_tie_breaks_to_lowest_class() {
        // Half the steps vote class 0, half vote class 2.
        let mut per_step = Array2::zeros((10, 3));
        for t in 0..5 {
            per_step[(t, 0)] = 1.0;
        }
        for t in 5..10 {
            per_step[(t, 2)] = 1.0;
        }
        let logits = segment_logits(&per_step);
        assert_eq!(logits.to_vec(), vec![0.5, 0.0, 0.5]);
        assert_eq!(
            predicted_class(logits.as_slice().unwrap()),
            0,
            "ties resolve to the lowest class index"
        );
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let mut rng = stream(10, "head-test", 0);
        let per_step = Array2::<f64>::from_shape_fn((32, 3), |_| rng.random_range(-1.0..1.0));
        let base = segment_logits(&per_step);
        let mut rows: Vec<_> = per_step.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.reverse();
        rows.swap(3, 17);
        let permuted = Array2::from_shape_vec((32, 3), rows.concat()).unwrap();
        let other = segment_logits(&permuted);
        for (a, b) in base.iter().zip(other.iter()) {
            assert!((a - b).abs() < 1e-12_f64);
        }
    }

    #[test]
    fn uniform_logits_lose_ln3() {
        let (loss, _) = softmax_xent(&[0.0f64, 0.0, 0.0], 2);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_has_negligible_loss() {
        let (loss, _) = softmax_xent(&[100.0f64, 0.0, 0.0], 0);
        assert!(loss < 1e-6);
    }

    #[test]
    fn xent_gradient_is_softmax_minus_onehot() {
        let (_, grad) = softmax_xent(&[0.0f64, 0.0, 0.0], 1);
        assert!((grad[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((grad[1] + 2.0 / 3.0).abs() < 1e-12);
        assert!((grad[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_for_extreme_logits() {
        for logits in [
            vec![0.0f64, 0.0, 0.0],
            vec![1000.0, -1000.0, 0.0],
            vec![-700.0, -700.0, -700.0],
            vec![f64::MAX.ln(), 1.0, 2.0],
        ] {
            let p = softmax(&logits);
            assert!(p.iter().all(|&v| v >= 0.0));
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "softmax sum {sum}");
        }
    }
}
