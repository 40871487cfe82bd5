//! 1D convolution embedding (stride 1, zero padding).
//!
//! Cross-correlation per output filter:
//! `y[b, t, f] = Σ_c Σ_k w[f, c, k] · x[b, t + k − pad, c] + bias[f]`.
//!
//! Implemented as im2col + one GEMM; the column matrix doubles as the
//! backward cache.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};

use super::{shape_error, ModelError, Real};

/// Forward cache: the im2col matrix `(B·L, d·K)`.
pub struct ConvCache<F: Real> {
    pub col: Array2<F>,
}

/// Lay out `x (B, L, d)` as a `(B·L, d·K)` column matrix under `pad` zeros
/// on each side.
fn im2col<F: Real>(x: &ArrayView3<'_, F>, kernel: usize, pad: usize) -> Array2<F> {
    let (b, l, d) = x.dim();
    let mut col = Array2::zeros((b * l, d * kernel));
    for bi in 0..b {
        for t in 0..l {
            let row = bi * l + t;
            for k in 0..kernel {
                let src = t as isize + k as isize - pad as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                for c in 0..d {
                    col[(row, c * kernel + k)] = x[(bi, src as usize, c)];
                }
            }
        }
    }
    col
}

/// Reshape the `(filters, d, K)` weight tensor to `(d·K, filters)` for the
/// im2col GEMM.
fn weights_as_matrix<F: Real>(w: &Array3<F>) -> Array2<F> {
    let (filters, d, kernel) = w.dim();
    let mut m = Array2::zeros((d * kernel, filters));
    for f in 0..filters {
        for c in 0..d {
            for k in 0..kernel {
                m[(c * kernel + k, f)] = w[(f, c, k)];
            }
        }
    }
    m
}

/// Convolution forward pass. Returns `(B, L, filters)` plus the cache.
pub fn conv1d_forward<F: Real>(
    w: &Array3<F>,
    bias: &Array1<F>,
    x: &ArrayView3<'_, F>,
    pad: usize,
) -> Result<(Array3<F>, ConvCache<F>), ModelError> {
    let (filters, d, kernel) = w.dim();
    let (b, l, xd) = x.dim();
    if xd != d || bias.len() != filters {
        return Err(shape_error(
            "conv1d",
            format!("input channels {d}, bias {filters}"),
            format!("input channels {xd}, bias {}", bias.len()),
        ));
    }
    let col = im2col(x, kernel, pad);
    let mut out = col.dot(&weights_as_matrix(w));
    out += bias;
    let out = out
        .into_shape_with_order((b, l, filters))
        .expect("B·L·filters reshape");
    Ok((out, ConvCache { col }))
}

/// Convolution forward without retaining the cache.
pub fn conv1d_forward_nocache<F: Real>(
    w: &Array3<F>,
    bias: &Array1<F>,
    x: &ArrayView3<'_, F>,
    pad: usize,
) -> Result<Array3<F>, ModelError> {
    conv1d_forward(w, bias, x, pad).map(|(y, _)| y)
}

/// Convolution backward pass.
///
/// Returns `(dx, dw, db)`; `dx` is skipped (zero-sized) when `need_dx` is
/// false — the network input needs no gradient.
pub fn conv1d_backward<F: Real>(
    w: &Array3<F>,
    cache: &ConvCache<F>,
    dy: &Array3<F>,
    pad: usize,
    need_dx: bool,
) -> Result<(Array3<F>, Array3<F>, Array1<F>), ModelError> {
    let (filters, d, kernel) = w.dim();
    let (b, l, yf) = dy.dim();
    if yf != filters || cache.col.dim() != (b * l, d * kernel) {
        return Err(shape_error(
            "conv1d backward",
            format!("filters {filters}, col {:?}", (b * l, d * kernel)),
            format!("filters {yf}, col {:?}", cache.col.dim()),
        ));
    }
    let dy2 = dy
        .view()
        .into_shape_with_order((b * l, filters))
        .expect("dy reshape");

    // dW via colᵀ · dy, mapped back to (filters, d, K).
    let dw_mat = cache.col.t().dot(&dy2);
    let mut dw = Array3::zeros((filters, d, kernel));
    for f in 0..filters {
        for c in 0..d {
            for k in 0..kernel {
                dw[(f, c, k)] = dw_mat[(c * kernel + k, f)];
            }
        }
    }
    let db = dy2.sum_axis(Axis(0));

    let dx = if need_dx {
        let dcol = dy2.dot(&weights_as_matrix(w).t());
        let mut dx = Array3::zeros((b, l, d));
        for bi in 0..b {
            for t in 0..l {
                let row = bi * l + t;
                for k in 0..kernel {
                    let src = t as isize + k as isize - pad as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    for c in 0..d {
                        dx[(bi, src as usize, c)] =
                            dx[(bi, src as usize, c)] + dcol[(row, c * kernel + k)];
                    }
                }
            }
        }
        dx
    } else {
        Array3::zeros((0, 0, 0))
    };
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array};

    #[test]
    fn identity_kernel_passes_input_through() {
        // Single filter [0, 0, 1, 0, 0] with zero bias: the k = 2 tap hits
        // offset t + 2 − pad = t.
        let mut w = Array3::zeros((1, 1, 5));
        w[(0, 0, 2)] = 1.0;
        let bias = arr1(&[0.0]);
        let x = Array::linspace(0.0f64, 1.0, 1500)
            .into_shape_with_order((1, 1500, 1))
            .unwrap();
        let (y, _) = conv1d_forward(&w, &bias, &x.view(), 2).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_shape_is_l_by_4d() {
        let w = Array3::from_elem((16, 4, 5), 0.01f64);
        let bias = Array1::zeros(16);
        let x = Array3::from_elem((2, 1500, 4), 0.5f64);
        let (y, _) = conv1d_forward(&w, &bias, &x.view(), 2).unwrap();
        assert_eq!(y.dim(), (2, 1500, 16));
    }

    #[test]
    fn bias_is_added_per_filter() {
        let w = Array3::zeros((3, 1, 5));
        let bias = arr1(&[1.0, 2.0, 3.0]);
        let x = Array3::from_elem((1, 8, 1), 0.9f64);
        let (y, _) = conv1d_forward(&w, &bias, &x.view(), 2).unwrap();
        for t in 0..8 {
            assert_eq!(y[(0, t, 0)], 1.0);
            assert_eq!(y[(0, t, 1)], 2.0);
            assert_eq!(y[(0, t, 2)], 3.0);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let w = Array3::<f64>::zeros((4, 2, 5));
        let bias = Array1::zeros(4);
        let x = Array3::zeros((1, 16, 3));
        assert!(conv1d_forward(&w, &bias, &x.view(), 2).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::rng::stream;
        use rand::Rng;

        let (b, l, d, filters, kernel, pad) = (2usize, 16usize, 2usize, 3usize, 5usize, 2usize);
        let mut rng = stream(31, "conv-test", 0);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let w = Array3::from_shape_vec((filters, d, kernel), draw(filters * d * kernel)).unwrap();
        let bias = Array1::from_vec(draw(filters));
        let x = Array3::from_shape_vec((b, l, d), draw(b * l * d)).unwrap();
        // Fixed projection makes the scalar loss sensitive to every output.
        let proj = Array3::from_shape_vec((b, l, filters), draw(b * l * filters)).unwrap();

        let loss = |w: &Array3<f64>, bias: &Array1<f64>, x: &Array3<f64>| -> f64 {
            let (y, _) = conv1d_forward(w, bias, &x.view(), pad).unwrap();
            (&y * &proj).sum()
        };

        let (y, cache) = conv1d_forward(&w, &bias, &x.view(), pad).unwrap();
        assert_eq!(y.dim(), proj.dim());
        let (dx, dw, db) = conv1d_backward(&w, &cache, &proj, pad, true).unwrap();

        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-6, "{what}: analytic {analytic} vs fd {fd} (rel {rel})");
        };

        for idx in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[idx] += h;
            wm.as_slice_mut().unwrap()[idx] -= h;
            check(
                dw.as_slice().unwrap()[idx],
                loss(&wp, &bias, &x),
                loss(&wm, &bias, &x),
                "dw",
            );
        }
        for idx in 0..bias.len() {
            let mut bp = bias.clone();
            let mut bm = bias.clone();
            bp[idx] += h;
            bm[idx] -= h;
            check(db[idx], loss(&w, &bp, &x), loss(&w, &bm, &x), "db");
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            check(
                dx.as_slice().unwrap()[idx],
                loss(&w, &bias, &xp),
                loss(&w, &bias, &xm),
                "dx",
            );
        }
    }
}
