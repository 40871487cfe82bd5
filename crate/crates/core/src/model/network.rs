//! Whole-network forward and backward passes.
//!
//! Batches are processed in fixed sub-chunks (at most [`CHUNK`] segments)
//! that run in parallel through the per-segment layers (convolution and
//! both GRU directions). Batch normalization couples the whole batch, so
//! it runs sequentially between the chunked stages; per-chunk gradients
//! are reduced in chunk order. Chunk boundaries depend only on the batch
//! size, never on the thread count, so results are bit-identical whatever
//! the parallelism.
//!
//! Memory stays linear in `L`: per chunk, the GRU caches hold a handful of
//! `(L, B_chunk, H)` arrays.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rayon::prelude::*;

use super::conv::{conv1d_backward, conv1d_forward, conv1d_forward_nocache, ConvCache};
use super::gru::{gru_backward, gru_forward, GruCache};
use super::head::{dense_backward, dense_forward, predicted_class, softmax, softmax_xent};
use super::norm::{batchnorm_backward, batchnorm_infer, batchnorm_train, update_running};
use super::{real, shape_error, Gradients, ModelConfig, ModelError, ModelParams, Real};

pub use super::norm::DropoutMask;

/// Sub-batch width for the parallel per-segment stages.
pub const CHUNK: usize = 16;

/// Result of one training step's forward + backward pass.
pub struct TrainStep<F: Real> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub grads: Gradients<F>,
    /// Batch statistics for the running update (applied by the caller).
    pub batch_mean: Array1<F>,
    pub batch_var: Array1<F>,
    /// Segment logits `(B, classes)`.
    pub logits: Array2<F>,
}

fn chunk_ranges(batch: usize) -> Vec<std::ops::Range<usize>> {
    (0..batch)
        .step_by(CHUNK)
        .map(|start| start..(start + CHUNK).min(batch))
        .collect()
}

fn validate_batch<F: Real>(
    config: &ModelConfig,
    params: &ModelParams<F>,
    x: &Array3<F>,
) -> Result<(usize, usize, usize), ModelError> {
    params.validate(config)?;
    let (b, l, d) = x.dim();
    if l != config.seq_len || d != config.input_channels || b == 0 {
        return Err(shape_error(
            "network input",
            format!("(B>0, {}, {})", config.seq_len, config.input_channels),
            format!("{:?}", x.dim()),
        ));
    }
    Ok((b, l, d))
}

struct ChunkForward<F: Real> {
    range: std::ops::Range<usize>,
    conv_cache: ConvCache<F>,
    gru_in: Array3<F>,
    gru_in_rev: Array3<F>,
    fwd_h: Array3<F>,
    fwd_cache: GruCache<F>,
    bwd_h: Array3<F>,
    bwd_cache: GruCache<F>,
}

/// Per-segment stages of the training forward pass for one chunk.
fn chunk_forward<F: Real>(
    config: &ModelConfig,
    params: &ModelParams<F>,
    x: &Array3<F>,
    range: std::ops::Range<usize>,
) -> Result<ChunkForward<F>, ModelError> {
    let x_chunk = x.slice(s![range.clone(), .., ..]);
    let (conv_out, conv_cache) =
        conv1d_forward(&params.conv_w, &params.conv_b, &x_chunk, config.padding())?;
    let gru_in = conv_out
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned();
    let gru_in_rev = gru_in.slice(s![..;-1, .., ..]).as_standard_layout().into_owned();
    let (fwd_h, fwd_cache) = gru_forward(&params.gru_fwd, &gru_in.view(), true)?;
    let (bwd_h, bwd_cache) = gru_forward(&params.gru_bwd, &gru_in_rev.view(), true)?;
    Ok(ChunkForward {
        range,
        conv_cache,
        gru_in,
        gru_in_rev,
        fwd_h,
        fwd_cache: fwd_cache.expect("cache requested"),
        bwd_h,
        bwd_cache: bwd_cache.expect("cache requested"),
    })
}

/// Concatenate per-chunk GRU outputs into the `(L, B, 2H)` batch tensor.
/// The reverse direction's sequence is flipped back to natural time here.
fn assemble_bigru<F: Real>(
    chunks: &[ChunkForward<F>],
    l: usize,
    b: usize,
    h: usize,
) -> Array3<F> {
    let mut bigru = Array3::<F>::zeros((l, b, 2 * h));
    for ck in chunks {
        bigru
            .slice_mut(s![.., ck.range.clone(), 0..h])
            .assign(&ck.fwd_h);
        bigru
            .slice_mut(s![.., ck.range.clone(), h..2 * h])
            .assign(&ck.bwd_h.slice(s![..;-1, .., ..]));
    }
    bigru
}

/// Head of the training pass: batch norm (batch statistics), dropout mask,
/// dense layer, temporal mean pooling, mean cross-entropy.
struct HeadForward<F: Real> {
    bn_cache: super::norm::BnCache<F>,
    dropped: Array2<F>,
    logits: Array2<F>,
    loss: f64,
    dlogits: Array2<F>,
}

fn head_forward<F: Real>(
    config: &ModelConfig,
    params: &ModelParams<F>,
    bn_in: &Array2<F>,
    labels: &[usize],
    mask: &DropoutMask<F>,
    l: usize,
    b: usize,
) -> Result<HeadForward<F>, ModelError> {
    if mask.values.dim() != bn_in.dim() {
        return Err(shape_error(
            "dropout mask",
            format!("{:?}", bn_in.dim()),
            format!("{:?}", mask.values.dim()),
        ));
    }
    let c = config.classes;
    let (bn_out, bn_cache) = batchnorm_train(&params.bn_gamma, &params.bn_beta, bn_in)?;
    let dropped = mask.apply(&bn_out);
    let dense_out = dense_forward(&params.dense_w, &params.dense_b, &dropped)?;

    let per_step = dense_out
        .view()
        .into_shape_with_order((l, b, c))
        .expect("per-step reshape");
    let logits = per_step.sum_axis(Axis(0)) / real::<F>(l as f64);

    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut dlogits = Array2::<F>::zeros((b, c));
    for (bi, &label) in labels.iter().enumerate() {
        let row: Vec<F> = logits.row(bi).to_vec();
        let (sample_loss, grad) = softmax_xent(&row, label);
        loss += sample_loss.to_f64().expect("finite-width loss") * inv_b;
        for (k, g) in grad.into_iter().enumerate() {
            dlogits[(bi, k)] = g * real::<F>(inv_b);
        }
    }
    Ok(HeadForward {
        bn_cache,
        dropped,
        logits,
        loss,
        dlogits,
    })
}

/// Full forward + backward pass in training mode.
///
/// Batch-norm running statistics are *not* mutated here; apply them with
/// [`apply_running_update`] after a successful optimizer step.
pub fn train_forward_backward<F: Real>(
    config: &ModelConfig,
    params: &ModelParams<F>,
    x: &Array3<F>,
    labels: &[usize],
    mask: &DropoutMask<F>,
) -> Result<TrainStep<F>, ModelError> {
    let (b, l, _) = validate_batch(config, params, x)?;
    if labels.len() != b || labels.iter().any(|&y| y >= config.classes) {
        return Err(shape_error(
            "labels",
            format!("{b} class indices < {}", config.classes),
            format!("{} labels", labels.len()),
        ));
    }
    let h = config.gru_hidden;

    let chunks: Vec<ChunkForward<F>> = chunk_ranges(b)
        .into_par_iter()
        .map(|range| chunk_forward(config, params, x, range))
        .collect::<Result<_, _>>()?;

    let bigru = assemble_bigru(&chunks, l, b, h);
    let bn_in = bigru
        .into_shape_with_order((l * b, 2 * h))
        .expect("bigru reshape");
    let head = head_forward(config, params, &bn_in, labels, mask, l, b)?;

    // Backward through the head.
    let c = config.classes;
    let mut d_dense_out = Array2::<F>::zeros((l * b, c));
    let step_scale = real::<F>(1.0 / l as f64);
    for t in 0..l {
        for bi in 0..b {
            for k in 0..c {
                d_dense_out[(t * b + bi, k)] = head.dlogits[(bi, k)] * step_scale;
            }
        }
    }
    let (d_dropped, dense_dw, dense_db) =
        dense_backward(&params.dense_w, &head.dropped, &d_dense_out);
    let d_bn_out = mask.apply(&d_dropped);
    let (d_bn_in, dgamma, dbeta) = batchnorm_backward(&params.bn_gamma, &head.bn_cache, &d_bn_out);
    let d_bigru = d_bn_in
        .into_shape_with_order((l, b, 2 * h))
        .expect("d_bigru reshape");

    // Backward through the chunked per-segment stages.
    let chunk_grads: Vec<Gradients<F>> = chunks
        .par_iter()
        .map(|ck| -> Result<Gradients<F>, ModelError> {
            let dh_fwd = d_bigru
                .slice(s![.., ck.range.clone(), 0..h])
                .as_standard_layout()
                .into_owned();
            let dh_bwd = d_bigru
                .slice(s![..;-1, ck.range.clone(), h..2 * h])
                .as_standard_layout()
                .into_owned();
            let (gf, dx_f) = gru_backward(
                &params.gru_fwd,
                &ck.gru_in.view(),
                &ck.fwd_h,
                &ck.fwd_cache,
                &dh_fwd.view(),
            )?;
            let (gb, dx_b_rev) = gru_backward(
                &params.gru_bwd,
                &ck.gru_in_rev.view(),
                &ck.bwd_h,
                &ck.bwd_cache,
                &dh_bwd.view(),
            )?;
            let dx_gru = &dx_f + &dx_b_rev.slice(s![..;-1, .., ..]);
            let d_conv_out = dx_gru
                .permuted_axes([1, 0, 2])
                .as_standard_layout()
                .into_owned();
            let (_, dconv_w, dconv_b) = conv1d_backward(
                &params.conv_w,
                &ck.conv_cache,
                &d_conv_out,
                config.padding(),
                false,
            )?;
            let mut grads = Gradients::zeros(config);
            grads.conv_w = dconv_w;
            grads.conv_b = dconv_b;
            grads.gru_fwd = gf;
            grads.gru_bwd = gb;
            Ok(grads)
        })
        .collect::<Result<_, _>>()?;

    let mut grads = Gradients::zeros(config);
    for cg in &chunk_grads {
        grads.add_assign(cg);
    }
    grads.bn_gamma = dgamma;
    grads.bn_beta = dbeta;
    grads.dense_w = dense_dw;
    grads.dense_b = dense_db;

    Ok(TrainStep {
        loss: head.loss,
        grads,
        batch_mean: head.bn_cache.batch_mean,
        batch_var: head.bn_cache.batch_var,
        logits: head.logits,
    })
}

/// The scalar training loss alone (identical math to
/// [`train_forward_backward`]); this is the function finite differences
/// differentiate in the gradient checks.
pub fn train_loss_only<F: Real>(
    config: &ModelConfig,
    params: &ModelParams<F>,
    x: &Array3<F>,
    labels: &[usize],
    mask: &DropoutMask<F>,
) -> Result<f64, ModelError> {
    let (b, l, _) = validate_batch(config, params, x)?;
    let h = config.gru_hidden;
    let chunks: Vec<ChunkForward<F>> = chunk_ranges(b)
        .into_par_iter()
        .map(|range| chunk_forward(config, params, x, range))
        .collect::<Result<_, _>>()?;
    let bigru = assemble_bigru(&chunks, l, b, h);
    let bn_in = bigru
        .into_shape_with_order((l * b, 2 * h))
        .expect("bigru reshape");
    let head = head_forward(config, params, &bn_in, labels, mask, l, b)?;
    Ok(head.loss)
}

/// Fold fresh batch statistics into the running estimates.
pub fn apply_running_update<F: Real>(
    params: &mut ModelParams<F>,
    batch_mean: &Array1<F>,
    batch_var: &Array1<F>,
) {
    update_running(
        &mut params.bn_running_mean,
        &mut params.bn_running_var,
        batch_mean,
        batch_var,
    );
}

/// Inference-mode forward pass: running batch-norm statistics, no dropout.
///
/// Deterministic: identical input and parameters give bit-identical
/// logits. Returns `(B, classes)`.
pub fn forward_logits<F: Real>(
    config: &ModelConfig,
    params: &ModelParams<F>,
    x: &Array3<F>,
) -> Result<Array2<F>, ModelError> {
    let (b, l, _) = validate_batch(config, params, x)?;
    let h = config.gru_hidden;
    let c = config.classes;

    let chunk_logits: Vec<(std::ops::Range<usize>, Array2<F>)> = chunk_ranges(b)
        .into_par_iter()
        .map(|range| -> Result<_, ModelError> {
            let x_chunk = x.slice(s![range.clone(), .., ..]);
            let conv_out = conv1d_forward_nocache(
                &params.conv_w,
                &params.conv_b,
                &x_chunk,
                config.padding(),
            )?;
            let gru_in = conv_out
                .permuted_axes([1, 0, 2])
                .as_standard_layout()
                .into_owned();
            let gru_in_rev = gru_in
                .slice(s![..;-1, .., ..])
                .as_standard_layout()
                .into_owned();
            let (fwd_h, _) = gru_forward(&params.gru_fwd, &gru_in.view(), false)?;
            let (bwd_h, _) = gru_forward(&params.gru_bwd, &gru_in_rev.view(), false)?;
            let bc = range.len();
            let mut bigru = Array3::<F>::zeros((l, bc, 2 * h));
            bigru.slice_mut(s![.., .., 0..h]).assign(&fwd_h);
            bigru
                .slice_mut(s![.., .., h..2 * h])
                .assign(&bwd_h.slice(s![..;-1, .., ..]));
            let bn_in = bigru
                .into_shape_with_order((l * bc, 2 * h))
                .expect("bigru reshape");
            let bn_out = batchnorm_infer(
                &params.bn_gamma,
                &params.bn_beta,
                &params.bn_running_mean,
                &params.bn_running_var,
                &bn_in,
            )?;
            let dense_out = dense_forward(&params.dense_w, &params.dense_b, &bn_out)?;
            let per_step = dense_out
                .view()
                .into_shape_with_order((l, bc, c))
                .expect("per-step reshape");
            let logits = per_step.sum_axis(Axis(0)) / real::<F>(l as f64);
            Ok((range, logits))
        })
        .collect::<Result<_, _>>()?;

    let mut out = Array2::<F>::zeros((b, c));
    for (range, logits) in chunk_logits {
        out.slice_mut(s![range, ..]).assign(&logits);
    }
    Ok(out)
}

/// Inference predictions: `(class, probabilities)` per segment.
pub fn predict<F: Real>(
    config: &ModelConfig,
    params: &ModelParams<F>,
    x: &Array3<F>,
) -> Result<Vec<(usize, [f64; 3])>, ModelError> {
    assert_eq!(config.classes, 3, "prediction interface is three-class");
    let logits = forward_logits(config, params, x)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            let row: Vec<F> = row.to_vec();
            let class = predicted_class(&row);
            let probs = softmax(&row);
            let probs64: Vec<f64> = probs.iter().map(|p| p.to_f64().expect("finite")).collect();
            (class, [probs64[0], probs64[1], probs64[2]])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, LEARNABLE_COUNT};
    use crate::rng::stream;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            seq_len: 16,
            input_channels: 2,
            gru_hidden: 8,
            kernel: 5,
            dropout_rate: 0.2,
            classes: 3,
        }
    }

    fn random_batch(config: &ModelConfig, b: usize, seed: u64) -> (Array3<f64>, Vec<usize>) {
        let mut rng = stream(seed, "net-test", 0);
        let x = Array3::from_shape_fn((b, config.seq_len, config.input_channels), |_| {
            rng.random_range(0.0..1.0)
        });
        let labels = (0..b).map(|i| i % config.classes).collect();
        (x, labels)
    }

    #[test]
    fn inference_is_deterministic() {
        let config = tiny_config();
        let params = init_params::<f64>(&config, 1);
        let (x, _) = random_batch(&config, 5, 2);
        let a = forward_logits(&config, &params, &x).unwrap();
        let b = forward_logits(&config, &params, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chunking_does_not_change_results() {
        // A batch wider than CHUNK must agree with per-segment runs.
        let config = tiny_config();
        let params = init_params::<f64>(&config, 3);
        let (x, _) = random_batch(&config, CHUNK + 3, 4);
        let batched = forward_logits(&config, &params, &x).unwrap();
        for i in 0..CHUNK + 3 {
            let single = x.slice(s![i..i + 1, .., ..]).to_owned();
            let alone = forward_logits(&config, &params, &single).unwrap();
            for k in 0..3 {
                assert!(
                    (batched[(i, k)] - alone[(0, k)]).abs() < 1e-12,
                    "segment {i} logit {k} differs between batched and single"
                );
            }
        }
    }

    #[test]
    fn loss_only_matches_full_pass() {
        let config = tiny_config();
        let params = init_params::<f64>(&config, 5);
        let (x, labels) = random_batch(&config, 4, 6);
        let mask = DropoutMask::identity(config.seq_len * 4, config.bigru_width());
        let full = train_forward_backward(&config, &params, &x, &labels, &mask).unwrap();
        let lite = train_loss_only(&config, &params, &x, &labels, &mask).unwrap();
        assert_eq!(full.loss, lite, "both paths must compute the same scalar");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // Every learnable parameter, through conv, both GRU directions,
        // batch statistics, a fixed dropout mask, dense, pooling, and the
        // softmax loss.
        let config = tiny_config();
        let mut params = init_params::<f64>(&config, 7);
        let (x, labels) = random_batch(&config, 2, 8);
        let mut rng = stream(9, "net-test", 1);
        let mask = DropoutMask::generate(
            config.seq_len * 2,
            config.bigru_width(),
            config.dropout_rate,
            &mut rng,
        );

        let step = train_forward_backward(&config, &params, &x, &labels, &mask).unwrap();
        let analytic: Vec<f64> = step
            .grads
            .views()
            .iter()
            .flat_map(|v| v.iter().cloned().collect::<Vec<_>>())
            .collect();

        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let mut flat_idx = 0;
        for arr_idx in 0..LEARNABLE_COUNT {
            let len = params.learnable_views()[arr_idx].len();
            for k in 0..len {
                let original = {
                    let views = params.learnable_views();
                    *views[arr_idx].iter().nth(k).unwrap()
                };
                set_param(&mut params, arr_idx, k, original + h);
                let plus = train_loss_only(&config, &params, &x, &labels, &mask).unwrap();
                set_param(&mut params, arr_idx, k, original - h);
                let minus = train_loss_only(&config, &params, &x, &labels, &mask).unwrap();
                set_param(&mut params, arr_idx, k, original);
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic[flat_idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
                flat_idx += 1;
            }
        }
        assert!(
            max_rel < 1e-4,
            "max relative gradient error {max_rel} exceeds 1e-4"
        );
    }

    fn set_param(params: &mut ModelParams<f64>, arr_idx: usize, k: usize, value: f64) {
        let mut views = params.learnable_views_mut();
        *views[arr_idx].iter_mut().nth(k).unwrap() = value;
    }

    #[test]
    fn rejects_wrong_sequence_length() {
        let config = tiny_config();
        let params = init_params::<f64>(&config, 1);
        let x = Array3::<f64>::zeros((2, 8, 2));
        assert!(forward_logits(&config, &params, &x).is_err());
    }

    #[test]
    fn rejects_label_out_of_range() {
        let config = tiny_config();
        let params = init_params::<f64>(&config, 1);
        let (x, _) = random_batch(&config, 2, 3);
        let mask = DropoutMask::identity(config.seq_len * 2, config.bigru_width());
        let labels = vec![0usize, 7];
        assert!(train_forward_backward(&config, &params, &x, &labels, &mask).is_err());
    }
}
