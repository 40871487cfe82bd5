//! Single-direction GRU with analytic backpropagation.
//!
//! Gate convention (reset gate applied to the hidden-side linear term, one
//! bias vector per side):
//!
//! ```text
//! r_t = σ(W_r x_t + b_ir + U_r h_{t−1} + b_hr)
//! z_t = σ(W_z x_t + b_iz + U_z h_{t−1} + b_hz)
//! n_t = tanh(W_n x_t + b_in + r_t ⊙ (U_n h_{t−1} + b_hn))
//! h_t = (1 − z_t) ⊙ n_t + z_t ⊙ h_{t−1}
//! ```
//!
//! Gate blocks are stored in `(r, z, n)` order inside the stacked `3H`
//! dimension. Sequences use `(L, B, ·)` layout so each timestep slice is
//! contiguous; the input-side affine map for all timesteps is one GEMM, the
//! recurrence then costs one `(B, H) × (H, 3H)` GEMM per step.
//!
//! A bidirectional layer is two of these: the second direction runs on the
//! time-reversed input and its output is reversed back (see the network
//! module).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};

use super::{real, shape_error, sigmoid, ModelError, Real};

/// Weights of one direction. `w` is `(3H, I)`, `u` is `(3H, H)`; biases
/// hold the input-side and hidden-side terms separately.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<F: Real> {
    pub w: Array2<F>,
    pub u: Array2<F>,
    pub b_input: Array1<F>,
    pub b_hidden: Array1<F>,
}

impl<F: Real> GruParams<F> {
    pub fn hidden(&self) -> usize {
        self.u.dim().1
    }

    pub fn input_width(&self) -> usize {
        self.w.dim().1
    }

    fn check(&self, x: &ArrayView3<'_, F>) -> Result<(usize, usize, usize), ModelError> {
        let (l, b, i) = x.dim();
        let h = self.hidden();
        let consistent = self.w.dim() == (3 * h, i)
            && self.u.dim() == (3 * h, h)
            && self.b_input.len() == 3 * h
            && self.b_hidden.len() == 3 * h;
        if !consistent {
            return Err(shape_error(
                "gru",
                format!("w (3H, {i}), u (3H, H) for input (L, B, {i})"),
                format!(
                    "w {:?}, u {:?}, b_input {}, b_hidden {}",
                    self.w.dim(),
                    self.u.dim(),
                    self.b_input.len(),
                    self.b_hidden.len()
                ),
            ));
        }
        Ok((l, b, h))
    }
}

/// Gradients of one direction's weights.
#[derive(Debug, Clone)]
pub struct GruGrads<F: Real> {
    pub w: Array2<F>,
    pub u: Array2<F>,
    pub b_input: Array1<F>,
    pub b_hidden: Array1<F>,
}

impl<F: Real> GruGrads<F> {
    pub fn add_assign(&mut self, other: &GruGrads<F>) {
        self.w += &other.w;
        self.u += &other.u;
        self.b_input += &other.b_input;
        self.b_hidden += &other.b_hidden;
    }
}

/// Per-timestep gate values retained for backpropagation, each `(L, B, H)`.
pub struct GruCache<F: Real> {
    pub r: Array3<F>,
    pub z: Array3<F>,
    pub n: Array3<F>,
    /// Hidden-side candidate pre-activation `U_n h_{t−1} + b_hn`, before
    /// the reset gate touches it.
    pub ghn: Array3<F>,
}

/// Run the recurrence over `x (L, B, I)` with zero initial hidden state.
///
/// Returns the hidden sequence `(L, B, H)` and, when `want_cache`, the gate
/// values needed by [`gru_backward`].
pub fn gru_forward<F: Real>(
    params: &GruParams<F>,
    x: &ArrayView3<'_, F>,
    want_cache: bool,
) -> Result<(Array3<F>, Option<GruCache<F>>), ModelError> {
    let (l, b, h) = params.check(x)?;
    let i = params.input_width();

    // Input-side affine map for every timestep in one GEMM.
    let x2 = x
        .to_shape((l * b, i))
        .expect("(L, B, I) input is standard layout");
    let mut gx = x2.dot(&params.w.t());
    gx += &params.b_input;

    let mut h_seq = Array3::<F>::zeros((l, b, h));
    let mut cache = want_cache.then(|| GruCache {
        r: Array3::zeros((l, b, h)),
        z: Array3::zeros((l, b, h)),
        n: Array3::zeros((l, b, h)),
        ghn: Array3::zeros((l, b, h)),
    });

    let mut h_prev = Array2::<F>::zeros((b, h));
    let mut gh = Array2::<F>::zeros((b, 3 * h));
    let u_t = params.u.t();
    let one = F::one();
    for t in 0..l {
        // gh = h_prev · Uᵀ + b_hidden
        general_mat_mul(one, &h_prev, &u_t, F::zero(), &mut gh);
        gh += &params.b_hidden;

        let gx_t = gx.slice(ndarray::s![t * b..(t + 1) * b, ..]);
        let gx_s = gx_t.to_slice().expect("contiguous gx slice");
        let gh_s = gh.as_slice().expect("contiguous gh");
        let hp_s = h_prev.as_slice().expect("contiguous h_prev");
        let mut h_t = h_seq.index_axis_mut(Axis(0), t);
        let h_s = h_t.as_slice_mut().expect("contiguous h_t");

        match cache.as_mut() {
            Some(c) => {
                let r_s = c.r.index_axis_mut(Axis(0), t).into_slice().unwrap();
                let z_s = c.z.index_axis_mut(Axis(0), t).into_slice().unwrap();
                let n_s = c.n.index_axis_mut(Axis(0), t).into_slice().unwrap();
                let g_s = c.ghn.index_axis_mut(Axis(0), t).into_slice().unwrap();
                step_forward(
                    b,
                    h,
                    gx_s,
                    gh_s,
                    hp_s,
                    h_s,
                    Some((r_s, z_s, n_s, g_s)),
                    one,
                );
            }
            None => step_forward(b, h, gx_s, gh_s, hp_s, h_s, None, one),
        }
        h_prev.as_slice_mut().unwrap().copy_from_slice(h_s);
    }
    Ok((h_seq, cache))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn step_forward<F: Real>(
    b: usize,
    h: usize,
    gx: &[F],
    gh: &[F],
    h_prev: &[F],
    h_out: &mut [F],
    mut cache: Option<(&mut [F], &mut [F], &mut [F], &mut [F])>,
    one: F,
) {
    for bi in 0..b {
        let g_off = bi * 3 * h;
        let h_off = bi * h;
        for j in 0..h {
            let r = sigmoid(gx[g_off + j] + gh[g_off + j]);
            let z = sigmoid(gx[g_off + h + j] + gh[g_off + h + j]);
            let ghn = gh[g_off + 2 * h + j];
            let n = (gx[g_off + 2 * h + j] + r * ghn).tanh();
            let hp = h_prev[h_off + j];
            h_out[h_off + j] = (one - z) * n + z * hp;
            if let Some((r_s, z_s, n_s, g_s)) = cache.as_mut() {
                r_s[h_off + j] = r;
                z_s[h_off + j] = z;
                n_s[h_off + j] = n;
                g_s[h_off + j] = ghn;
            }
        }
    }
}

/// Backpropagate through the recurrence.
///
/// `dh_out` carries the loss gradient w.r.t. every hidden output. Returns
/// the weight gradients and the gradient w.r.t. the input sequence.
pub fn gru_backward<F: Real>(
    params: &GruParams<F>,
    x: &ArrayView3<'_, F>,
    h_seq: &Array3<F>,
    cache: &GruCache<F>,
    dh_out: &ArrayView3<'_, F>,
) -> Result<(GruGrads<F>, Array3<F>), ModelError> {
    let (l, b, h) = params.check(x)?;
    let i = params.input_width();
    if h_seq.dim() != (l, b, h) || dh_out.dim() != (l, b, h) || cache.r.dim() != (l, b, h) {
        return Err(shape_error(
            "gru backward",
            format!("(L, B, H) = {:?}", (l, b, h)),
            format!("h {:?}, dh {:?}", h_seq.dim(), dh_out.dim()),
        ));
    }

    let mut grads = GruGrads {
        w: Array2::zeros((3 * h, i)),
        u: Array2::zeros((3 * h, h)),
        b_input: Array1::zeros(3 * h),
        b_hidden: Array1::zeros(3 * h),
    };
    // Input-side pre-activation gradients for every step; turned into dW,
    // db_input, and dx by three GEMM-shaped reductions after the loop.
    let mut dgx = Array3::<F>::zeros((l, b, 3 * h));
    let mut dgh = Array2::<F>::zeros((b, 3 * h));
    let mut dh = Array2::<F>::zeros((b, h));
    let zero_prev = Array2::<F>::zeros((b, h));
    let one = F::one();

    for t in (0..l).rev() {
        // Accumulate the external gradient for this step.
        {
            let dh_s = dh.as_slice_mut().unwrap();
            let ext = dh_out.index_axis(Axis(0), t);
            let ext_s = ext.to_slice().expect("contiguous dh_out");
            for (a, &e) in dh_s.iter_mut().zip(ext_s) {
                *a = *a + e;
            }
        }
        let h_prev = if t > 0 {
            h_seq.index_axis(Axis(0), t - 1)
        } else {
            zero_prev.view()
        };

        {
            let r_s = cache.r.index_axis(Axis(0), t);
            let z_s = cache.z.index_axis(Axis(0), t);
            let n_s = cache.n.index_axis(Axis(0), t);
            let g_s = cache.ghn.index_axis(Axis(0), t);
            let r_s = r_s.to_slice().unwrap();
            let z_s = z_s.to_slice().unwrap();
            let n_s = n_s.to_slice().unwrap();
            let g_s = g_s.to_slice().unwrap();
            let hp_s = h_prev.to_slice().unwrap();
            let mut dgx_t = dgx.index_axis_mut(Axis(0), t);
            let dgx_s = dgx_t.as_slice_mut().unwrap();
            let dgh_s = dgh.as_slice_mut().unwrap();
            let dh_s = dh.as_slice_mut().unwrap();
            let dbh = grads.b_hidden.as_slice_mut().unwrap();

            for bi in 0..b {
                let g_off = bi * 3 * h;
                let h_off = bi * h;
                for j in 0..h {
                    let r = r_s[h_off + j];
                    let z = z_s[h_off + j];
                    let n = n_s[h_off + j];
                    let ghn = g_s[h_off + j];
                    let hp = hp_s[h_off + j];
                    let d = dh_s[h_off + j];

                    let dz = d * (hp - n);
                    let dn = d * (one - z);
                    let dan = dn * (one - n * n);
                    let dr = dan * ghn;
                    let dghn = dan * r;
                    let dar = dr * r * (one - r);
                    let daz = dz * z * (one - z);

                    dgx_s[g_off + j] = dar;
                    dgx_s[g_off + h + j] = daz;
                    dgx_s[g_off + 2 * h + j] = dan;
                    dgh_s[g_off + j] = dar;
                    dgh_s[g_off + h + j] = daz;
                    dgh_s[g_off + 2 * h + j] = dghn;
                    dbh[j] = dbh[j] + dar;
                    dbh[h + j] = dbh[h + j] + daz;
                    dbh[2 * h + j] = dbh[2 * h + j] + dghn;

                    // Direct path h_t → h_{t−1}; the gate paths are added
                    // via dgh · U below.
                    dh_s[h_off + j] = d * z;
                }
            }
        }
        if t > 0 {
            // dU += dghᵀ · h_{t−1}
            general_mat_mul(one, &dgh.t(), &h_prev, one, &mut grads.u);
        }
        // dh += dgh · U
        general_mat_mul(one, &dgh, &params.u, one, &mut dh);
    }

    let dgx2 = dgx
        .view()
        .into_shape_with_order((l * b, 3 * h))
        .expect("dgx reshape");
    let x2 = x.to_shape((l * b, i)).expect("x reshape");
    general_mat_mul(one, &dgx2.t(), &x2, F::zero(), &mut grads.w);
    grads.b_input = dgx2.sum_axis(Axis(0));
    let dx = dgx2
        .dot(&params.w)
        .into_shape_with_order((l, b, i))
        .expect("dx reshape");
    Ok((grads, dx))
}

/// Build zeroed parameters for the given sizes; used by tests.
pub fn zero_params<F: Real>(input: usize, hidden: usize) -> GruParams<F> {
    GruParams {
        w: Array2::zeros((3 * hidden, input)),
        u: Array2::zeros((3 * hidden, hidden)),
        b_input: Array1::zeros(3 * hidden),
        b_hidden: Array1::zeros(3 * hidden),
    }
}

/// Random parameters at GRU scale `uniform(−1/√fan_in, 1/√fan_in)`.
pub fn random_params<F: Real>(
    input: usize,
    hidden: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> GruParams<F> {
    use rand::Rng;
    let mut p = zero_params(input, hidden);
    let wb = 1.0 / (input as f64).sqrt();
    for v in p.w.iter_mut() {
        *v = real(rng.random_range(-wb..wb));
    }
    let ub = 1.0 / (hidden as f64).sqrt();
    for v in p.u.iter_mut() {
        *v = real(rng.random_range(-ub..ub));
    }
    for v in p.b_input.iter_mut().chain(p.b_hidden.iter_mut()) {
        *v = real(rng.random_range(-0.1..0.1));
    }
    p
}
