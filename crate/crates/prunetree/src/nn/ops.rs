//! Layer kernels: convolution, dense, per-channel affine, ReLU, global
//! average pooling, and softmax cross-entropy.
//!
//! Kernels are generic over the element type so the same code path that
//! trains at f32 can be exercised at f64 by gradient checks. Loops are
//! ordered so the innermost dimension walks contiguous memory; at stride 1
//! every inner loop is a straight slice traversal the compiler can
//! vectorize. Scalar reductions that feed reported numbers (losses) are
//! accumulated in f64 regardless of the element type.

use crate::nn::spec::ConvSpec;

/// Element type for kernels: f32 in production, f64 in gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_val(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

// ---- convolution ------------------------------------------------------------

/// Geometry of one convolution application.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn from_spec(spec: &ConvSpec, h_in: usize, w_in: usize) -> Self {
        let h_out = spec.out_size(h_in).expect("validated spec");
        let w_out = spec.out_size(w_in).expect("validated spec");
        ConvDims {
            c_in: spec.in_channels,
            c_out: spec.out_channels,
            k: spec.kernel,
            stride: spec.stride,
            pad: spec.padding,
            h_in,
            w_in,
            h_out,
            w_out,
        }
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }
}

/// Output-index range `[lo, hi)` for which `o*stride + k_off - pad` stays
/// inside `[0, in_size)`.
#[inline]
fn valid_range(k_off: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_size + pad > k_off {
        ((in_size - 1 + pad - k_off) / stride + 1).min(out_size)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Forward convolution over a batch of `n` images, NCHW layout, weights
/// `[c_out][c_in][k][k]`. `out` is fully overwritten.
pub fn conv2d<S: Scalar>(d: &ConvDims, n: usize, inp: &[S], weights: &[S], bias: &[S], out: &mut [S]) {
    debug_assert_eq!(inp.len(), n * d.in_len());
    debug_assert_eq!(out.len(), n * d.out_len());
    let in_plane = d.h_in * d.w_in;
    let out_plane = d.h_out * d.w_out;
    for i in 0..n {
        let in_img = &inp[i * d.in_len()..(i + 1) * d.in_len()];
        let out_img = &mut out[i * d.out_len()..(i + 1) * d.out_len()];
        for co in 0..d.c_out {
            let plane = &mut out_img[co * out_plane..(co + 1) * out_plane];
            plane.fill(bias[co]);
            for ci in 0..d.c_in {
                let src = &in_img[ci * in_plane..(ci + 1) * in_plane];
                for kh in 0..d.k {
                    let (oh_lo, oh_hi) = valid_range(kh, d.pad, d.stride, d.h_in, d.h_out);
                    for kw in 0..d.k {
                        let (ow_lo, ow_hi) = valid_range(kw, d.pad, d.stride, d.w_in, d.w_out);
                        if ow_lo >= ow_hi || oh_lo >= oh_hi {
                            continue;
                        }
                        let w = weights[((co * d.c_in + ci) * d.k + kh) * d.k + kw];
                        if d.stride == 1 {
                            let iw_lo = ow_lo + kw - d.pad;
                            let len = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - d.pad;
                                let dst = &mut plane[oh * d.w_out + ow_lo..oh * d.w_out + ow_lo + len];
                                let row = &src[ih * d.w_in + iw_lo..ih * d.w_in + iw_lo + len];
                                for (o, &x) in dst.iter_mut().zip(row) {
                                    *o += w * x;
                                }
                            }
                        } else {
                            for oh in oh_lo..oh_hi {
                                let ih = oh * d.stride + kh - d.pad;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.pad;
                                    plane[oh * d.w_out + ow] += w * src[ih * d.w_in + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the convolution output with respect to its input. `dinp` is
/// fully overwritten.
pub fn conv2d_grad_input<S: Scalar>(d: &ConvDims, n: usize, dout: &[S], weights: &[S], dinp: &mut [S]) {
    debug_assert_eq!(dout.len(), n * d.out_len());
    debug_assert_eq!(dinp.len(), n * d.in_len());
    dinp.fill(S::ZERO);
    let in_plane = d.h_in * d.w_in;
    let out_plane = d.h_out * d.w_out;
    for i in 0..n {
        let dout_img = &dout[i * d.out_len()..(i + 1) * d.out_len()];
        let din_img = &mut dinp[i * d.in_len()..(i + 1) * d.in_len()];
        for ci in 0..d.c_in {
            let dst = &mut din_img[ci * in_plane..(ci + 1) * in_plane];
            for co in 0..d.c_out {
                let src = &dout_img[co * out_plane..(co + 1) * out_plane];
                for kh in 0..d.k {
                    let (oh_lo, oh_hi) = valid_range(kh, d.pad, d.stride, d.h_in, d.h_out);
                    for kw in 0..d.k {
                        let (ow_lo, ow_hi) = valid_range(kw, d.pad, d.stride, d.w_in, d.w_out);
                        if ow_lo >= ow_hi || oh_lo >= oh_hi {
                            continue;
                        }
                        let w = weights[((co * d.c_in + ci) * d.k + kh) * d.k + kw];
                        if d.stride == 1 {
                            let iw_lo = ow_lo + kw - d.pad;
                            let len = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - d.pad;
                                let drow = &mut dst[ih * d.w_in + iw_lo..ih * d.w_in + iw_lo + len];
                                let grow = &src[oh * d.w_out + ow_lo..oh * d.w_out + ow_lo + len];
                                for (o, &g) in drow.iter_mut().zip(grow) {
                                    *o += w * g;
                                }
                            }
                        } else {
                            for oh in oh_lo..oh_hi {
                                let ih = oh * d.stride + kh - d.pad;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.pad;
                                    dst[ih * d.w_in + iw] += w * src[oh * d.w_out + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients of the convolution. `dw` and `db`
/// are added into, so callers zero them once per batch.
pub fn conv2d_grad_params<S: Scalar>(
    d: &ConvDims,
    n: usize,
    inp: &[S],
    dout: &[S],
    dw: &mut [S],
    db: &mut [S],
) {
    debug_assert_eq!(dw.len(), d.c_out * d.c_in * d.k * d.k);
    debug_assert_eq!(db.len(), d.c_out);
    let in_plane = d.h_in * d.w_in;
    let out_plane = d.h_out * d.w_out;
    for i in 0..n {
        let in_img = &inp[i * d.in_len()..(i + 1) * d.in_len()];
        let dout_img = &dout[i * d.out_len()..(i + 1) * d.out_len()];
        for co in 0..d.c_out {
            let gplane = &dout_img[co * out_plane..(co + 1) * out_plane];
            let mut bias_acc = S::ZERO;
            for &g in gplane {
                bias_acc += g;
            }
            db[co] += bias_acc;
            for ci in 0..d.c_in {
                let src = &in_img[ci * in_plane..(ci + 1) * in_plane];
                for kh in 0..d.k {
                    let (oh_lo, oh_hi) = valid_range(kh, d.pad, d.stride, d.h_in, d.h_out);
                    for kw in 0..d.k {
                        let (ow_lo, ow_hi) = valid_range(kw, d.pad, d.stride, d.w_in, d.w_out);
                        if ow_lo >= ow_hi || oh_lo >= oh_hi {
                            continue;
                        }
                        let mut acc = S::ZERO;
                        if d.stride == 1 {
                            let iw_lo = ow_lo + kw - d.pad;
                            let len = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - d.pad;
                                let grow = &gplane[oh * d.w_out + ow_lo..oh * d.w_out + ow_lo + len];
                                let row = &src[ih * d.w_in + iw_lo..ih * d.w_in + iw_lo + len];
                                for (&g, &x) in grow.iter().zip(row) {
                                    acc += g * x;
                                }
                            }
                        } else {
                            for oh in oh_lo..oh_hi {
                                let ih = oh * d.stride + kh - d.pad;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.pad;
                                    acc += gplane[oh * d.w_out + ow] * src[ih * d.w_in + iw];
                                }
                            }
                        }
                        dw[((co * d.c_in + ci) * d.k + kh) * d.k + kw] += acc;
                    }
                }
            }
        }
    }
}

// ---- dense ------------------------------------------------------------------

/// Fully connected layer, weights `[d_out][d_in]`. `out` is overwritten.
pub fn dense<S: Scalar>(n: usize, d_in: usize, d_out: usize, x: &[S], w: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(x.len(), n * d_in);
    debug_assert_eq!(out.len(), n * d_out);
    for i in 0..n {
        let xi = &x[i * d_in..(i + 1) * d_in];
        for o in 0..d_out {
            let wo = &w[o * d_in..(o + 1) * d_in];
            let mut acc = b[o];
            for (&wv, &xv) in wo.iter().zip(xi) {
                acc += wv * xv;
            }
            out[i * d_out + o] = acc;
        }
    }
}

/// Dense backward: input gradient plus accumulated weight/bias gradients.
pub fn dense_grad<S: Scalar>(
    n: usize,
    d_in: usize,
    d_out: usize,
    x: &[S],
    w: &[S],
    dout: &[S],
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    dx.fill(S::ZERO);
    for i in 0..n {
        let xi = &x[i * d_in..(i + 1) * d_in];
        let dxi = &mut dx[i * d_in..(i + 1) * d_in];
        for o in 0..d_out {
            let g = dout[i * d_out + o];
            let wo = &w[o * d_in..(o + 1) * d_in];
            let dwo = &mut dw[o * d_in..(o + 1) * d_in];
            db[o] += g;
            for d in 0..d_in {
                dxi[d] += g * wo[d];
                dwo[d] += g * xi[d];
            }
        }
    }
}

// ---- per-channel affine -------------------------------------------------

/// Per-channel scale and shift over NCHW data: `y[c] = scale[c]*x[c] + shift[c]`.
pub fn affine<S: Scalar>(n: usize, c: usize, plane: usize, x: &[S], scale: &[S], shift: &[S], out: &mut [S]) {
    debug_assert_eq!(x.len(), n * c * plane);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let s = scale[ch];
            let t = shift[ch];
            for (o, &v) in out[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                *o = s * v + t;
            }
        }
    }
}

/// Affine backward: input gradient plus accumulated scale/shift gradients.
pub fn affine_grad<S: Scalar>(
    n: usize,
    c: usize,
    plane: usize,
    x: &[S],
    scale: &[S],
    dout: &[S],
    dx: &mut [S],
    dscale: &mut [S],
    dshift: &mut [S],
) {
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let s = scale[ch];
            let mut ds = S::ZERO;
            let mut dt = S::ZERO;
            for j in base..base + plane {
                let g = dout[j];
                dx[j] = s * g;
                ds += g * x[j];
                dt += g;
            }
            dscale[ch] += ds;
            dshift[ch] += dt;
        }
    }
}

// ---- relu ------------------------------------------------------------------

pub fn relu_inplace<S: Scalar>(x: &mut [S]) {
    for v in x {
        if *v < S::ZERO {
            *v = S::ZERO;
        }
    }
}

/// ReLU backward using the forward *output*: gradients pass where the output
/// is strictly positive.
pub fn relu_grad<S: Scalar>(y: &[S], dout: &[S], dx: &mut [S]) {
    for ((o, &yo), &g) in dx.iter_mut().zip(y).zip(dout) {
        *o = if yo > S::ZERO { g } else { S::ZERO };
    }
}

// ---- global average pooling --------------------------------------------

/// Mean over each channel plane: NCHW -> N x C.
pub fn gap<S: Scalar>(n: usize, c: usize, plane: usize, x: &[S], out: &mut [S]) {
    let norm = S::from_f64(1.0 / plane as f64);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let mut acc = S::ZERO;
            for &v in &x[base..base + plane] {
                acc += v;
            }
            out[i * c + ch] = acc * norm;
        }
    }
}

pub fn gap_grad<S: Scalar>(n: usize, c: usize, plane: usize, dout: &[S], dx: &mut [S]) {
    let norm = S::from_f64(1.0 / plane as f64);
    for i in 0..n {
        for ch in 0..c {
            let g = dout[i * c + ch] * norm;
            let base = (i * c + ch) * plane;
            for v in &mut dx[base..base + plane] {
                *v = g;
            }
        }
    }
}

// ---- shortcut add -------------------------------------------------------

pub fn add_inplace<S: Scalar>(acc: &mut [S], rhs: &[S]) {
    debug_assert_eq!(acc.len(), rhs.len());
    for (a, &b) in acc.iter_mut().zip(rhs) {
        *a += b;
    }
}

// ---- softmax cross-entropy ----------------------------------------------

/// Row-wise softmax computed in f64 (with max subtraction), returned as f64.
pub fn softmax_rows_f64<S: Scalar>(logits: &[S], n: usize, classes: usize) -> Vec<f64> {
    let mut probs = vec![0.0f64; n * classes];
    for i in 0..n {
        let row = &logits[i * classes..(i + 1) * classes];
        let out = &mut probs[i * classes..(i + 1) * classes];
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            max = max.max(v.to_f64());
        }
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v.to_f64() - max).exp();
            *o = e;
            sum += e;
        }
        for o in out {
            *o /= sum;
        }
    }
    probs
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits. The loss is accumulated in f64.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &[S],
    n: usize,
    classes: usize,
    labels: &[usize],
) -> (f64, Vec<S>) {
    debug_assert_eq!(labels.len(), n);
    let probs = softmax_rows_f64(logits, n, classes);
    let mut loss = 0.0f64;
    let mut dlogits = vec![S::ZERO; n * classes];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let p = &probs[i * classes..(i + 1) * classes];
        // Floor only genuine underflow: f64::max would silently swallow a
        // NaN here and hide a diverged forward pass from the caller.
        let p_label = p[labels[i]];
        loss -= if p_label.is_nan() {
            f64::NAN
        } else {
            p_label.max(f64::MIN_POSITIVE).ln()
        };
        let drow = &mut dlogits[i * classes..(i + 1) * classes];
        for c in 0..classes {
            let indicator = if c == labels[i] { 1.0 } else { 0.0 };
            drow[c] = S::from_f64((p[c] - indicator) * inv_n);
        }
    }
    (loss * inv_n, dlogits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // Central finite differences at f64: the oracle every analytic gradient
    // in this module is checked against.
    fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; params.len()];
        let mut work = params.to_vec();
        for i in 0..params.len() {
            work[i] = params[i] + h;
            let up = f(&work);
            work[i] = params[i] - h;
            let down = f(&work);
            work[i] = params[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(
                rel <= tol,
                "{}[{}]: analytic {} vs numeric {} (rel {})",
                what,
                i,
                a,
                n,
                rel
            );
        }
    }

    fn seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
        crate::rng::stream(seed, &[])
    }

    fn randvec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_materialized_padding_oracle() {
        // Independent route: explicitly pad the input, then correlate with
        // quadruple loops and no index tricks.
        let mut rng = seeded(11);
        let d = ConvDims {
            c_in: 2,
            c_out: 3,
            k: 3,
            stride: 2,
            pad: 1,
            h_in: 5,
            w_in: 5,
            h_out: 3,
            w_out: 3,
        };
        let n = 2;
        let x = randvec(&mut rng, n * d.in_len());
        let w = randvec(&mut rng, d.c_out * d.c_in * d.k * d.k);
        let b = randvec(&mut rng, d.c_out);
        let mut out = vec![0.0; n * d.out_len()];
        conv2d(&d, n, &x, &w, &b, &mut out);

        let ph = d.h_in + 2 * d.pad;
        let pw = d.w_in + 2 * d.pad;
        for i in 0..n {
            let mut padded = vec![0.0f64; d.c_in * ph * pw];
            for ci in 0..d.c_in {
                for hh in 0..d.h_in {
                    for ww in 0..d.w_in {
                        padded[(ci * ph + hh + d.pad) * pw + ww + d.pad] =
                            x[((i * d.c_in + ci) * d.h_in + hh) * d.w_in + ww];
                    }
                }
            }
            for co in 0..d.c_out {
                for oh in 0..d.h_out {
                    for ow in 0..d.w_out {
                        let mut acc = b[co];
                        for ci in 0..d.c_in {
                            for kh in 0..d.k {
                                for kw in 0..d.k {
                                    acc += w[((co * d.c_in + ci) * d.k + kh) * d.k + kw]
                                        * padded[(ci * ph + oh * d.stride + kh) * pw
                                            + ow * d.stride
                                            + kw];
                                }
                            }
                        }
                        let got = out[((i * d.c_out + co) * d.h_out + oh) * d.w_out + ow];
                        assert!((got - acc).abs() < 1e-12, "mismatch at {},{},{},{}", i, co, oh, ow);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (seed, stride, pad, k) in [(1u64, 1usize, 1usize, 3usize), (2, 2, 1, 3), (3, 1, 0, 2)] {
            let mut rng = seeded(seed);
            let h_in = 5;
            let w_in = 5;
            let spec = ConvSpec {
                in_channels: 2,
                out_channels: 2,
                kernel: k,
                stride,
                padding: pad,
            };
            let d = ConvDims::from_spec(&spec, h_in, w_in);
            let n = 2;
            let x = randvec(&mut rng, n * d.in_len());
            let w = randvec(&mut rng, spec.weight_len());
            let b = randvec(&mut rng, d.c_out);
            // Scalar functional of the output so there is one loss to probe.
            let coeff = randvec(&mut rng, n * d.out_len());
            let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
                let mut out = vec![0.0; n * d.out_len()];
                conv2d(&d, n, x, w, b, &mut out);
                out.iter().zip(&coeff).map(|(o, c)| o * c).sum()
            };

            let mut dx = vec![0.0; x.len()];
            conv2d_grad_input(&d, n, &coeff, &w, &mut dx);
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; b.len()];
            conv2d_grad_params(&d, n, &x, &coeff, &mut dw, &mut db);

            let ndx = numeric_grad(&mut |p| loss(p, &w, &b), &x, 1e-4);
            let ndw = numeric_grad(&mut |p| loss(&x, p, &b), &w, 1e-4);
            let ndb = numeric_grad(&mut |p| loss(&x, &w, p), &b, 1e-4);
            assert_close(&dx, &ndx, 1e-6, "conv dx");
            assert_close(&dw, &ndw, 1e-6, "conv dw");
            assert_close(&db, &ndb, 1e-6, "conv db");
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = seeded(5);
        let (n, d_in, d_out) = (3, 4, 2);
        let x = randvec(&mut rng, n * d_in);
        let w = randvec(&mut rng, d_out * d_in);
        let b = randvec(&mut rng, d_out);
        let coeff = randvec(&mut rng, n * d_out);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            let mut out = vec![0.0; n * d_out];
            dense(n, d_in, d_out, x, w, b, &mut out);
            out.iter().zip(&coeff).map(|(o, c)| o * c).sum()
        };
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        dense_grad(n, d_in, d_out, &x, &w, &coeff, &mut dx, &mut dw, &mut db);
        assert_close(&dx, &numeric_grad(&mut |p| loss(p, &w, &b), &x, 1e-4), 1e-6, "dense dx");
        assert_close(&dw, &numeric_grad(&mut |p| loss(&x, p, &b), &w, 1e-4), 1e-6, "dense dw");
        assert_close(&db, &numeric_grad(&mut |p| loss(&x, &w, p), &b, 1e-4), 1e-6, "dense db");
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = seeded(6);
        let (n, c, plane) = (2, 3, 4);
        let x = randvec(&mut rng, n * c * plane);
        let scale = randvec(&mut rng, c);
        let shift = randvec(&mut rng, c);
        let coeff = randvec(&mut rng, n * c * plane);
        let loss = |x: &[f64], s: &[f64], t: &[f64]| -> f64 {
            let mut out = vec![0.0; x.len()];
            affine(n, c, plane, x, s, t, &mut out);
            out.iter().zip(&coeff).map(|(o, cf)| o * cf).sum()
        };
        let mut dx = vec![0.0; x.len()];
        let mut ds = vec![0.0; c];
        let mut dt = vec![0.0; c];
        affine_grad(n, c, plane, &x, &scale, &coeff, &mut dx, &mut ds, &mut dt);
        assert_close(&dx, &numeric_grad(&mut |p| loss(p, &scale, &shift), &x, 1e-4), 1e-6, "affine dx");
        assert_close(&ds, &numeric_grad(&mut |p| loss(&x, p, &shift), &scale, 1e-4), 1e-6, "affine dscale");
        assert_close(&dt, &numeric_grad(&mut |p| loss(&x, &scale, p), &shift, 1e-4), 1e-6, "affine dshift");
    }

    #[test]
    fn relu_grad_masks_by_output() {
        let y = [0.0, 0.5, 0.0, 2.0];
        let dout = [1.0, 2.0, 3.0, 4.0];
        let mut dx = [9.0; 4];
        relu_grad(&y, &dout, &mut dx);
        assert_eq!(dx, [0.0, 2.0, 0.0, 4.0]);
    }

    #[test]
    fn gap_gradient_matches_finite_differences() {
        let mut rng = seeded(7);
        let (n, c, plane) = (2, 2, 6);
        let x = randvec(&mut rng, n * c * plane);
        let coeff = randvec(&mut rng, n * c);
        let loss = |x: &[f64]| -> f64 {
            let mut out = vec![0.0; n * c];
            gap(n, c, plane, x, &mut out);
            out.iter().zip(&coeff).map(|(o, cf)| o * cf).sum()
        };
        let mut dx = vec![0.0; x.len()];
        gap_grad(n, c, plane, &coeff, &mut dx);
        assert_close(&dx, &numeric_grad(&mut |p| loss(p), &x, 1e-4), 1e-6, "gap dx");
    }

    #[test]
    fn softmax_ce_known_value_and_gradient() {
        // Two equal logits, label 0: loss is ln 2 and the gradient is
        // (p - onehot) = (-0.5, 0.5).
        let (loss, grad) = softmax_cross_entropy(&[0.0f64, 0.0], 1, 2, &[0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[0] + 0.5).abs() < 1e-12);
        assert!((grad[1] - 0.5).abs() < 1e-12);

        let mut rng = seeded(8);
        let (n, classes) = (4, 3);
        let logits = randvec(&mut rng, n * classes);
        let labels = vec![0usize, 2, 1, 1];
        let (_, grad) = softmax_cross_entropy(&logits, n, classes, &labels);
        let numeric = numeric_grad(
            &mut |p| softmax_cross_entropy(p, n, classes, &labels).0,
            &logits,
            1e-5,
        );
        assert_close(&grad, &numeric, 1e-6, "softmax-ce dlogits");
    }

    #[test]
    fn softmax_handles_large_logits() {
        let probs = softmax_rows_f64(&[1000.0f64, 1000.0], 1, 2);
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!(probs.iter().all(|p| p.is_finite()));
    }
}
