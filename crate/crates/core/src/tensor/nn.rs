//! Neural-network primitives with fused backward rules.

use super::array::numel;
use super::{gemm_into, Array, MatView, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const L2_NORM_EPS: f64 = 1e-6;

fn last_dim<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::Invalid(format!("{op} needs rank >= 1")))
}

/// Layer normalization over the last axis with biased variance.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = last_dim(x, "layer_norm")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let eps = T::from_f64(eps);
    let xv = x.value();
    let rows = xv.len() / d.max(1);
    let inv_d = T::one() / T::from_f64(d as f64);
    let (g, b) = (gamma.value().clone(), beta.value().clone());

    let mut xhat = Vec::with_capacity(xv.len());
    let mut rstd = Vec::with_capacity(rows);
    let mut out = Vec::with_capacity(xv.len());
    for row in xv.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(h * g.data()[j] + b.data()[j]);
        }
    }
    let shape = xv.shape().to_vec();
    let out = Array::from_parts(shape.clone(), out);
    Tensor::record("layer_norm", &[x, gamma, beta], out, move |grad, needs| {
        let gd = grad.data();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut dx = if needs[0] { Vec::with_capacity(gd.len()) } else { Vec::new() };
        let mut dxhat = vec![T::zero(); d];
        for (r, (grow, hrow)) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for j in 0..d {
                dgamma[j] += grow[j] * hrow[j];
                dbeta[j] += grow[j];
                dxhat[j] = grow[j] * g.data()[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * hrow[j];
            }
            if needs[0] {
                mean_dxhat *= inv_d;
                mean_dxhat_xhat *= inv_d;
                for j in 0..d {
                    dx.push(rstd[r] * (dxhat[j] - mean_dxhat - hrow[j] * mean_dxhat_xhat));
                }
            }
        }
        vec![
            needs[0].then(|| Array::from_parts(shape.clone(), dx)),
            needs[1].then(|| Array::from_parts(vec![d], dgamma)),
            needs[2].then(|| Array::from_parts(vec![d], dbeta)),
        ]
    })
}

/// Max and sum over eight interleaved lanes so the loops vectorize.
fn lane_max<T: Scalar>(row: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = row.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    tail.iter().chain(&acc).copied().fold(T::neg_infinity(), T::max)
}

fn lane_sum<T: Scalar>(row: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = row.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    tail.iter().chain(&acc).copied().sum()
}

fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn softmax_rows<T: Scalar>(data: &mut [T], n: usize) {
    for row in data.chunks_exact_mut(n) {
        let max = lane_max(row);
        for v in row.iter_mut() {
            *v = (*v - max).softmax_exp();
        }
        let total = lane_sum(row);
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax over the last axis, max-shifted.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = last_dim(x, "softmax")?;
    let mut y = x.value().to_vec();
    if n > 0 {
        softmax_rows(&mut y, n);
    }
    let shape = x.shape().to_vec();
    let y = Array::from_parts(shape.clone(), y);
    let saved = y.clone();
    Tensor::record("softmax", &[x], y, move |g, _| {
        let mut dx = Vec::with_capacity(g.len());
        for (grow, yrow) in g.data().chunks_exact(n).zip(saved.data().chunks_exact(n)) {
            let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
            dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| yi * (gi - dot)));
        }
        vec![Some(Array::from_parts(shape, dx))]
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    let three = T::from_f64(3.0);
    x.unary(
        "gelu",
        move |v| half * v * (T::one() + (c * (v + a * v * v * v)).act_tanh()),
        move |v, _| {
            let t = (c * (v + a * v * v * v)).act_tanh();
            half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v)
        },
    )
}

/// `x / (‖x‖₂ + eps)` along the last axis.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = last_dim(x, "l2_normalize")?;
    let eps = T::from_f64(eps);
    let xv = x.value().clone();
    let mut norms = Vec::with_capacity(xv.len() / d.max(1));
    let mut y = Vec::with_capacity(xv.len());
    for row in xv.data().chunks_exact(d) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        norms.push(n);
        let inv = T::one() / (n + eps);
        y.extend(row.iter().map(|&v| v * inv));
    }
    let shape = xv.shape().to_vec();
    let y = Array::from_parts(shape.clone(), y);
    Tensor::record("l2_normalize", &[x], y, move |g, _| {
        let mut dx = vec![T::zero(); xv.len()];
        l2_normalize_backward(xv.data(), g.data(), &norms, d, eps, &mut dx);
        vec![Some(Array::from_parts(shape, dx))]
    })
}

/// Accumulates into `dx` the gradient of row-wise `x / (‖x‖ + eps)`.
fn l2_normalize_backward<T: Scalar>(x: &[T], g: &[T], norms: &[T], d: usize, eps: T, dx: &mut [T]) {
    for (r, ((xr, gr), dr)) in x.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
        let n = norms[r];
        let denom = n + eps;
        let inv = T::one() / denom;
        if n > T::zero() {
            let xg: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            let coef = xg / (n * denom * denom);
            for j in 0..d {
                dr[j] += gr[j] * inv - xr[j] * coef;
            }
        } else {
            for j in 0..d {
                dr[j] += gr[j] * inv;
            }
        }
    }
}

/// Options for [`attention`].
#[derive(Clone, Debug)]
pub struct AttentionOpts<T> {
    /// L2-normalize queries and keys before the dot product.
    pub qk_norm: bool,
    /// Additive logit mask of shape `[nq, nk]`, shared by every batch and head.
    pub mask: Option<Array<T>>,
}

impl<T> Default for AttentionOpts<T> {
    fn default() -> Self {
        AttentionOpts {
            qk_norm: true,
            mask: None,
        }
    }
}

fn normalize_rows<T: Scalar>(x: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / d.max(1));
    for row in x.chunks_exact(d) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        norms.push(n);
        let inv = T::one() / (n + eps);
        out.extend(row.iter().map(|&v| v * inv));
    }
    (out, norms)
}

/// Multi-head attention `softmax(scale_h · q̂·k̂ᵀ + mask)·v`.
///
/// Shapes: `q [.., h, nq, dh]`, `k [.., h, nk, dh]`, `v [.., h, nk, dv]`,
/// `scale [h]`; leading extents must match exactly. With `qk_norm` the rows
/// of `q` and `k` are L2-normalized first and no `1/√dh` factor is applied.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: &Tensor<T>,
    opts: &AttentionOpts<T>,
) -> Result<Tensor<T>> {
    let (qs, ks, vs) = (q.shape().to_vec(), k.shape().to_vec(), v.shape().to_vec());
    let r = qs.len();
    if r < 3 || ks.len() != r || vs.len() != r {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if qs[..r - 2] != ks[..r - 2] || ks[..r - 1] != vs[..r - 1] || qs[r - 1] != ks[r - 1] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let heads = qs[r - 3];
    if scale.shape() != [heads] {
        return Err(Error::shape("attention(scale)", scale.shape(), &[heads]));
    }
    let (nq, dh) = (qs[r - 2], qs[r - 1]);
    let (nk, dv) = (ks[r - 2], vs[r - 1]);
    if let Some(mask) = &opts.mask {
        if mask.shape() != [nq, nk] {
            return Err(Error::shape("attention(mask)", mask.shape(), &[nq, nk]));
        }
    }
    let groups = numel(&qs[..r - 2]);
    let eps = T::from_f64(L2_NORM_EPS);

    let (qn, q_norms, kn, k_norms) = if opts.qk_norm {
        let (qn, qnorm) = normalize_rows(q.value().data(), dh, eps);
        let (kn, knorm) = normalize_rows(k.value().data(), dh, eps);
        (qn, qnorm, kn, knorm)
    } else {
        (q.value().to_vec(), Vec::new(), k.value().to_vec(), Vec::new())
    };
    let vv = v.value().clone();
    let sv = scale.value().clone();
    let mask = opts.mask.clone();

    let mut probs = vec![T::zero(); groups * nq * nk];
    let mut out = vec![T::zero(); groups * nq * dv];
    for gi in 0..groups {
        let s = sv.data()[gi % heads];
        let p = &mut probs[gi * nq * nk..(gi + 1) * nq * nk];
        let qm = MatView::new(&qn[gi * nq * dh..], nq, dh);
        let km = MatView::new(&kn[gi * nk * dh..], nk, dh);
        gemm_into(qm, km.t(), T::zero(), p);
        for x in p.iter_mut() {
            *x *= s;
        }
        if let Some(mask) = &mask {
            for (x, &m) in p.iter_mut().zip(mask.data()) {
                *x += m;
            }
        }
        if nk > 0 {
            softmax_rows(p, nk);
        }
        let pm = MatView::new(&*p, nq, nk);
        let vm = MatView::new(&vv.data()[gi * nk * dv..], nk, dv);
        gemm_into(pm, vm, T::zero(), &mut out[gi * nq * dv..(gi + 1) * nq * dv]);
    }
    let mut out_shape = qs[..r - 1].to_vec();
    out_shape.push(dv);
    let out = Array::from_parts(out_shape, out);

    let (q_raw, k_raw) = (q.value().clone(), k.value().clone());
    let qk_norm = opts.qk_norm;
    Tensor::record("attention", &[q, k, v, scale], out, move |g, needs| {
        let gd = g.data();
        let mut dq = vec![T::zero(); if needs[0] { q_raw.len() } else { 0 }];
        let mut dk = vec![T::zero(); if needs[1] { k_raw.len() } else { 0 }];
        let mut dvv = vec![T::zero(); if needs[2] { vv.len() } else { 0 }];
        let mut ds = vec![T::zero(); heads];
        // Gradients with respect to the (possibly normalized) q̂, k̂.
        let mut dqn = vec![T::zero(); nq * dh];
        let mut dkn = vec![T::zero(); nk * dh];
        let mut dp = vec![T::zero(); nq * nk];
        for gi in 0..groups {
            let s = sv.data()[gi % heads];
            let p = &probs[gi * nq * nk..(gi + 1) * nq * nk];
            let go = MatView::new(&gd[gi * nq * dv..], nq, dv);
            let vm = MatView::new(&vv.data()[gi * nk * dv..], nk, dv);
            if needs[2] {
                gemm_into(MatView::new(p, nq, nk).t(), go, T::zero(), &mut dvv[gi * nk * dv..(gi + 1) * nk * dv]);
            }
            gemm_into(go, vm.t(), T::zero(), &mut dp);
            // dlogits = P ⊙ (dP − rowsum(dP ⊙ P)), written into dp.
            for (drow, prow) in dp.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                let dot = lane_dot(drow, prow);
                for (d, &pi) in drow.iter_mut().zip(prow) {
                    *d = pi * (*d - dot);
                }
            }
            let qm = MatView::new(&qn[gi * nq * dh..], nq, dh);
            let km = MatView::new(&kn[gi * nk * dh..], nk, dh);
            // dlogits·k̂ (unscaled); reused for the scale gradient.
            gemm_into(MatView::new(&dp, nq, nk), km, T::zero(), &mut dqn);
            if needs[3] {
                ds[gi % heads] += dqn
                    .iter()
                    .zip(&qn[gi * nq * dh..(gi + 1) * nq * dh])
                    .map(|(&a, &b)| a * b)
                    .sum::<T>();
            }
            if needs[0] {
                for x in dqn.iter_mut() {
                    *x *= s;
                }
                let dst = &mut dq[gi * nq * dh..(gi + 1) * nq * dh];
                if qk_norm {
                    let xq = &q_raw.data()[gi * nq * dh..(gi + 1) * nq * dh];
                    l2_normalize_backward(xq, &dqn, &q_norms[gi * nq..(gi + 1) * nq], dh, eps, dst);
                } else {
                    dst.copy_from_slice(&dqn);
                }
            }
            if needs[1] {
                gemm_into(MatView::new(&dp, nq, nk).t(), qm, T::zero(), &mut dkn);
                for x in dkn.iter_mut() {
                    *x *= s;
                }
                let dst = &mut dk[gi * nk * dh..(gi + 1) * nk * dh];
                if qk_norm {
                    let xk = &k_raw.data()[gi * nk * dh..(gi + 1) * nk * dh];
                    l2_normalize_backward(xk, &dkn, &k_norms[gi * nk..(gi + 1) * nk], dh, eps, dst);
                } else {
                    dst.copy_from_slice(&dkn);
                }
            }
        }
        vec![
            needs[0].then(|| Array::from_parts(q_raw.shape().to_vec(), dq)),
            needs[1].then(|| Array::from_parts(k_raw.shape().to_vec(), dk)),
            needs[2].then(|| Array::from_parts(vv.shape().to_vec(), dvv)),
            needs[3].then(|| Array::from_parts(vec![heads], ds)),
        ]
    })
}

/// `[C, H, W]` → `[(H/p)·(W/p), C·p²]`, token channels ordered `(c, y, x)`.
pub fn patchify<T: Scalar>(img: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
        return Err(Error::Invalid(format!(
            "patchify: image shape {s:?} not divisible by patch {p}"
        )));
    }
    let (c, gh, gw) = (s[0], s[1] / p, s[2] / p);
    img.reshape(&[c, gh, p, gw, p])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape(&[gh * gw, c * p * p])
}

/// Inverse of [`patchify`] for a `gh × gw` token grid.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, channels: usize, gh: usize, gw: usize, p: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s != [gh * gw, channels * p * p] {
        return Err(Error::shape("unpatchify", s, &[gh * gw, channels * p * p]));
    }
    tokens
        .reshape(&[gh, gw, channels, p, p])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape(&[channels, gh * p, gw * p])
}

/// `[G·T, h·dh]` → `[G, h, T, dh]`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, groups: usize, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 || groups == 0 || s[0] % groups != 0 || s[1] % heads != 0 {
        return Err(Error::Invalid(format!(
            "split_heads: shape {s:?} with {groups} groups, {heads} heads"
        )));
    }
    let (t, dh) = (s[0] / groups, s[1] / heads);
    x.reshape(&[groups, t, heads, dh])?.permute(&[0, 2, 1, 3])
}

/// `[G, h, T, dh]` → `[G·T, h·dh]`.
pub fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Invalid(format!("merge_heads: rank-4 input expected, got {s:?}")));
    }
    x.permute(&[0, 2, 1, 3])?.reshape(&[s[0] * s[2], s[1] * s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::constant(Array::from_f64(shape, v).unwrap())
    }

    #[test]
    fn layer_norm_hand_values() {
        let y = layer_norm(&t(&[3], &[1., 2., 3.]), &t(&[3], &[1.; 3]), &t(&[3], &[0.; 3]), LAYER_NORM_EPS).unwrap();
        // mean 2, var 2/3
        let expect = 1.0 / (2.0f64 / 3.0 + 1e-6).sqrt();
        let d = y.value().data();
        assert_abs_diff_eq!(d[0], -expect, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[2], expect, epsilon = 1e-12);
        assert_abs_diff_eq!(d[2], 1.2247, epsilon = 1e-4);
    }

    #[test]
    fn layer_norm_degenerate_rows() {
        let ones = t(&[4], &[1.; 4]);
        let zeros = t(&[4], &[0.; 4]);
        let y = layer_norm(&t(&[4], &[3.; 4]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let beta = t(&[4], &[0.1, 0.2, 0.3, 0.4]);
        let y = layer_norm(&t(&[4], &[1., -2., 5., 0.]), &zeros, &beta, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.value().data(), beta.value().data());
        let err = layer_norm(&t(&[4], &[0.; 4]), &t(&[3], &[1.; 3]), &zeros, LAYER_NORM_EPS);
        assert!(err.is_err());
    }

    #[test]
    fn softmax_cases() {
        let y = softmax(&t(&[2], &[0., 0.])).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[1., 0.])).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(y.value().data()[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(y.value().data()[0], 0.7311, epsilon = 1e-4);
        let y = softmax(&t(&[2], &[1000., 0.])).unwrap();
        assert_abs_diff_eq!(y.value().data()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.value().data()[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gelu_cases() {
        let y = gelu(&t(&[3], &[0., 1., -10.])).unwrap();
        let d = y.value().data();
        assert_eq!(d[0], 0.0);
        // 0.5·(1 + tanh(√(2/π)·1.044715))
        let expect = 0.5 * (1.0 + (GELU_C * (1.0 + GELU_A)).tanh());
        assert_abs_diff_eq!(d[1], expect, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 0.8412, epsilon = 1e-4);
        assert!(d[2].abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_cases() {
        let y = l2_normalize(&t(&[2], &[3., 4.]), L2_NORM_EPS).unwrap();
        assert_abs_diff_eq!(y.value().data()[0], 0.6, epsilon = 1e-6);
        assert_abs_diff_eq!(y.value().data()[1], 0.8, epsilon = 1e-6);
        let u = l2_normalize(&t(&[3], &[0., 1., 0.]), L2_NORM_EPS).unwrap();
        assert_abs_diff_eq!(u.value().data()[1], 1.0, epsilon = 1e-6);
        let z = l2_normalize(&t(&[2], &[0., 0.]), L2_NORM_EPS).unwrap();
        assert_eq!(z.value().data(), &[0., 0.]);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let q = t(&[1, 3, 2], &[1., 2., -3., 0.5, 0., 1.]);
        let k = t(&[1, 1, 2], &[0.3, -0.7]);
        let v = t(&[1, 1, 3], &[4., 5., 6.]);
        let s = t(&[1], &[2.0]);
        let o = attention(&q, &k, &v, &s, &AttentionOpts::default()).unwrap();
        assert_eq!(o.shape(), &[1, 3, 3]);
        for row in o.value().data().chunks(3) {
            assert_abs_diff_eq!(row[0], 4.0, epsilon = 1e-12);
            assert_abs_diff_eq!(row[2], 6.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_sharp_scale_selects_aligned_key() {
        let q = t(&[1, 1, 2], &[2., 0.]);
        let k = t(&[1, 2, 2], &[5., 0., 0., 3.]);
        let v = t(&[1, 2, 1], &[7., -1.]);
        let s = t(&[1], &[60.0]);
        let o = attention(&q, &k, &v, &s, &AttentionOpts::default()).unwrap();
        assert_abs_diff_eq!(o.value().data()[0], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn attention_without_qk_norm() {
        let q = t(&[1, 1, 2], &[1., 0.]);
        let k = t(&[1, 2, 2], &[1., 0., 0., 1.]);
        let v = t(&[1, 2, 1], &[1., 0.]);
        let s = t(&[1], &[1.0]);
        let opts = AttentionOpts { qk_norm: false, mask: None };
        let o = attention(&q, &k, &v, &s, &opts).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(o.value().data()[0], e / (e + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn attention_rejects_head_dim_mismatch() {
        let q = t(&[1, 1, 2], &[1., 0.]);
        let k = t(&[1, 1, 3], &[1., 0., 0.]);
        let v = t(&[1, 1, 1], &[1.]);
        let s = t(&[1], &[1.0]);
        assert!(attention(&q, &k, &v, &s, &AttentionOpts::default()).is_err());
    }

    #[test]
    fn patchify_order_and_counts() {
        let img = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4]);
        assert_eq!(p.value().data(), &[1., 2., 3., 4.]);
        let big = Tensor::constant(Array::<f64>::zeros(&[3, 32, 32]));
        assert_eq!(patchify(&big, 8).unwrap().shape()[0], 16);
        assert!(patchify(&big, 5).is_err());
    }
}
