//! Differentiable elementwise, reduction, shape and matrix operations.

use super::array::numel;
use super::{gemm_into, Array, MatView, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into an array of
/// `in_shape` broadcast to it. `None` means the shapes are identical.
pub(crate) fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape == out_shape {
        return None;
    }
    let n = numel(out_shape);
    let in_len = numel(in_shape);
    if in_len == 1 {
        return Some(vec![0; n]);
    }
    // Suffix broadcast: [.., a, b] against [a, b].
    if out_shape.len() >= in_shape.len() && out_shape[out_shape.len() - in_shape.len()..] == *in_shape {
        return Some((0..n).map(|i| i % in_len).collect());
    }
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Sums `grad` (of the broadcast shape) back down to `in_shape`.
fn sum_to_shape<T: Scalar>(grad: &Array<T>, in_shape: &[usize], map: &Option<Vec<usize>>) -> Array<T> {
    match map {
        None => grad.clone(),
        Some(map) => {
            let mut out = vec![T::zero(); numel(in_shape)];
            for (g, &j) in grad.data().iter().zip(map) {
                out[j] += *g;
            }
            Array::from_parts(in_shape.to_vec(), out)
        }
    }
}

fn gather<T: Scalar>(x: &Array<T>, map: &Option<Vec<usize>>, i: usize) -> T {
    match map {
        None => x.data()[i],
        Some(m) => x.data()[m[i]],
    }
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_array<T: Scalar>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Array::from_parts(out_shape, out);
    }
    let data = x.data();
    // Odometer over the output index, innermost dimension copied in a loop.
    let inner = rank - 1;
    let inner_len = out_shape[inner];
    let inner_stride = src_strides[inner];
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    loop {
        let mut p = pos;
        for _ in 0..inner_len {
            out.push(data[p]);
            p += inner_stride;
        }
        let mut d = inner;
        loop {
            if d == 0 {
                return Array::from_parts(out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            pos += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        // (grad_out, a, b) -> (da, db) pointwise
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(op, &sa, &sb))?;
        let map_a = broadcast_map(&sa, &out_shape);
        let map_b = broadcast_map(&sb, &out_shape);
        let (a, b) = (self.value().clone(), other.value().clone());
        let n = numel(&out_shape);
        let out: Vec<T> = (0..n).map(|i| f(gather(&a, &map_a, i), gather(&b, &map_b, i))).collect();
        let out = Array::from_parts(out_shape.clone(), out);
        Tensor::record(op, &[self, other], out, move |g, needs| {
            let mut ga = Vec::with_capacity(if needs[0] { n } else { 0 });
            let mut gb = Vec::with_capacity(if needs[1] { n } else { 0 });
            for (i, &gi) in g.data().iter().enumerate() {
                let (da, db) = df(gi, gather(&a, &map_a, i), gather(&b, &map_b, i));
                if needs[0] {
                    ga.push(da);
                }
                if needs[1] {
                    gb.push(db);
                }
            }
            let ga = needs[0].then(|| sum_to_shape(&Array::from_parts(out_shape.clone(), ga), &sa, &map_a));
            let gb = needs[1].then(|| sum_to_shape(&Array::from_parts(out_shape.clone(), gb), &sb, &map_b));
            vec![ga, gb]
        })
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub(crate) fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        // (x, y) -> dy/dx
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Tensor<T>> {
        let x = self.value().clone();
        let y = x.map(f);
        let y_saved = y.clone();
        Tensor::record(op, &[self], y, move |g, _| {
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y_saved.data()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(Array::from_parts(x.shape().to_vec(), d))]
        })
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        let two = T::from_f64(2.0);
        self.unary("square", |x| x * x, move |x, _| two * x)
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(
            "sigmoid",
            |x| {
                // Split by sign so exp never overflows.
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        let out = Array::scalar(self.value().sum());
        Tensor::record("sum", &[self], out, move |g, _| {
            vec![Some(Array::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.value().len().max(1);
        self.sum()?.scale(T::one() / T::from_f64(n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let in_shape = self.shape().to_vec();
        let out = self.value().reshape(shape)?;
        Tensor::record("reshape", &[self], out, move |g, _| {
            vec![Some(g.reshape(&in_shape).expect("reshape grad"))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Invalid(format!(
                "permutation {perm:?} invalid for rank {rank}"
            )));
        }
        let out = permute_array(self.value(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Tensor::record("permute", &[self], out, move |g, _| {
            vec![Some(permute_array(g, &inverse))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::Invalid("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    /// Rows `[start, end)` along axis 0.
    pub fn slice0(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let in_shape = self.shape().to_vec();
        let out = self.value().slice_axis0(start, end)?;
        Tensor::record("slice0", &[self], out, move |g, _| {
            let stride = numel(&in_shape[1..]);
            let mut full = vec![T::zero(); numel(&in_shape)];
            full[start * stride..end * stride].copy_from_slice(g.data());
            vec![Some(Array::from_parts(in_shape, full))]
        })
    }

    /// Concatenation along axis 0.
    pub fn concat0(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let values: Vec<Array<T>> = parts.iter().map(|p| p.value().clone()).collect();
        let out = Array::concat0(&values)?;
        let rows: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::record("concat0", &refs, out, move |g, needs| {
            let mut start = 0;
            rows.iter()
                .zip(needs)
                .map(|(&r, &need)| {
                    let piece = need.then(|| g.slice_axis0(start, start + r).expect("concat grad"));
                    start += r;
                    piece
                })
                .collect()
        })
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch
    /// extents.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let nb = numel(&batch);
        let map_a = broadcast_map(batch_a, &batch).unwrap_or_else(|| (0..nb).collect());
        let map_b = broadcast_map(batch_b, &batch).unwrap_or_else(|| (0..nb).collect());

        let (a, b) = (self.value().clone(), other.value().clone());
        let mut out = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            let av = MatView::new(&a.data()[map_a[i] * m * k..], m, k);
            let bv = MatView::new(&b.data()[map_b[i] * k * n..], k, n);
            gemm_into(av, bv, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let out = Array::from_parts(out_shape, out);

        Tensor::record("matmul", &[self, other], out, move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); a.len()];
                for i in 0..nb {
                    let gv = MatView::new(&gd[i * m * n..], m, n);
                    let bv = MatView::new(&b.data()[map_b[i] * k * n..], k, n);
                    let off = map_a[i] * m * k;
                    gemm_into(gv, bv.t(), T::one(), &mut ga[off..off + m * k]);
                }
                Array::from_parts(sa.clone(), ga)
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); b.len()];
                for i in 0..nb {
                    let av = MatView::new(&a.data()[map_a[i] * m * k..], m, k);
                    let gv = MatView::new(&gd[i * m * n..], m, n);
                    let off = map_b[i] * k * n;
                    gemm_into(av.t(), gv, T::one(), &mut gb[off..off + k * n]);
                }
                Array::from_parts(sb.clone(), gb)
            });
            vec![ga, gb]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let eye = Tensor::constant(arr(&[2, 2], &[1., 0., 0., 1.]));
        let m = Tensor::constant(arr(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(eye.matmul(&m).unwrap().value().data(), &[1., 2., 3., 4.]);

        let row = Tensor::constant(arr(&[1, 2], &[1., 0.]));
        let col = Tensor::constant(arr(&[2, 1], &[2., 3.]));
        assert_eq!(row.matmul(&col).unwrap().value().data(), &[2.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::constant(Array::<f64>::zeros(&[2, 3]));
        let b = Tensor::constant(Array::<f64>::zeros(&[2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_batch() {
        // [2, 1, 2] x [2, 1] -> [2, 1, 1]
        let a = Tensor::constant(arr(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = Tensor::constant(arr(&[2, 1], &[1., 1.]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.value().data(), &[3., 7.]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(arr(&[3], &[0.5, 0.5, 0.5]));
        let loss = x.add(&b).unwrap().sum().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&b).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn general_broadcast_map() {
        // [2,1,3] against [2,4,3]
        let map = broadcast_map(&[2, 1, 3], &[2, 4, 3]).unwrap();
        assert_eq!(&map[..6], &[0, 1, 2, 0, 1, 2]);
        assert_eq!(&map[12..15], &[3, 4, 5]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_none());
    }

    #[test]
    fn permute_round_trip() {
        let x = Array::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute_array(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // out[c][a][b] = x[a][b][c]
        assert_eq!(p.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let back = permute_array(&p, &[1, 2, 0]);
        assert_eq!(back, x);
    }

    #[test]
    fn slice_and_concat_gradients() {
        let tape = Tape::<f64>::new();
        let x = tape.param(arr(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let top = x.slice0(0, 1).unwrap();
        let both = Tensor::concat0(&[top, x.clone()]).unwrap();
        assert_eq!(both.shape(), &[4, 2]);
        let loss = both.sum().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[2., 2., 1., 1., 1., 1.]);
    }
}
