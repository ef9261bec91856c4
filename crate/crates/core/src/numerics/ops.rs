//! Differentiable primitives. Each forward function has a matching
//! `*_backward` that maps the upstream gradient to input gradients.
//!
//! Matrices are `[rows, cols]`; a vector argument is treated as a single
//! row. Every forward output is checked for NaN/Inf.

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---- kernels ----
//
// All three products are written as row-axpy loops so the inner loop is a
// contiguous fused update that the compiler can vectorize without
// reassociating any sum.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`
pub(crate) fn gemm_tn_acc<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · bᵀ` with `b[k×n]`
pub(crate) fn gemm_nt_acc<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    n: usize,
    k: usize,
) {
    let bt = transpose_raw(b, k, n);
    gemm_acc(a, &bt, out, m, n, k);
}

// Reductions over eight interleaved accumulators. The summation order is
// fixed, so results are reproducible, and the lanes map onto SIMD registers.

pub(crate) fn lane_sum<T: Real>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in rem {
        s += v;
    }
    s
}

pub(crate) fn lane_dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let cx = x.chunks_exact(8);
    let cy = y.chunks_exact(8);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a8, b8) in cx.zip(cy) {
        for ((a, &u), &v) in acc.iter_mut().zip(a8).zip(b8) {
            *a += u * v;
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&u, &v) in rx.iter().zip(ry) {
        s += u * v;
    }
    s
}

pub(crate) fn lane_max<T: Real>(x: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = x.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    let mut m = acc.iter().copied().fold(T::neg_infinity(), T::max);
    for &v in rem {
        m = m.max(v);
    }
    m
}

pub(crate) fn transpose_raw<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn dims2<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

// ---- matmul / add ----

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    out.check_finite("matmul")
}

/// Returns `(da, db)` for `y = a · b`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = dims2(a);
    let n = b.cols();
    let mut da = Tensor::zeros(&[m, k]);
    gemm_nt_acc(dy.data(), b.data(), da.data_mut(), m, n, k);
    let mut db = Tensor::zeros(&[k, n]);
    gemm_tn_acc(a.data(), dy.data(), db.data_mut(), m, k, n);
    (da, db)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} + {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)?.check_finite("add")
}

// ---- linear ----

/// `y = x · w + b` for `x[r×i]`, `w[i×o]`, `b[o]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, i) = dims2(x);
    let (i2, o) = dims2(w);
    if i != i2 || b.len() != o {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[r, o]);
    for row in 0..r {
        out.row_mut(row).copy_from_slice(b.data());
    }
    gemm_acc(x.data(), w.data(), out.data_mut(), r, i, o);
    out.check_finite("linear")
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> LinearGrads<T> {
    let (r, i) = dims2(x);
    let o = w.cols();
    let mut dx = Tensor::zeros(&[r, i]);
    gemm_nt_acc(dy.data(), w.data(), dx.data_mut(), r, o, i);
    let mut dw = Tensor::zeros(&[i, o]);
    gemm_tn_acc(x.data(), dy.data(), dw.data_mut(), r, i, o);
    let mut db = Tensor::zeros(&[o]);
    for row in 0..r {
        for (acc, &g) in db.data_mut().iter_mut().zip(dy.row(row)) {
            *acc += g;
        }
    }
    LinearGrads { dx, dw, db }
}

// ---- softmax ----

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = lane_max(row);
    // kept separate from the sum so the exp loop vectorizes
    for v in row.iter_mut() {
        *v = (*v - max).fast_exp();
    }
    let inv = T::one() / lane_sum(row);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out.check_finite("softmax")
}

pub(crate) fn softmax_backward_row<T: Real>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot = lane_dot(y, dy);
    for ((o, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *o = yv * (g - dot);
    }
}

/// Gradient of row-wise softmax given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        softmax_backward_row(y.row(r), dy.row(r), dx.row_mut(r));
    }
    dx
}

// ---- layer norm ----

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// Normalized input before gain and bias.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Row-wise layer normalization with learnable `gain` and `bias` (length = cols).
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (r, c) = dims2(x);
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gain {:?}", x.shape(), gain.shape()),
        ));
    }
    let eps = T::lit(LAYER_NORM_EPS);
    let cf = T::lit(c as f64);
    let mut xhat = Tensor::zeros(&[r, c]);
    let mut y = Tensor::zeros(&[r, c]);
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let xh = xhat.row(i).to_vec();
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = xh[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((y.check_finite("layer_norm")?, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (r, c) = dims2(&cache.xhat);
    let cf = T::lit(c as f64);
    let mut dx = Tensor::zeros(&[r, c]);
    let mut dgain = Tensor::zeros(&[c]);
    let mut dbias = Tensor::zeros(&[c]);
    let mut dxhat = vec![T::zero(); c];
    for i in 0..r {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..c {
            dgain.data_mut()[j] += g[j] * xh[j];
            dbias.data_mut()[j] += g[j];
            dxhat[j] = g[j] * gain.data()[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xh[j];
        }
        let scale = cache.inv_std[i] / cf;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = scale * (cf * dxhat[j] - sum_d - xh[j] * sum_dx);
        }
    }
    (dx, dgain, dbias)
}

// ---- gelu (tanh approximation) ----

const GELU_K: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_K) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.fast_tanh())
}

pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let k = T::lit(GELU_K);
    let u = c * (x + k * x * x * x);
    let t = u.fast_tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(gelu_scalar).check_finite("gelu")
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

// ---- pooling / concat ----

/// Mean over rows, giving a `[1×cols]` matrix.
pub fn mean_pool_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = dims2(x);
    if r == 0 {
        return Err(Error::shape("mean_pool", "no rows"));
    }
    let mut out = Tensor::zeros(&[1, c]);
    for i in 0..r {
        for (o, &v) in out.data_mut().iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    let inv = T::one() / T::lit(r as f64);
    out.data_mut().iter_mut().for_each(|v| *v *= inv);
    out.check_finite("mean_pool")
}

pub fn mean_pool_rows_backward<T: Real>(rows: usize, dy: &Tensor<T>) -> Tensor<T> {
    let c = dy.len();
    let inv = T::one() / T::lit(rows as f64);
    let mut dx = Tensor::zeros(&[rows, c]);
    for i in 0..rows {
        for (o, &g) in dx.row_mut(i).iter_mut().zip(dy.data()) {
            *o = g * inv;
        }
    }
    dx
}

/// Stacks `a` on top of `b`.
pub fn concat_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "concat_rows",
            format!("{:?} over {:?}", a.shape(), b.shape()),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[a.rows() + b.rows(), a.cols()], data)
}

/// Splits the upstream gradient back into the `a` and `b` parts.
pub fn concat_rows_backward<T: Real>(dy: &Tensor<T>, a_rows: usize) -> (Tensor<T>, Tensor<T>) {
    let c = dy.cols();
    let split = a_rows * c;
    let da = Tensor::from_vec(&[a_rows, c], dy.data()[..split].to_vec()).expect("split");
    let db = Tensor::from_vec(&[dy.rows() - a_rows, c], dy.data()[split..].to_vec()).expect("split");
    (da, db)
}

// ---- losses ----

/// Softmax cross-entropy of one logit vector against a class index.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("label {label} with {} classes", logits.len()),
        ));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    let loss = lse - logits[label];
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    let probs = logits.iter().map(|&z| (z - lse).exp()).collect();
    Ok((loss, probs))
}

pub fn cross_entropy_backward<T: Real>(probs: &[T], label: usize) -> Vec<T> {
    let mut d = probs.to_vec();
    d[label] -= T::one();
    d
}

/// Mean over rows of the summed absolute error.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "l1_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum();
    let loss = total / T::lit(pred.rows() as f64);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { op: "l1_loss" })
    }
}

/// Subgradient of [`l1_loss`] with respect to `pred` (zero at ties).
pub fn l1_loss_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::lit(pred.rows() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(pred.shape(), data).expect("same shape")
}
