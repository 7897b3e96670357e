//! Dense row-major buffers, the GEMM entry point, and the forward kernels
//! shared by the training graph and the incremental decoder.

use std::fmt::{Debug, Display};

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` over strided views.
    ///
    /// # Safety
    /// All pointers must be valid for the extents implied by the dimensions
    /// and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided 2-D view into a slice: element `(i, j)` lives at
/// `off + i * rs + j * cs`.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major `[rows, cols]` matrix starting at `off`.
    pub fn rows(data: &'a [T], off: usize, cols: usize) -> Self {
        Self { data, off, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn trans(data: &'a [T], off: usize, cols: usize) -> Self {
        Self { data, off, rs: 1, cs: cols }
    }

    fn check(&self, r: usize, c: usize) {
        if r > 0 && c > 0 {
            let last = self.off + (r - 1) * self.rs + (c - 1) * self.cs;
            assert!(last < self.data.len(), "gemm view out of bounds");
        }
    }
}

#[derive(Clone, Copy)]
pub struct ViewMut {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl ViewMut {
    pub fn rows(off: usize, cols: usize) -> Self {
        Self { off, rs: cols, cs: 1 }
    }
}

/// `c[view] = alpha * a[m,k] * b[k,n] + beta * c[view]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, alpha: T, a: View<T>, b: View<T>, beta: T, c: &mut [T], cv: ViewMut) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = cv.off + (m - 1) * cv.rs + (n - 1) * cv.cs;
    assert!(last < c.len(), "gemm output out of bounds");
    // SAFETY: extents checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// A named 2-D parameter tensor (vectors are stored as `[1, n]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.tensors.push(Tensor::zeros(name, rows, cols));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data.iter().map(|x| U::of(x.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

pub fn first_non_finite<T: Real>(xs: &[T]) -> Option<usize> {
    xs.iter().position(|x| !x.is_finite())
}

/// `y[rows, out] = x[rows, in] * w[in, out] + b`.
pub fn linear_fwd<T: Real>(x: &[T], rows: usize, inp: usize, w: &[T], out: usize, b: Option<&[T]>) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * out..(r + 1) * out].copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(
        rows,
        inp,
        out,
        T::one(),
        View::rows(x, 0, inp),
        View::rows(w, 0, out),
        beta,
        &mut y,
        ViewMut::rows(0, out),
    );
    y
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalisation. Returns `(y, xhat, rstd)`.
pub fn layer_norm_fwd<T: Real>(x: &[T], cols: usize, gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let n = T::of(cols as f64);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

/// Geometry of a batched multi-head attention call.
///
/// Query rows are `b * lq + i`; key/value rows are `b * k_stride + j`, so a
/// stride of 0 shares one key set across the batch. Key `j` is visible to
/// query `i` of batch `b` iff `j < key_len[b]` and, when causal,
/// `j <= q_start + i`.
#[derive(Debug, Clone)]
pub struct AttnShape {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub k_stride: usize,
    pub heads: usize,
    pub d_model: usize,
    pub key_len: Vec<usize>,
    pub causal: bool,
    pub q_start: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Number of visible keys for query `i` of batch `b`.
    pub fn visible(&self, b: usize, i: usize) -> usize {
        let n = self.key_len[b].min(self.lk);
        if self.causal {
            n.min(self.q_start + i + 1)
        } else {
            n
        }
    }

    /// Offset of the `[lq, lk]` probability block for `(b, h)`.
    pub fn prob_block(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.lq * self.lk
    }
}

/// Scaled dot-product attention. Returns the output rows and the softmax
/// probabilities `[batch, heads, lq, lk]` (zero at masked keys).
pub fn attention_fwd<T: Real>(q: &[T], k: &[T], v: &[T], s: &AttnShape) -> (Vec<T>, Vec<T>) {
    let d = s.d_model;
    let dh = s.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); s.batch * s.heads * s.lq * s.lk];
    let mut out = vec![T::zero(); s.batch * s.lq * d];
    for b in 0..s.batch {
        let nk = s.key_len[b].min(s.lk);
        if nk == 0 {
            continue;
        }
        for h in 0..s.heads {
            let pb = s.prob_block(b, h);
            let qoff = b * s.lq * d + h * dh;
            let koff = b * s.k_stride * d + h * dh;
            gemm(
                s.lq,
                dh,
                nk,
                scale,
                View::rows(q, qoff, d),
                View::trans(k, koff, d),
                T::zero(),
                &mut probs,
                ViewMut::rows(pb, s.lk),
            );
            for i in 0..s.lq {
                let vis = s.visible(b, i);
                let row = &mut probs[pb + i * s.lk..pb + (i + 1) * s.lk];
                softmax_prefix(row, vis);
            }
            gemm(
                s.lq,
                nk,
                dh,
                T::one(),
                View::rows(&probs, pb, s.lk),
                View::rows(v, koff, d),
                T::zero(),
                &mut out,
                ViewMut::rows(qoff, d),
            );
        }
    }
    (out, probs)
}

/// Softmax over `row[..n]`; everything from `n` on is set to zero.
fn softmax_prefix<T: Real>(row: &mut [T], n: usize) {
    let (live, dead) = row.split_at_mut(n);
    dead.iter_mut().for_each(|x| *x = T::zero());
    if live.is_empty() {
        return;
    }
    let max = live.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
    let mut sum = T::zero();
    for x in live.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in live.iter_mut() {
        *x = *x / sum;
    }
}

/// Numerically stable `log_softmax` of one row, accumulated in `f64`.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, x| a.max(x.as_f64()));
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// Sinusoidal position table `[max_len, d]`.
pub fn sinusoid_table<T: Real>(max_len: usize, d: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn linear_matches_naive() {
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let w: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let b = vec![0.1, 0.2, 0.3, 0.4];
        let y = linear_fwd(&x, 2, 3, &w, 4, Some(&b));
        let mut expect = naive_matmul(&x, &w, 2, 3, 4);
        for r in 0..2 {
            for c in 0..4 {
                expect[r * 4 + c] += b[c];
            }
        }
        for (a, e) in y.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let s = AttnShape {
            batch: 2,
            lq: 3,
            lk: 3,
            k_stride: 3,
            heads: 2,
            d_model: 4,
            key_len: vec![3, 2],
            causal: true,
            q_start: 0,
        };
        let q: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).cos()).collect();
        let (_, probs) = attention_fwd(&q, &q, &q, &s);
        for b in 0..2 {
            for h in 0..2 {
                for i in 0..3 {
                    let off = s.prob_block(b, h) + i * 3;
                    let row = &probs[off..off + 3];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                    for (j, p) in row.iter().enumerate() {
                        if j >= s.visible(b, i) {
                            assert_eq!(*p, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0];
        let (y, _, _) = layer_norm_fwd(&x, 4, &[1.0; 4], &[0.0; 4]);
        for r in 0..2 {
            let row = &y[r * 4..r * 4 + 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
