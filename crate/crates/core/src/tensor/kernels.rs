//! Raw numeric kernels behind the graph ops.
//!
//! These work on flat row-major slices. The convolution is lowered to GEMM
//! via im2col, one batch item at a time; items are spread over the
//! [`Exec`] pool in fixed-size groups so that weight-gradient partial sums are
//! always reduced in the same order.

use crate::exec::Exec;

use super::Scalar;

/// Items per work unit in the batched convolution kernels.
pub const GROUP: usize = 8;

/// `C = alpha·A·B + beta·C` where each matrix is given as a slice plus
/// (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    beta: T,
    c: &mut [T],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, c_strides) < c.len(), "gemm: C view out of bounds");
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len(), "gemm: A view out of bounds");
        assert!(last(k, n, b_strides) < b.len(), "gemm: B view out of bounds");
    }
    // SAFETY: the views were bounds-checked above and `c` is a unique borrow
    // distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        )
    }
}

/// Geometry of a valid (unpadded) 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvDims {
    pub fn out_len(&self) -> usize {
        self.len + 1 - self.k
    }

    fn patch(&self) -> usize {
        self.c_in * self.k
    }
}

/// Unfolds item `x_b[c_in × len]` into columns `offset..offset+out_len` of
/// `col`, a `(c_in·k) × stride` matrix.
fn im2col<T: Scalar>(d: &ConvDims, x_b: &[T], col: &mut [T], stride: usize, offset: usize) {
    let t_out = d.out_len();
    for c in 0..d.c_in {
        for tau in 0..d.k {
            let r = c * d.k + tau;
            let src = c * d.len + tau;
            let dst = r * stride + offset;
            col[dst..dst + t_out].copy_from_slice(&x_b[src..src + t_out]);
        }
    }
}

/// Folds columns `offset..offset+out_len` of `col` back onto `dx_b`,
/// summing overlapping contributions.
fn col2im<T: Scalar>(d: &ConvDims, col: &[T], stride: usize, offset: usize, dx_b: &mut [T]) {
    let t_out = d.out_len();
    for c in 0..d.c_in {
        for tau in 0..d.k {
            let r = c * d.k + tau;
            let dst = c * d.len + tau;
            let src = r * stride + offset;
            for (o, &v) in dx_b[dst..dst + t_out].iter_mut().zip(&col[src..src + t_out]) {
                *o = *o + v;
            }
        }
    }
}

/// `out[b,o,t] = bias[o] + Σ_{c,τ} x[b,c,t+τ]·w[o,c,τ]`.
///
/// Items are unfolded side by side in groups of [`GROUP`] so each group is
/// one GEMM.
pub fn conv1d_forward<T: Scalar>(d: &ConvDims, x: &[T], w: &[T], bias: &[T], exec: Exec) -> Vec<T> {
    let t_out = d.out_len();
    let item_in = d.c_in * d.len;
    let item_out = d.c_out * t_out;
    let mut out = vec![T::zero(); d.batch * item_out];
    exec.for_each_chunk(&mut out, GROUP * item_out, |g, chunk| {
        let items = chunk.len() / item_out;
        let width = items * t_out;
        let mut col = vec![T::zero(); d.patch() * width];
        for i in 0..items {
            let b = g * GROUP + i;
            im2col(d, &x[b * item_in..(b + 1) * item_in], &mut col, width, i * t_out);
        }
        let mut y = vec![T::zero(); d.c_out * width];
        gemm(d.c_out, d.patch(), width, T::one(), w, (d.patch(), 1), &col, (width, 1), T::zero(), &mut y, (width, 1));
        for (i, out_b) in chunk.chunks_mut(item_out).enumerate() {
            for (o, row) in out_b.chunks_mut(t_out).enumerate() {
                let src = &y[o * width + i * t_out..o * width + (i + 1) * t_out];
                for (r, &v) in row.iter_mut().zip(src) {
                    *r = v + bias[o];
                }
            }
        }
    });
    out
}

/// Gradients of [`conv1d_forward`] for input, weights and bias.
pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub dbias: Vec<T>,
}

/// Weight and bias gradients are accumulated per group and the group
/// partials summed in group order, so the result does not depend on `exec`.
pub fn conv1d_backward<T: Scalar>(d: &ConvDims, x: &[T], w: &[T], dout: &[T], exec: Exec) -> ConvGrads<T> {
    let t_out = d.out_len();
    let item_in = d.c_in * d.len;
    let item_out = d.c_out * t_out;
    let wlen = d.c_out * d.patch();
    let part = wlen + d.c_out;
    let groups = d.batch.div_ceil(GROUP);
    let mut dx = vec![T::zero(); d.batch * item_in];
    let mut partials = vec![T::zero(); groups * part];

    exec.for_each_chunk2(&mut dx, GROUP * item_in, &mut partials, part, |g, dx_g, acc| {
        let (dw_acc, db_acc) = acc.split_at_mut(wlen);
        let items = dx_g.len() / item_in;
        let width = items * t_out;
        let mut col = vec![T::zero(); d.patch() * width];
        let mut dy = vec![T::zero(); d.c_out * width];
        for i in 0..items {
            let b = g * GROUP + i;
            im2col(d, &x[b * item_in..(b + 1) * item_in], &mut col, width, i * t_out);
            for (o, row) in dout[b * item_out..(b + 1) * item_out].chunks(t_out).enumerate() {
                dy[o * width + i * t_out..o * width + (i + 1) * t_out].copy_from_slice(row);
            }
        }
        // dW = dy · colᵀ
        gemm(d.c_out, width, d.patch(), T::one(), &dy, (width, 1), &col, (1, width), T::zero(), dw_acc, (d.patch(), 1));
        for (o, db) in db_acc.iter_mut().enumerate() {
            *db = dy[o * width..(o + 1) * width].iter().copied().sum();
        }
        // dcol = Wᵀ · dy, reusing the unfolded buffer
        gemm(d.patch(), d.c_out, width, T::one(), w, (1, d.patch()), &dy, (width, 1), T::zero(), &mut col, (width, 1));
        for (i, dx_b) in dx_g.chunks_mut(item_in).enumerate() {
            col2im(d, &col, width, i * t_out, dx_b);
        }
    });

    let mut dw = vec![T::zero(); wlen];
    let mut dbias = vec![T::zero(); d.c_out];
    for acc in partials.chunks(part) {
        for (a, &v) in dw.iter_mut().zip(&acc[..wlen]) {
            *a = *a + v;
        }
        for (a, &v) in dbias.iter_mut().zip(&acc[wlen..]) {
            *a = *a + v;
        }
    }
    ConvGrads { dx, dw, dbias }
}
