//! Raw buffer kernels shared by the tape ops.

use super::{numel, Scalar};
use crate::error::{Error, Result};

/// Products below this many multiply-adds use the plain loops; the packed
/// kernel's setup cost dominates there.
const SMALL_GEMM: usize = 4096;

/// `c[m, n] += a[m, k] * b[k, n]`
pub(crate) fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m * k * n >= SMALL_GEMM {
        // SAFETY: the assert above bounds every row-major index.
        unsafe {
            S::gemm_raw(m, k, n, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, c.as_mut_ptr(), n as isize, 1);
        }
        return;
    }
    if n == 1 {
        for (i, ci) in c[..m].iter_mut().enumerate() {
            let row = &a[i * k..(i + 1) * k];
            let mut acc = S::zero();
            for (x, y) in row.iter().zip(&b[..k]) {
                acc += *x * *y;
            }
            *ci += acc;
        }
        return;
    }
    for (i, crow) in c[..m * n].chunks_exact_mut(n).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (&aip, brow) in arow.iter().zip(b[..k * n].chunks_exact(n)) {
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m, n] += a[k, m]^T * b[k, n]`
pub(crate) fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m * k * n >= SMALL_GEMM {
        // SAFETY: the assert above bounds every index of the transposed view.
        unsafe {
            S::gemm_raw(m, k, n, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, c.as_mut_ptr(), n as isize, 1);
        }
        return;
    }
    for (arow, brow) in a[..k * m].chunks_exact(m).zip(b[..k * n].chunks_exact(n)) {
        for (&api, crow) in arow.iter().zip(c[..m * n].chunks_exact_mut(n)) {
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`
pub(crate) fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m * k * n >= SMALL_GEMM {
        // SAFETY: the assert above bounds every index of the transposed view.
        unsafe {
            S::gemm_raw(m, k, n, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, c.as_mut_ptr(), n as isize, 1);
        }
        return;
    }
    let bt = transpose2(n, k, &b[..n * k]);
    gemm_nn(m, k, n, a, &bt, c);
}

pub(crate) fn transpose2<S: Scalar>(rows: usize, cols: usize, src: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn check_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<()> {
    if axes.len() != rank {
        return Err(Error::invalid(
            op,
            format!("expected {rank} axes, got {axes:?}"),
        ));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::Axis { op, axis: a, rank });
        }
        if seen[a] {
            return Err(Error::invalid(op, format!("repeated axis in {axes:?}")));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn permute<S: Scalar>(
    data: &[S],
    shape: &[usize],
    axes: &[usize],
) -> Result<(Vec<S>, Vec<usize>)> {
    check_axes("permute", axes, shape.len())?;
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return Ok((data.to_vec(), out_shape));
    }
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    Ok((gather_strided(data, &out_shape, &src_strides), out_shape))
}

/// Walks `out_shape` in row-major order, reading `data` through `src_strides`.
/// A zero stride repeats the source along that axis.
pub(crate) fn gather_strided<S: Scalar>(
    data: &[S],
    out_shape: &[usize],
    src_strides: &[usize],
) -> Vec<S> {
    let total = numel(out_shape);
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if last_stride == 1 {
            out.extend_from_slice(&data[base..base + last_len]);
        } else {
            for j in 0..last_len {
                out.push(data[base + j * last_stride]);
            }
        }
        // odometer over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Adjoint of [`gather_strided`]: accumulates `grad` back into `dst`.
pub(crate) fn scatter_add_strided<S: Scalar>(
    grad: &[S],
    out_shape: &[usize],
    src_strides: &[usize],
    dst: &mut [S],
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        dst[0] += grad[0];
        return;
    }
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut pos = 0usize;
    loop {
        for j in 0..last_len {
            dst[base + j * last_stride] += grad[pos + j];
        }
        pos += last_len;
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Numpy-style broadcast of two batch shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading a tensor of `shape` as if broadcast to `target`.
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let pad = target.len() - shape.len();
    let own = strides(shape);
    (0..target.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}
