//! Dense kernels shared by the autodiff engine and the similarity tracker.
//!
//! Every kernel partitions its output by rows and computes each row with the
//! same sequential inner loop, so the rayon path and the sequential fallback
//! produce bit-identical results regardless of thread count.

use crate::tensor::Real;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 15;

/// Runs `f(row_index, row)` over every `cols`-wide row of `out`.
///
/// `work` is an estimate of the multiply-adds involved and only decides
/// whether fanning out to the rayon pool is worthwhile.
pub fn for_each_row<F>(out: &mut [Real], cols: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [Real]) + Send + Sync,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= PAR_MIN_WORK && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    out.chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `0..n`, in parallel when the feature is on, preserving order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if n > 1 && rayon::current_num_threads() > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[inline]
fn axpy(alpha: Real, x: &[Real], y: &mut [Real]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn nn_row(a_row: &[Real], b: &[Real], n: usize, out: &mut [Real]) {
    out.fill(0.0);
    for (kk, &aik) in a_row.iter().enumerate() {
        if aik != 0.0 {
            axpy(aik, &b[kk * n..(kk + 1) * n], out);
        }
    }
}

#[inline]
fn tn_row(i: usize, a: &[Real], m: usize, b: &[Real], n: usize, out: &mut [Real]) {
    out.fill(0.0);
    for (kk, b_row) in b.chunks_exact(n.max(1)).enumerate() {
        let aki = a[kk * m + i];
        if aki != 0.0 {
            axpy(aki, b_row, out);
        }
    }
}

pub fn transpose(a: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `a[m,k] · b[k,n]`.
pub fn matmul_nn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        nn_row(&a[i * k..(i + 1) * k], b, n, row)
    });
    out
}

/// Sequential reference for [`matmul_nn`].
pub fn matmul_nn_seq(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
        nn_row(&a[i * k..(i + 1) * k], b, n, row);
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let bt = transpose(b, n, k);
    matmul_nn(a, &bt, m, k, n)
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| tn_row(i, a, m, b, n, row));
    out
}

/// Sequential reference for [`matmul_tn`].
pub fn matmul_tn_seq(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    debug_assert_eq!(a.len(), k * m);
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
        tn_row(i, a, m, b, n, row);
    }
    out
}

/// Gram matrix `hᵀh` of a `[rows, cols]` activation block (one column per neuron).
pub fn gram(h: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    matmul_tn(h, h, cols, rows, cols)
}

pub fn gram_seq(h: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    matmul_tn_seq(h, h, cols, rows, cols)
}
