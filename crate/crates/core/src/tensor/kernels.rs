//! Row-major f32 GEMM kernels.
//!
//! Every output row is computed by a single thread with a fixed accumulation
//! order, so results are bit-identical regardless of the rayon pool size.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn for_rows(out: &mut [f32], row_len: usize, work: usize, f: impl Fn(usize, &mut [f32]) + Sync) {
    if row_len == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `a[m,k] @ b[k,n]`
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for_rows(&mut out, n, m * k * n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    });
    out
}

/// `a[m,k] @ b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for_rows(&mut out, n, m * k * n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `a[r,m]^T @ b[r,n]`
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], r: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for_rows(&mut out, n, r * m * n, |p, row| {
        for q in 0..r {
            let av = a[q * m + p];
            if av != 0.0 {
                axpy(av, &b[q * n..(q + 1) * n], row);
            }
        }
    });
    out
}
