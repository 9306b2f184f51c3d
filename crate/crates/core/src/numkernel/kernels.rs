//! Raw row-major matrix kernels.
//!
//! Output rows are computed independently with a fixed inner reduction
//! order, so results are bit-identical whatever the rayon pool size.

use rayon::prelude::*;

use super::counter;

const PAR_THRESHOLD: usize = 1 << 16;

/// `a[m x k] * b[k x n]`. Counted.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [f64])| -> u64 {
        let ar = &a[i * k..(i + 1) * k];
        let mut done = 0u64;
        for (kk, &av) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
            done += n as u64;
        }
        done
    };
    let done: u64 = if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().map(row).sum()
    } else {
        out.chunks_mut(n).enumerate().map(row).sum()
    };
    counter::add_madds(done);
    out
}

/// `a[m x k] * b[n x k]^T -> [m x n]`. Not counted (backward use).
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, ov) in o.iter_mut().enumerate() {
            *ov = dot(ar, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m x k]^T * g[m x n] -> [k x n]`. Not counted (backward use).
pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    let mut out = vec![0.0; k * n];
    if n == 0 {
        return out;
    }
    let row = |(kk, o): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for (ov, gv) in o.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                *ov += av * gv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Four-lane dot product; lane order is fixed so the result is deterministic.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numerically stable in-place softmax of one slice.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}
