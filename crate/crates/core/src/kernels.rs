//! Raw slice kernels behind the tensor ops.
//!
//! All kernels accumulate into their output (`+=`), which is what the
//! backward pass needs; forward callers pass zeroed buffers. Parallel
//! variants split work so that every output element is written by exactly
//! one task, keeping results bit-identical to the serial path. The global
//! parallelism switch exists for the benchmark harness, which demands a
//! deterministic single-worker mode.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::scalar::Element;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables internal parallelism process-wide.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

/// Minimum multiply–add count before a kernel bothers with threads.
const PAR_WORK: usize = 1 << 15;

#[inline]
fn gemm_nn_row<T: Element>(scale: T, a_row: &[T], b: &[T], out_row: &mut [T], n: usize) {
    for (kk, &aik) in a_row.iter().enumerate() {
        let s = aik * scale;
        let b_row = &b[kk * n..(kk + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o = *o + s * bv;
        }
    }
}

/// out[m,n] += scale * a[m,k] @ b[k,n]
pub(crate) fn gemm_nn<T: Element>(
    scale: T,
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    if parallel_enabled() && m > 1 && m * n * k >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            gemm_nn_row(scale, &a[i * k..(i + 1) * k], b, row, n);
        });
    } else {
        for i in 0..m {
            gemm_nn_row(scale, &a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], n);
        }
    }
}

#[inline]
fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    let mut s = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        s = s + a * b;
    }
    s
}

/// out[m,p] += scale * a[m,k] @ b[p,k]^T  (dot of contiguous rows)
pub(crate) fn gemm_nt<T: Element>(
    scale: T,
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    p: usize,
) {
    let body = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (pp, o) in out_row.iter_mut().enumerate() {
            *o = *o + scale * dot(a_row, &b[pp * k..(pp + 1) * k]);
        }
    };
    if parallel_enabled() && m > 1 && m * p * k >= PAR_WORK {
        out.par_chunks_mut(p).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for i in 0..m {
            body(i, &mut out[i * p..(i + 1) * p]);
        }
    }
}

/// out[k,n] += scale * a[m,k]^T @ g[m,n]
pub(crate) fn gemm_tn<T: Element>(
    scale: T,
    a: &[T],
    g: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    let body = |kk: usize, out_row: &mut [T]| {
        for i in 0..m {
            let s = a[i * k + kk] * scale;
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o = *o + s * gv;
            }
        }
    };
    if parallel_enabled() && k > 1 && m * n * k >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, row)| body(kk, row));
    } else {
        for kk in 0..k {
            body(kk, &mut out[kk * n..(kk + 1) * n]);
        }
    }
}

/// Odometer walk over `oshape`, feeding `(flat_index, offset1)` where
/// `offset1` advances by `s1` (stride-0 axes allowed).
pub(crate) fn walk1(oshape: &[usize], s1: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = oshape.iter().product();
    if total == 0 {
        return;
    }
    let rank = oshape.len();
    let mut idx = vec![0usize; rank];
    let mut o1 = 0usize;
    for i in 0..total {
        f(i, o1);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            o1 += s1[ax];
            if idx[ax] < oshape[ax] {
                break;
            }
            idx[ax] = 0;
            o1 -= s1[ax] * oshape[ax];
        }
    }
}

/// Odometer walk tracking two stride maps.
pub(crate) fn walk2(
    oshape: &[usize],
    s1: &[usize],
    s2: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = oshape.iter().product();
    if total == 0 {
        return;
    }
    let rank = oshape.len();
    let mut idx = vec![0usize; rank];
    let (mut o1, mut o2) = (0usize, 0usize);
    for i in 0..total {
        f(i, o1, o2);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            o1 += s1[ax];
            o2 += s2[ax];
            if idx[ax] < oshape[ax] {
                break;
            }
            idx[ax] = 0;
            o1 -= s1[ax] * oshape[ax];
            o2 -= s2[ax] * oshape[ax];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_matches_triple_loop() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm_nn(1.0, &a, &b, &mut out, 2, 3, 4);
        let mut want = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for kk in 0..3 {
                    want[i * 4 + j] += a[i * 3 + kk] * b[kk * 4 + j];
                }
            }
        }
        assert_eq!(out, want);
    }

    #[test]
    fn transposed_kernels_agree_with_plain() {
        // a: 3x2, b: 4x2  =>  a @ b^T : 3x4
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect();
        let b: Vec<f64> = (0..8).map(|v| 0.25 * v as f64).collect();
        let mut nt = vec![0.0; 12];
        gemm_nt(2.0, &a, &b, &mut nt, 3, 2, 4);
        // explicit transpose then gemm_nn
        let mut bt = vec![0.0; 8]; // 2x4
        for i in 0..4 {
            for j in 0..2 {
                bt[j * 4 + i] = b[i * 2 + j];
            }
        }
        let mut nn = vec![0.0; 12];
        gemm_nn(2.0, &a, &bt, &mut nn, 3, 2, 4);
        assert_eq!(nt, nn);

        // a: 3x2, g: 3x4 => a^T @ g : 2x4
        let g: Vec<f64> = (0..12).map(|v| v as f64 * 0.1).collect();
        let mut tn = vec![0.0; 8];
        gemm_tn(1.0, &a, &g, &mut tn, 3, 2, 4);
        let mut at = vec![0.0; 6]; // 2x3
        for i in 0..3 {
            for j in 0..2 {
                at[j * 3 + i] = a[i * 2 + j];
            }
        }
        let mut nn2 = vec![0.0; 8];
        gemm_nn(1.0, &at, &g, &mut nn2, 2, 3, 4);
        assert_eq!(tn, nn2);
    }

    #[test]
    fn parallel_matches_serial() {
        let m = 64;
        let k = 48;
        let n = 40;
        let a: Vec<f32> = (0..m * k).map(|v| ((v * 37 % 101) as f32) / 7.0 - 6.0).collect();
        let b: Vec<f32> = (0..k * n).map(|v| ((v * 53 % 97) as f32) / 11.0 - 4.0).collect();
        let mut serial = vec![0.0f32; m * n];
        set_parallel(false);
        gemm_nn(1.25, &a, &b, &mut serial, m, k, n);
        set_parallel(true);
        let mut par = vec![0.0f32; m * n];
        gemm_nn(1.25, &a, &b, &mut par, m, k, n);
        assert_eq!(serial, par, "parallel gemm must be bit-identical");
    }

    #[test]
    fn odometer_covers_broadcast() {
        // target [2,3] from [3]: stride map [0,1]
        let mut seen = Vec::new();
        walk1(&[2, 3], &[0, 1], |i, o| seen.push((i, o)));
        assert_eq!(seen, vec![(0, 0), (1, 1), (2, 2), (3, 0), (4, 1), (5, 2)]);
    }
}
