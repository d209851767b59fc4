//! Matrix multiply with a fixed per-element summation order.
//!
//! Every output `c[i][j]` is accumulated as `c[i][j] += a[i][p] * b[p][j]` for
//! `p = 0, 1, .., k-1` in order, with a separate multiply and add (no fused
//! multiply-add). Results are therefore bit-identical to a textbook triple loop
//! that starts from the same `c`, independent of the tiling below. Vector lanes
//! run across `j`, never across `p`.

use crate::tensor::Scalar;

const MR: usize = 4;
const NR: usize = 64;

#[inline(always)]
fn micro_kernel<T: Scalar, const R: usize>(
    k: usize,
    a: &[T],
    lda: usize,
    panel: &[T],
    acc: &mut [[T; NR]; R],
) {
    let mut local = *acc;
    for (p, brow) in panel.chunks_exact(NR).take(k).enumerate() {
        let brow: &[T; NR] = brow.try_into().unwrap();
        for r in 0..R {
            let av = a[r * lda + p];
            for j in 0..NR {
                local[r][j] += av * brow[j];
            }
        }
    }
    *acc = local;
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs extent");
    assert_eq!(b.len(), k * n, "gemm: rhs extent");
    assert_eq!(c.len(), m * n, "gemm: output extent");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut panel = vec![T::zero(); k * NR];
    let mut j0 = 0;
    while j0 < n {
        let nw = NR.min(n - j0);
        for p in 0..k {
            let dst = &mut panel[p * NR..(p + 1) * NR];
            dst[..nw].copy_from_slice(&b[p * n + j0..p * n + j0 + nw]);
            dst[nw..].fill(T::zero());
        }
        let mut i0 = 0;
        while i0 + MR <= m {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                let off = (i0 + r) * n + j0;
                row[..nw].copy_from_slice(&c[off..off + nw]);
            }
            micro_kernel::<T, MR>(k, &a[i0 * k..], k, &panel, &mut acc);
            for (r, row) in acc.iter().enumerate() {
                let off = (i0 + r) * n + j0;
                c[off..off + nw].copy_from_slice(&row[..nw]);
            }
            i0 += MR;
        }
        while i0 < m {
            let mut acc = [[T::zero(); NR]; 1];
            let off = i0 * n + j0;
            acc[0][..nw].copy_from_slice(&c[off..off + nw]);
            micro_kernel::<T, 1>(k, &a[i0 * k..], k, &panel, &mut acc);
            c[off..off + nw].copy_from_slice(&acc[0][..nw]);
            i0 += 1;
        }
        j0 += NR;
    }
}

/// `a[m×k] · b[k×n]` into a fresh buffer.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(m, k, n, a, b, &mut c);
    c
}
