//! Matrix kernels behind the autograd graph. All kernels accumulate into
//! their output and compute each output row with a fixed operation order, so
//! results are bit-identical regardless of thread count or batch packing.
//!
//! The row kernels process four output rows per pass to reuse the B operand
//! from cache, and use `mul_add` when the target has fused multiply-add.

use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 16;

#[cfg(target_feature = "fma")]
#[inline(always)]
fn fma(a: f32, b: f32, c: f32) -> f32 {
    a.mul_add(b, c)
}

#[cfg(not(target_feature = "fma"))]
#[inline(always)]
fn fma(a: f32, b: f32, c: f32) -> f32 {
    a * b + c
}

/// out (m,n) += A (m,k) . B (k,n)
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let quad = |i0: usize, rows: &mut [f32]| {
        let quad_len = rows.len() / n;
        match quad_len {
            4 => {
                let (r0, rest) = rows.split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                for kk in 0..k {
                    let a0 = a[i0 * k + kk];
                    let a1 = a[(i0 + 1) * k + kk];
                    let a2 = a[(i0 + 2) * k + kk];
                    let a3 = a[(i0 + 3) * k + kk];
                    let brow = &b[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        let bj = brow[j];
                        r0[j] = fma(a0, bj, r0[j]);
                        r1[j] = fma(a1, bj, r1[j]);
                        r2[j] = fma(a2, bj, r2[j]);
                        r3[j] = fma(a3, bj, r3[j]);
                    }
                }
            }
            _ => {
                for (d, row) in rows.chunks_mut(n).enumerate() {
                    let i = i0 + d;
                    for kk in 0..k {
                        let aik = a[i * k + kk];
                        if aik != 0.0 {
                            axpy(aik, &b[kk * n..(kk + 1) * n], row);
                        }
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(4 * n).enumerate().for_each(|(q, rows)| quad(q * 4, rows));
    } else {
        for (q, rows) in out.chunks_mut(4 * n).enumerate() {
            quad(q * 4, rows);
        }
    }
}

/// out (m,n) += A (m,k) . B^T where B is stored (n,k)
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f32]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// out (k,n) += A^T . B where A is stored (m,k) and B is (m,n)
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let quad = |kk0: usize, rows: &mut [f32]| {
        let quad_len = rows.len() / n;
        match quad_len {
            4 => {
                let (r0, rest) = rows.split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                for i in 0..m {
                    let a0 = a[i * k + kk0];
                    let a1 = a[i * k + kk0 + 1];
                    let a2 = a[i * k + kk0 + 2];
                    let a3 = a[i * k + kk0 + 3];
                    let brow = &b[i * n..(i + 1) * n];
                    for j in 0..n {
                        let bj = brow[j];
                        r0[j] = fma(a0, bj, r0[j]);
                        r1[j] = fma(a1, bj, r1[j]);
                        r2[j] = fma(a2, bj, r2[j]);
                        r3[j] = fma(a3, bj, r3[j]);
                    }
                }
            }
            _ => {
                for (d, row) in rows.chunks_mut(n).enumerate() {
                    let kk = kk0 + d;
                    for i in 0..m {
                        let v = a[i * k + kk];
                        if v != 0.0 {
                            axpy(v, &b[i * n..(i + 1) * n], row);
                        }
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(4 * n).enumerate().for_each(|(q, rows)| quad(q * 4, rows));
    } else {
        for (q, rows) in out.chunks_mut(4 * n).enumerate() {
            quad(q * 4, rows);
        }
    }
}

/// dst (cols,rows) = transpose of src (rows,cols)
pub fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = fma(alpha, xi, *yi);
    }
}

/// Dot product with eight fixed accumulator lanes (deterministic order).
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            acc[l] = fma(a[base + l], b[base + l], acc[l]);
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..a.len() {
        s = fma(a[i], b[i], s);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for kk in 0..k {
                    s += a[i * k + kk] as f64 * b[kk * n + j] as f64;
                }
                out[i * n + j] = s as f32;
            }
        }
        out
    }

    fn pseudo_random(len: usize, seed: u64) -> Vec<f32> {
        let mut state = seed;
        (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f32 / (1u64 << 31) as f32) - 0.5
            })
            .collect()
    }

    #[test]
    fn nn_matches_naive_various_shapes() {
        for &(m, k, n) in &[(7usize, 5usize, 9usize), (8, 8, 8), (13, 16, 4), (4, 3, 32), (1, 1, 1), (6, 128, 40)] {
            let a = pseudo_random(m * k, 1 + (m * k) as u64);
            let b = pseudo_random(k * n, 2 + (k * n) as u64);
            let mut out = vec![0.0; m * n];
            matmul_nn(&a, &b, m, k, n, &mut out);
            let expect = naive_nn(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-4, "({m},{k},{n})");
            }
        }
    }

    #[test]
    fn nt_and_tn_match_transposed_naive() {
        let (m, k, n) = (6, 8, 4);
        let a = pseudo_random(m * k, 3);
        let b_t = pseudo_random(n * k, 4); // logical B^T stored (n, k)
        let mut out = vec![0.0; m * n];
        matmul_nt(&a, &b_t, m, k, n, &mut out);
        // materialize B (k, n)
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for kk in 0..k {
                b[kk * n + j] = b_t[j * k + kk];
            }
        }
        let expect = naive_nn(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-5);
        }

        // A^T . B2 with A (m, k): result (k, n2)
        for n2 in [3usize, 8, 17] {
            let b2 = pseudo_random(m * n2, 5);
            let mut out2 = vec![0.0; k * n2];
            matmul_tn(&a, &b2, m, k, n2, &mut out2);
            let mut a_t = vec![0.0; k * m];
            for i in 0..m {
                for kk in 0..k {
                    a_t[kk * m + i] = a[i * k + kk];
                }
            }
            let expect2 = naive_nn(&a_t, &b2, k, m, n2);
            for (x, y) in out2.iter().zip(&expect2) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tn_handles_k_not_divisible_by_four() {
        let (m, k, n) = (9, 7, 5);
        let a = pseudo_random(m * k, 6);
        let b = pseudo_random(m * n, 7);
        let mut out = vec![0.0; k * n];
        matmul_tn(&a, &b, m, k, n, &mut out);
        let mut a_t = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                a_t[kk * m + i] = a[i * k + kk];
            }
        }
        let expect = naive_nn(&a_t, &b, k, m, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn parallel_and_serial_paths_agree_bitwise() {
        // Large enough to cross PAR_THRESHOLD; row count not a multiple of 4.
        let (m, k, n) = (130, 64, 96);
        let a = pseudo_random(m * k, 7);
        let b = pseudo_random(k * n, 8);
        let mut big = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut big);
        // Serial reference with the same per-quad op order as the kernel.
        let mut serial = vec![0.0; m * n];
        for (q, rows) in serial.chunks_mut(4 * n).enumerate() {
            let i0 = q * 4;
            if rows.len() / n == 4 {
                let (r0, rest) = rows.split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                for kk in 0..k {
                    let brow = &b[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        r0[j] = fma(a[i0 * k + kk], brow[j], r0[j]);
                        r1[j] = fma(a[(i0 + 1) * k + kk], brow[j], r1[j]);
                        r2[j] = fma(a[(i0 + 2) * k + kk], brow[j], r2[j]);
                        r3[j] = fma(a[(i0 + 3) * k + kk], brow[j], r3[j]);
                    }
                }
            } else {
                for (d, row) in rows.chunks_mut(n).enumerate() {
                    for kk in 0..k {
                        let aik = a[(i0 + d) * k + kk];
                        if aik != 0.0 {
                            axpy(aik, &b[kk * n..(kk + 1) * n], row);
                        }
                    }
                }
            }
        }
        assert_eq!(big, serial);
    }
}
