//! Dense kernels shared by `Tensor` and the tape.

use crate::par;

/// Rows per independent GEMM block. Fixed so the partition, and therefore
/// every rounding decision, is the same with or without the thread pool.
const ROW_BLOCK: usize = 64;
const PAR_MIN_FLOPS: usize = 1 << 18;

/// `C[m,n] = A[m,k] * B[k,n]`, overwriting `c`. Strides are in elements and
/// allow transposed views without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let block = |row0: usize, c_block: &mut [f64]| {
        let rows = c_block.len() / n;
        // SAFETY: the block covers rows [row0, row0 + rows) of A and C;
        // all strides stay within the slices checked by the callers.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(row0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n >= PAR_MIN_FLOPS && m > ROW_BLOCK {
        par::for_each_chunk_mut(c, ROW_BLOCK * n, |i, chunk| block(i * ROW_BLOCK, chunk));
    } else {
        for (i, chunk) in c.chunks_mut(ROW_BLOCK * n).enumerate() {
            block(i * ROW_BLOCK, chunk);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn blocked_gemm_matches_naive_across_block_boundary() {
        let (m, k, n) = (150, 70, 33);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 11) as f64 - 5.0) / 3.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, k, 1, &b, n, 1, &mut c);
        let want = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_strides() {
        // A^T where A is stored [k, m].
        let (m, k, n) = (3, 2, 2);
        let a_t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a_t, 1, m, &b, n, 1, &mut c);
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
