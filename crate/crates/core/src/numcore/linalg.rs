//! Dense row-major kernels. Work is split into fixed-size row chunks so the
//! floating point result never depends on the number of worker threads.

use rayon::prelude::*;

use super::real::Real;

/// Rows per parallel task for row-independent kernels.
pub const ROW_CHUNK: usize = 64;
/// Rows per partial sum for kernels that reduce over rows.
pub const REDUCE_CHUNK: usize = 1024;

/// `out = a · b` with `a: m×k`, `b: k×n`.
pub fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    out.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * k))
        .for_each(|(o, a)| {
            let rows = o.len() / n;
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                a,
                k as isize,
                1,
                b,
                n as isize,
                1,
                T::zero(),
                o,
                n as isize,
                1,
            );
        });
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(out.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    out.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * k))
        .for_each(|(o, a)| {
            let rows = o.len() / n;
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                a,
                k as isize,
                1,
                b,
                1,
                k as isize,
                T::one(),
                o,
                n as isize,
                1,
            );
        });
}

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`, reducing over the `m` rows.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(out.len(), k * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let partials: Vec<Vec<T>> = a
        .par_chunks(REDUCE_CHUNK * k)
        .zip(b.par_chunks(REDUCE_CHUNK * n))
        .map(|(a, b)| {
            let rows = a.len() / k;
            let mut p = vec![T::zero(); k * n];
            T::gemm(
                k,
                rows,
                n,
                T::one(),
                a,
                1,
                k as isize,
                b,
                n as isize,
                1,
                T::zero(),
                &mut p,
                n as isize,
                1,
            );
            p
        })
        .collect();
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
}

/// Column sums of an `m×n` matrix added into `out`.
pub fn col_sum_acc<T: Real>(a: &[T], out: &mut [T], m: usize, n: usize) {
    assert_eq!(a.len(), m * n);
    assert_eq!(out.len(), n);
    if n == 0 {
        return;
    }
    let partials: Vec<Vec<T>> = a
        .par_chunks(REDUCE_CHUNK * n)
        .map(|rows| {
            let mut p = vec![T::zero(); n];
            for row in rows.chunks_exact(n) {
                for (p, v) in p.iter_mut().zip(row) {
                    *p += *v;
                }
            }
            p
        })
        .collect();
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn seq(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + seed) * 0.7311).sin()).collect()
    }

    #[test]
    fn kernels_agree_with_loops() {
        let (m, k, n) = (150, 7, 5);
        let a = seq(m * k, 1.0);
        let b = seq(k * n, 2.0);
        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·c against a transposed copy
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut g = vec![0.0; k * n];
        let d = seq(m * n, 3.0);
        matmul_tn_acc(&a, &d, &mut g, m, k, n);
        let want = naive(&at, &d, k, m, n);
        for (x, y) in g.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10);
        }

        // d·bᵀ with b: k×n, checked against an explicit transpose
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut h = vec![0.0; m * k];
        matmul_nt_acc(&d, &b, &mut h, m, n, k);
        let want = naive(&d, &bt, m, n, k);
        for (x, y) in h.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
