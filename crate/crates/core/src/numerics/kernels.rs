//! Matrix-product kernels on row-major slices.
//!
//! Large products are split over output rows with rayon. Each output row is
//! reduced sequentially in a fixed order, so the parallel result is
//! bit-identical to the sequential one.

use rayon::prelude::*;

use super::Scalar;

const PAR_THRESHOLD: usize = 1 << 16;

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    let row = |(i, out_row): (usize, &mut [S])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD && n > 1 {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    let row = |(i, out_row): (usize, &mut [S])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    };
    if n * k * m >= PAR_THRESHOLD && n > 1 {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
}

/// `out[n×m] += a[k×n]ᵀ · b[k×m]`
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    let row = |(i, out_row): (usize, &mut [S])| {
        for p in 0..k {
            let av = a[p * n + i];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD && n > 1 {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (n, k, m) = (5, 7, 3);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, n, k, m);

        let mut out = vec![0.0; n * m];
        gemm_nn(&a, &b, &mut out, n, k, m);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut out = vec![0.0; n * m];
        gemm_nt(&a, &transpose(&b, k, m), &mut out, n, k, m);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut out = vec![0.0; n * m];
        gemm_tn(&transpose(&a, n, k), &b, &mut out, n, k, m);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn parallel_path_is_bitwise_sequential() {
        let (n, k, m) = (64, 64, 32);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.013).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.029).cos()).collect();
        let mut par = vec![0.0; n * m];
        gemm_nn(&a, &b, &mut par, n, k, m);
        let mut seq = vec![0.0; n * m];
        for i in 0..n {
            gemm_nn(&a[i * k..(i + 1) * k], &b, &mut seq[i * m..(i + 1) * m], 1, k, m);
        }
        assert_eq!(par, seq);
    }
}
