//! Reverse-mode automatic differentiation tensor core.
//!
//! All math runs in 64-bit floats on row-major buffers. A [`Graph`] records
//! operations as they execute; [`Graph::backward`] replays them in reverse.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheckInput};
pub use graph::{Graph, NodeId, Op, Tensor};

/// Work threshold (m*k*n) above which matmul rows are computed on the pool.
const PAR_MIN_FLOPS: usize = 1 << 20;

/// C[m,n] = A[m,k] * B[k,n], sequential.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        crow.iter_mut().for_each(|c| *c = 0.0);
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n], parallel over output rows when large enough.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    {
        if m > 1 && m * k * n >= PAR_MIN_FLOPS {
            use rayon::prelude::*;
            out.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
                let arow = &a[i * k..(i + 1) * k];
                crow.iter_mut().for_each(|c| *c = 0.0);
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                        *c += av * bv;
                    }
                }
            });
            return;
        }
    }
    matmul_seq(a, b, m, k, n, out);
}

/// C[m,n] = A[m,k] * B[n,k]^T, sequential.
pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T, parallel over output rows when large enough.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    {
        if m > 1 && m * k * n >= PAR_MIN_FLOPS {
            use rayon::prelude::*;
            out.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
                let arow = &a[i * k..(i + 1) * k];
                for (j, c) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (&x, &y) in arow.iter().zip(brow.iter()) {
                        s += x * y;
                    }
                    *c = s;
                }
            });
            return;
        }
    }
    matmul_nt_seq(a, b, m, k, n, out);
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        matmul_seq(&i2, &x, 2, 2, 2, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn matmul_known_product() {
        // [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut out = [0.0; 2];
        matmul_seq(&a, &b, 2, 2, 1, &mut out);
        assert_eq!(out, [17.0, 39.0]);
    }

    #[test]
    fn par_and_seq_agree_bitwise() {
        let mut rng = crate::rng::Rng::new(42);
        let (m, k, n) = (64, 33, 57);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        matmul_seq(&a, &b, m, k, n, &mut c1);
        matmul(&a, &b, m, k, n, &mut c2);
        assert_eq!(c1, c2);
        let mut d1 = vec![0.0; m * m];
        let mut d2 = vec![0.0; m * m];
        // reuse a as both operands of the NT product
        let at: Vec<f64> = a.clone();
        matmul_nt_seq(&a, &at, m, k, m, &mut d1);
        matmul_nt(&a, &at, m, k, m, &mut d2);
        assert_eq!(d1, d2);
    }
}
