//! Linear algebra, random streams, optimisation and gradient checking.

mod adam;
mod finite_diff;
mod matrix;
mod rng;
mod svd;

pub use adam::{adam_step, AdamState};
pub use finite_diff::{finite_diff_gradient, max_relative_error};
pub use matrix::{axpy, dot, frobenius_norm, Matrix};
pub use rng::RngStream;
pub use svd::{jacobi_svd, svd_best_rank_r, truncation_error, Svd};

/// Orthogonal matrix of the given shape scaled by `gain`.
///
/// Rows are orthonormal when `rows <= cols`, columns otherwise. Built from a
/// Householder QR of a Gaussian matrix with the sign of `diag(R)` folded in.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut RngStream) -> Matrix {
    let (m, n) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // Tall m×n Gaussian, column-major.
    let mut a: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.normal()).collect()).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut signs = Vec::with_capacity(n);
    for k in 0..n {
        let x = &a[k][k..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vn = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vn > 0.0 {
            v.iter_mut().for_each(|t| *t /= vn);
        }
        for col in a.iter_mut().skip(k) {
            let d: f64 = col[k..].iter().zip(&v).map(|(c, vi)| c * vi).sum();
            for (c, vi) in col[k..].iter_mut().zip(&v) {
                *c -= 2.0 * d * vi;
            }
        }
        signs.push(if a[k][k] >= 0.0 { 1.0 } else { -1.0 });
        reflectors.push(v);
    }
    // Q = H_0 · H_1 ⋯ H_{n-1} applied to the first n unit vectors.
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in q.iter_mut() {
        for k in (0..n).rev() {
            let v = &reflectors[k];
            let d: f64 = col[k..].iter().zip(v).map(|(c, vi)| c * vi).sum();
            for (c, vi) in col[k..].iter_mut().zip(v) {
                *c -= 2.0 * d * vi;
            }
        }
    }
    let tall = Matrix::from_fn(m, n, |i, j| gain * signs[j] * q[j][i]);
    if rows >= cols {
        tall
    } else {
        tall.transpose()
    }
}
