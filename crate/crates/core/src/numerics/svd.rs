//! One-sided Jacobi SVD and truncated reconstruction.

use super::Matrix;
use crate::error::{Error, Result};

/// Thin SVD `M = U · diag(σ) · Vᵀ`, singular values sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    /// rows × p, p = min(rows, cols)
    pub u: Matrix,
    pub sigma: Vec<f64>,
    /// cols × p
    pub v: Matrix,
}

impl Svd {
    /// Rank-`r` reconstruction `U_r · diag(σ_r) · V_rᵀ`.
    pub fn reconstruct(&self, r: usize) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for k in 0..r.min(self.sigma.len()) {
            let s = self.sigma[k];
            for i in 0..m {
                let a = self.u.get(i, k) * s;
                if a == 0.0 {
                    continue;
                }
                let row = out.row_mut(i);
                for (j, o) in row.iter_mut().enumerate() {
                    *o += a * self.v.get(j, k);
                }
            }
        }
        out
    }
}

/// One-sided (Hestenes) Jacobi. Works on the taller orientation so the
/// orthogonalised columns number min(rows, cols).
pub fn jacobi_svd(m: &Matrix) -> Result<Svd> {
    m.ensure_finite("svd input")?;
    if m.rows() < m.cols() {
        let t = jacobi_svd(&m.transpose())?;
        return Ok(Svd { u: t.v, sigma: t.sigma, v: t.u });
    }
    let (rows, cols) = m.shape();
    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| m.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = 1e-15;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = a
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let mut u = Matrix::zeros(rows, cols);
    let mut vm = Matrix::zeros(cols, cols);
    let mut sigma = Vec::with_capacity(cols);
    for (k, &(s, j)) in order.iter().enumerate() {
        sigma.push(s);
        for i in 0..rows {
            u.set(i, k, if s > 0.0 { a[j][i] / s } else { 0.0 });
        }
        for i in 0..cols {
            vm.set(i, k, v[j][i]);
        }
    }
    Ok(Svd { u, sigma, v: vm })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Best rank-`r` approximation in Frobenius norm (truncated SVD).
pub fn svd_best_rank_r(m: &Matrix, r: usize) -> Result<Matrix> {
    let p = m.rows().min(m.cols());
    if r == 0 || r > p {
        return Err(Error::Rank(format!("rank {r} outside 1..={p} for {:?}", m.shape())));
    }
    Ok(jacobi_svd(m)?.reconstruct(r))
}

/// ‖M − best_rank_r(M)‖_F from singular values alone.
pub fn truncation_error(sigma: &[f64], r: usize) -> f64 {
    sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
}
