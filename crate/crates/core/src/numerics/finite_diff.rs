use super::Matrix;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of a set of matrices.
pub fn finite_diff_gradient<F>(mut f: F, x: &[Matrix], h: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grads: Vec<Matrix> = x.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    for k in 0..x.len() {
        for idx in 0..x[k].len() {
            let orig = probe[k].as_slice()[idx];
            probe[k].as_mut_slice()[idx] = orig + h;
            let fp = f(&probe);
            probe[k].as_mut_slice()[idx] = orig - h;
            let fm = f(&probe);
            probe[k].as_mut_slice()[idx] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("objective at slot {k}[{idx}]")));
            }
            grads[k].as_mut_slice()[idx] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// max |a − b| / max(|a|, |b|, floor) over all entries.
pub fn max_relative_error(a: &[Matrix], b: &[Matrix], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (ma, mb) in a.iter().zip(b) {
        for (&x, &y) in ma.as_slice().iter().zip(mb.as_slice()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
