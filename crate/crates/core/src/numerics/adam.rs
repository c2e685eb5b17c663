use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`. `eps` defaults to 1e-5 elsewhere.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>, lr: f64, eps: f64) -> Self {
        let first_moment: Vec<Matrix> =
            params.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let second_moment = first_moment.clone();
        Self { first_moment, second_moment, step: 0, lr, beta1: 0.9, beta2: 0.999, eps }
    }

    /// In-place Adam update with bias correction.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            g.ensure_finite("adam gradient")?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].as_mut_slice();
            let v = self.second_moment[i].as_mut_slice();
            for (((pj, &gj), mj), vj) in
                p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::update`].
pub fn adam_step(
    params: &[Matrix],
    grads: &[Matrix],
    state: &AdamState,
) -> Result<(Vec<Matrix>, AdamState)> {
    let mut out: Vec<Matrix> = params.to_vec();
    let mut state = state.clone();
    {
        let mut refs: Vec<&mut Matrix> = out.iter_mut().collect();
        let grefs: Vec<&Matrix> = grads.iter().collect();
        state.update(&mut refs, &grefs)?;
    }
    Ok((out, state))
}
