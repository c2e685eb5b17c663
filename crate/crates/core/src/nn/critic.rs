//! Centralized value network over the global state. Never adapted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, orthogonal, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub state_dim: usize,
    pub hidden_dim: usize,
    /// `[H×S, H×H, 1×H]`, applied as `x·Wᵀ + b`.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl CriticGrads {
    pub fn sum_sq(&self) -> f64 {
        self.weights.iter().chain(&self.biases).map(Matrix::sum_sq).sum()
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CriticTrace {
    pub input: Matrix,
    pub h1: Matrix,
    pub h2: Matrix,
}

impl CriticParams {
    pub fn zeros(state_dim: usize, hidden_dim: usize) -> Self {
        let dims = [(hidden_dim, state_dim), (hidden_dim, hidden_dim), (1, hidden_dim)];
        Self {
            state_dim,
            hidden_dim,
            weights: dims.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            biases: dims.iter().map(|&(r, _)| Matrix::zeros(1, r)).collect(),
        }
    }

    /// Orthogonal init: gain √2 on hidden layers, 1 on the value output.
    pub fn init(state_dim: usize, hidden_dim: usize, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(state_dim, hidden_dim);
        let gains = [2f64.sqrt(), 2f64.sqrt(), 1.0];
        for (w, g) in p.weights.iter_mut().zip(gains) {
            *w = orthogonal(w.rows(), w.cols(), g, rng);
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Matrix::len).sum()
    }

    /// Values for a `B × state_dim` batch.
    pub fn forward(&self, states: &Matrix) -> Result<(Vec<f64>, CriticTrace)> {
        if states.cols() != self.state_dim {
            return Err(Error::Shape(format!(
                "critic input width {} vs state dim {}",
                states.cols(),
                self.state_dim
            )));
        }
        let h1 = relu(affine(states, &self.weights[0], &self.biases[0]));
        let h2 = relu(affine(&h1, &self.weights[1], &self.biases[1]));
        let v = affine(&h2, &self.weights[2], &self.biases[2]);
        let values = v.into_vec();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("critic output".into()));
        }
        Ok((values, CriticTrace { input: states.clone(), h1, h2 }))
    }

    pub fn values(&self, states: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(states)?.0)
    }

    /// Gradients given dL/dvalue per row.
    pub fn backward(&self, trace: &CriticTrace, dvalues: &[f64]) -> Result<CriticGrads> {
        if dvalues.len() != trace.input.rows() {
            return Err(Error::Shape("critic upstream length differs from batch".into()));
        }
        let mut gw: Vec<Matrix> = self.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let mut gb: Vec<Matrix> = self.biases.iter().map(|b| Matrix::zeros(1, b.cols())).collect();
        let dv = Matrix::from_vec(dvalues.len(), 1, dvalues.to_vec())?;
        let mut dh2 = affine_backward(&dv, &trace.h2, &self.weights[2], &mut gw[2], &mut gb[2]);
        mask(&mut dh2, &trace.h2);
        let mut dh1 = affine_backward(&dh2, &trace.h1, &self.weights[1], &mut gw[1], &mut gb[1]);
        mask(&mut dh1, &trace.h1);
        let _ = affine_backward(&dh1, &trace.input, &self.weights[0], &mut gw[0], &mut gb[0]);
        Ok(CriticGrads { weights: gw, biases: gb })
    }
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul_t(w).expect("critic shapes");
    for r in 0..y.rows() {
        for (v, bb) in y.row_mut(r).iter_mut().zip(b.as_slice()) {
            *v += bb;
        }
    }
    y
}

fn relu(mut m: Matrix) -> Matrix {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    m
}

fn mask(d: &mut Matrix, post: &Matrix) {
    for (g, &a) in d.as_mut_slice().iter_mut().zip(post.as_slice()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn affine_backward(dy: &Matrix, x: &Matrix, w: &Matrix, dw: &mut Matrix, db: &mut Matrix) -> Matrix {
    for b in 0..dy.rows() {
        for (o, &g) in dy.row(b).iter().enumerate() {
            if g != 0.0 {
                axpy(g, x.row(b), dw.row_mut(o));
            }
        }
        for (acc, &g) in db.as_mut_slice().iter_mut().zip(dy.row(b)) {
            *acc += g;
        }
    }
    dy.matmul(w).expect("critic shapes")
}
