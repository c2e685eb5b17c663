//! Categorical and tanh-squashed diagonal Gaussian action distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Added inside the log of the tanh Jacobian.
pub const SQUASH_EPS: f64 = 1e-6;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;
/// ½·log(2πe)
pub const GAUSSIAN_ENTROPY_CONST: f64 = 1.418_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DistParams {
    Discrete { logits: Vec<f64> },
    /// Pre-squash Gaussian; `log_std` is already clamped.
    Continuous { mean: Vec<f64>, log_std: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }

    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

/// An action together with the quantities the trainer stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub action: Action,
    /// Gaussian draw before `tanh`; empty for discrete actions.
    pub presquash: Vec<f64>,
    pub log_prob: f64,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `tanh(u)` kept strictly inside (−1, 1).
fn squash(u: f64) -> f64 {
    let a = u.tanh();
    let bound = 1.0 - f64::EPSILON;
    a.clamp(-bound, bound)
}

pub fn sample(dist: &DistParams, mode: SampleMode, rng: &mut RngStream) -> Sample {
    match dist {
        DistParams::Discrete { logits } => {
            let logp = log_softmax(logits);
            let a = match mode {
                SampleMode::Deterministic => argmax(logits),
                SampleMode::Stochastic => {
                    let u = rng.uniform();
                    let mut acc = 0.0;
                    let mut pick = logp.len() - 1;
                    for (i, lp) in logp.iter().enumerate() {
                        acc += lp.exp();
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            };
            Sample { action: Action::Discrete(a), presquash: Vec::new(), log_prob: logp[a] }
        }
        DistParams::Continuous { mean, log_std } => {
            let u: Vec<f64> = match mode {
                SampleMode::Deterministic => mean.clone(),
                SampleMode::Stochastic => mean
                    .iter()
                    .zip(log_std)
                    .map(|(m, ls)| m + ls.exp() * rng.normal())
                    .collect(),
            };
            let log_prob = squashed_log_prob(mean, log_std, &u);
            let action = Action::Continuous(u.iter().map(|&x| squash(x)).collect());
            Sample { action, presquash: u, log_prob }
        }
    }
}

pub fn sample_action(dist: &DistParams, mode: SampleMode, rng: &mut RngStream) -> (Action, f64) {
    let s = sample(dist, mode, rng);
    (s.action, s.log_prob)
}

/// Log-density of `a = tanh(u)` given the pre-squash draw `u`.
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], u: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((&m, &ls), &x) in mean.iter().zip(log_std).zip(u) {
        let z = (x - m) / ls.exp();
        let t = x.tanh();
        lp += -0.5 * z * z - ls - HALF_LOG_2PI - (1.0 - t * t + SQUASH_EPS).ln();
    }
    lp
}

pub fn categorical_entropy(logits: &[f64]) -> f64 {
    let logp = log_softmax(logits);
    -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

/// Pre-squash Gaussian entropy, used as the entropy of the squashed policy.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + GAUSSIAN_ENTROPY_CONST).sum()
}

pub fn entropy(dist: &DistParams) -> f64 {
    match dist {
        DistParams::Discrete { logits } => categorical_entropy(logits),
        DistParams::Continuous { log_std, .. } => gaussian_entropy(log_std),
    }
}

/// Log-probability of an environment-space action and the distribution's entropy.
pub fn evaluate_logprob_entropy(dist: &DistParams, action: &Action) -> Result<(f64, f64)> {
    match (dist, action) {
        (DistParams::Discrete { logits }, Action::Discrete(a)) => {
            if *a >= logits.len() {
                return Err(Error::InvalidArgument(format!(
                    "action {a} outside 0..{}",
                    logits.len()
                )));
            }
            Ok((log_softmax(logits)[*a], categorical_entropy(logits)))
        }
        (DistParams::Continuous { mean, log_std }, Action::Continuous(a)) => {
            if a.len() != mean.len() {
                return Err(Error::Shape(format!("action dim {} vs {}", a.len(), mean.len())));
            }
            if a.iter().any(|x| !(x.abs() < 1.0)) {
                return Err(Error::InvalidArgument("continuous action outside (-1, 1)".into()));
            }
            let u: Vec<f64> = a.iter().map(|x| x.atanh()).collect();
            Ok((squashed_log_prob(mean, log_std, &u), gaussian_entropy(log_std)))
        }
        _ => Err(Error::InvalidArgument("action kind does not match distribution".into())),
    }
}

/// Gradients of `w_lp · log π(a) + w_ent · H` with respect to the head outputs.
///
/// Discrete: returns d/dlogits. Continuous: returns (d/dmean, d/dlog_std), where
/// `log_std` is the clamped value; the caller masks the clamp.
pub fn categorical_grads(logits: &[f64], action: usize, w_lp: f64, w_ent: f64) -> Vec<f64> {
    let logp = log_softmax(logits);
    let h = -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
    logp.iter()
        .enumerate()
        .map(|(j, lp)| {
            let p = lp.exp();
            let onehot = if j == action { 1.0 } else { 0.0 };
            w_lp * (onehot - p) - w_ent * p * (lp + h)
        })
        .collect()
}

pub fn gaussian_grads(
    mean: &[f64],
    log_std: &[f64],
    u: &[f64],
    w_lp: f64,
    w_ent: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut dm = Vec::with_capacity(mean.len());
    let mut ds = Vec::with_capacity(mean.len());
    for ((&m, &ls), &x) in mean.iter().zip(log_std).zip(u) {
        let inv_var = (-2.0 * ls).exp();
        let d = x - m;
        dm.push(w_lp * d * inv_var);
        ds.push(w_lp * (d * d * inv_var - 1.0) + w_ent);
    }
    (dm, ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_deterministic_tie_break() {
        let d = DistParams::Discrete { logits: vec![0.0; 3] };
        let mut rng = RngStream::new(0, 0);
        let (a, lp) = sample_action(&d, SampleMode::Deterministic, &mut rng);
        assert_eq!(a, Action::Discrete(0));
        assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_logprob_and_entropy() {
        for n in [2usize, 5, 9] {
            let d = DistParams::Discrete { logits: vec![0.3; n] };
            for a in 0..n {
                let (lp, h) = evaluate_logprob_entropy(&d, &Action::Discrete(a)).unwrap();
                assert!((lp + (n as f64).ln()).abs() < 1e-12);
                assert!((h - (n as f64).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_entropy_two_dims() {
        let d = DistParams::Continuous { mean: vec![0.1, -0.4], log_std: vec![0.0, 0.0] };
        let (_, h) =
            evaluate_logprob_entropy(&d, &Action::Continuous(vec![0.2, 0.3])).unwrap();
        let want = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((h - want).abs() < 1e-12);
        assert!((h - 2.8379).abs() < 1e-4);
    }

    #[test]
    fn collapsed_gaussian() {
        let d = DistParams::Continuous { mean: vec![0.0], log_std: vec![-20.0] };
        let mut rng = RngStream::new(4, 4);
        for _ in 0..1000 {
            let (a, _) = sample_action(&d, SampleMode::Stochastic, &mut rng);
            let v = a.as_continuous().unwrap()[0];
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_draws_stay_inside() {
        let d = DistParams::Continuous { mean: vec![40.0, -40.0], log_std: vec![2.0, 2.0] };
        let mut rng = RngStream::new(5, 5);
        for _ in 0..1000 {
            let (a, lp) = sample_action(&d, SampleMode::Stochastic, &mut rng);
            assert!(a.as_continuous().unwrap().iter().all(|x| x.abs() < 1.0));
            assert!(lp.is_finite());
        }
    }

    #[test]
    fn logprob_self_consistency() {
        let mut rng = RngStream::new(11, 2);
        let dists = [
            DistParams::Discrete { logits: vec![0.5, -1.0, 2.0, 0.0] },
            DistParams::Continuous { mean: vec![0.3, -0.2], log_std: vec![-0.5, 0.1] },
        ];
        for d in &dists {
            for _ in 0..200 {
                let (a, lp) = sample_action(d, SampleMode::Stochastic, &mut rng);
                let (lp2, _) = evaluate_logprob_entropy(d, &a).unwrap();
                assert!((lp - lp2).abs() < 1e-12 * lp.abs().max(1.0), "{lp} vs {lp2}");
            }
        }
    }

    #[test]
    fn log_sum_exp_shift_invariance() {
        let logits = vec![3.0, -7.5, 0.25, 12.0];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 1234.5).collect();
        let a = log_softmax(&logits);
        let b = log_softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_support_rejected() {
        let d = DistParams::Discrete { logits: vec![0.0; 3] };
        assert!(evaluate_logprob_entropy(&d, &Action::Discrete(3)).is_err());
        let c = DistParams::Continuous { mean: vec![0.0], log_std: vec![0.0] };
        assert!(evaluate_logprob_entropy(&c, &Action::Continuous(vec![1.0])).is_err());
        assert!(evaluate_logprob_entropy(&c, &Action::Discrete(0)).is_err());
    }

    #[test]
    fn head_gradients_match_differences() {
        let logits = vec![0.2, -0.7, 1.1];
        let g = categorical_grads(&logits, 1, 0.8, 0.3);
        let f = |l: &[f64]| 0.8 * log_softmax(l)[1] + 0.3 * categorical_entropy(l);
        for j in 0..3 {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-8);
        }
        let (mean, ls, u) = (vec![0.1, -0.3], vec![-0.2, 0.4], vec![0.5, -1.2]);
        let (dm, ds) = gaussian_grads(&mean, &ls, &u, 1.3, 0.7);
        let f = |m: &[f64], s: &[f64]| 1.3 * squashed_log_prob(m, s, &u) + 0.7 * gaussian_entropy(s);
        for j in 0..2 {
            let (mut mp, mut mm) = (mean.clone(), mean.clone());
            mp[j] += 1e-6;
            mm[j] -= 1e-6;
            assert!(((f(&mp, &ls) - f(&mm, &ls)) / 2e-6 - dm[j]).abs() < 1e-8);
            let (mut sp, mut sm) = (ls.clone(), ls.clone());
            sp[j] += 1e-6;
            sm[j] -= 1e-6;
            assert!(((f(&mean, &sp) - f(&mean, &sm)) / 2e-6 - ds[j]).abs() < 1e-8);
        }
    }
}
