//! Test-side oracles and fixtures shared by the integration targets.
#![allow(dead_code)]

use lorasa::envs::EnvConfig;
use lorasa::lora::{AdapterSet, LoraAdapter, LoraSpec};
use lorasa::nn::{ActionKind, ActorArchitecture, ActorParams, LayerId};
use lorasa::numerics::{Matrix, RngStream};
use lorasa::trainers::TrainHyper;

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.normal())
}

/// Layer shapes written out by hand: `(layer, d, k)`.
pub fn layer_shapes(obs: usize, id: usize, h: usize, action: ActionKind) -> Vec<(LayerId, usize, usize)> {
    let a = action.head_dim();
    let mut v = vec![
        (LayerId::Fc1, h, obs + id),
        (LayerId::Fc2, h, h),
        (LayerId::GruX, 3 * h, h),
        (LayerId::GruH, 3 * h, h),
        (LayerId::Post, h, h),
        (LayerId::Head, a, h),
    ];
    if action.is_continuous() {
        v.push((LayerId::LogStd, a, h));
    }
    v
}

/// Actor with every weight and bias drawn from a scaled normal.
pub fn random_actor(arch: ActorArchitecture, rng: &mut RngStream) -> ActorParams {
    let mut p = ActorParams::zeros(arch);
    for &id in arch.layer_ids() {
        let (r, c) = p.weights[id.index()].shape();
        p.weights[id.index()] = gaussian(r, c, 0.8 / (c as f64).sqrt(), rng);
        p.biases[id.index()] = gaussian(1, r, 0.1, rng);
    }
    p
}

/// Adapters with both factors non-zero.
pub fn random_adapters(params: &ActorParams, spec: &LoraSpec, agent: usize, scale: f64, rng: &mut RngStream) -> AdapterSet {
    let adapters = spec
        .resolve(&params.arch)
        .unwrap()
        .into_iter()
        .map(|(layer, d, k, r)| LoraAdapter {
            layer,
            a: gaussian(d, r, scale / (r as f64).sqrt(), rng),
            b: gaussian(r, k, 1.0 / (k as f64).sqrt(), rng),
        })
        .collect();
    AdapterSet { agent, spec: spec.clone(), adapters }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x·Wᵀ + b + (x·Bᵀ)·Aᵀ` for one row, never forming `A·B`.
fn dense_row(x: &[f64], w: &Matrix, b: &Matrix, ad: Option<&LoraAdapter>) -> Vec<f64> {
    let mut y: Vec<f64> = (0..w.rows()).map(|i| b.get(0, i) + (0..w.cols()).map(|j| w.get(i, j) * x[j]).sum::<f64>()).collect();
    if let Some(ad) = ad {
        let low: Vec<f64> = (0..ad.b.rows()).map(|q| (0..ad.b.cols()).map(|j| ad.b.get(q, j) * x[j]).sum()).collect();
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += (0..ad.a.cols()).map(|q| ad.a.get(i, q) * low[q]).sum::<f64>();
        }
    }
    y
}

/// Scalar reference forward of the recurrent actor for one sequence.
/// Returns head outputs per step: logits, or `mean ++ clamped log_std`.
pub fn reference_forward(
    p: &ActorParams,
    adapters: Option<&AdapterSet>,
    seq: &[Vec<f64>],
    starts: &[bool],
) -> Vec<Vec<f64>> {
    let arch = p.arch;
    let hd = arch.hidden_dim;
    let ad = |id: LayerId| adapters.and_then(|s| s.get(id));
    let layer = |id: LayerId, x: &[f64]| dense_row(x, &p.weights[id.index()], &p.biases[id.index()], ad(id));
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let mut h = vec![0.0; hd];
    let mut out = Vec::new();
    for (x, &start) in seq.iter().zip(starts) {
        if start {
            h.iter_mut().for_each(|v| *v = 0.0);
        }
        let f2 = relu(layer(LayerId::Fc2, &relu(layer(LayerId::Fc1, x))));
        let gx = layer(LayerId::GruX, &f2);
        let gh = layer(LayerId::GruH, &h);
        let h_new: Vec<f64> = (0..hd)
            .map(|j| {
                let z = sig(gx[j] + gh[j]);
                let r = sig(gx[hd + j] + gh[hd + j]);
                let n = (gx[2 * hd + j] + r * gh[2 * hd + j]).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect();
        h = h_new;
        let post = relu(layer(LayerId::Post, &h));
        let mut head = layer(LayerId::Head, &post);
        if arch.action.is_continuous() {
            head.extend(layer(LayerId::LogStd, &post).into_iter().map(|v| v.clamp(-20.0, 2.0)));
        }
        out.push(head);
    }
    out
}

/// Small, fast hyperparameters for pipeline tests.
pub fn quick_hyper(continuous: bool) -> TrainHyper {
    TrainHyper {
        rollout_threads: 2,
        rollout_steps: 20,
        chunk_len: 10,
        epochs: 2,
        eval_episodes: 4,
        ..TrainHyper::defaults(continuous)
    }
}

pub fn small_env(continuous: bool) -> EnvConfig {
    if continuous {
        EnvConfig { episode_limit: 30, ..EnvConfig::hetero_spread() }
    } else {
        EnvConfig { grid_size: 5, episode_limit: 20, ..EnvConfig::hetero_grid() }
    }
}
