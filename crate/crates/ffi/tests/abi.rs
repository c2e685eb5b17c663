use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use lorasa::cli::checkpoint::{self, Dtype, Header};
use lorasa::cli::export_policy;
use lorasa::envs::EnvConfig;
use lorasa::nn::{forward_view, sample, Action, SampleMode, SeqInput};
use lorasa::numerics::{Matrix, RngStream};
use lorasa::trainers::{agent_input, Learner, RegimeKind, RegimeSpec, TrainHyper, TrainSpec, TrainState};
use lorasa_ffi::*;

fn write_policy(dir: &Path, env: EnvConfig, kind: RegimeKind) -> (std::path::PathBuf, TrainState) {
    let hyper = TrainHyper::defaults(env.id != lorasa::envs::EnvId::HeteroGrid);
    let spec = TrainSpec { env, learner: Learner::Mappo, regime: RegimeSpec::simple(kind), hyper, hidden_dim: 8 };
    let state = TrainState::new(spec, 11).unwrap();
    let path = dir.join("policy.ckpt");
    let header = Header {
        kind: "policy".into(),
        config_hash: "test".into(),
        lineage: "test".into(),
        dtype: Dtype::F32,
        meta: serde_json::Value::Null,
    };
    checkpoint::write(&path, &export_policy(&state).unwrap(), &header).unwrap();
    (path, state)
}

fn load(path: &Path) -> *mut LorasaPolicy {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { lorasa_policy_load(c.as_ptr(), &mut p) }, LorasaStatus::Ok);
    assert!(!p.is_null());
    p
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lorasa_last_error()) }.to_string_lossy().into_owned()
}

fn observations(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::new(seed, 0);
    (0..n).map(|_| (0..dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).collect()
}

/// Deterministic actions of `state`'s own (f64) agent policies over a sequence.
fn reference_actions(state: &TrainState, agent: usize, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let params = state.policy.agent_params(agent).unwrap();
    let arch = params.arch;
    let id_dim = state.policy.arch().id_dim;
    let mut h = Matrix::zeros(1, arch.hidden_dim);
    let mut rng = RngStream::new(0, 0);
    seq.iter()
        .map(|o| {
            let x = Matrix::from_vec(1, arch.input_dim(), agent_input(o, agent, id_dim)).unwrap();
            let input = SeqInput { obs: vec![x], episode_start: vec![vec![false]] };
            let fwd = forward_view(&arch, &params.view(), &input, &h).unwrap();
            h = fwd.h_final;
            match sample(&fwd.dists[0].row(0), SampleMode::Deterministic, &mut rng).action {
                Action::Discrete(a) => vec![a as f64],
                Action::Continuous(v) => v,
            }
        })
        .collect()
}

#[test]
fn continuous_policy_matches_library_forward() {
    let dir = tempfile::tempdir().unwrap();
    let (path, state) = write_policy(dir.path(), EnvConfig::hetero_spread(), RegimeKind::Nps);
    let p = load(&path);
    let (mut n, mut obs_dim, mut act_len, mut cont) = (0usize, 0usize, 0usize, 0);
    unsafe {
        assert_eq!(lorasa_policy_n_agents(p, &mut n), LorasaStatus::Ok);
        assert_eq!(lorasa_policy_obs_dim(p, &mut obs_dim), LorasaStatus::Ok);
        assert_eq!(lorasa_policy_action_len(p, &mut act_len), LorasaStatus::Ok);
        assert_eq!(lorasa_policy_is_continuous(p, &mut cont), LorasaStatus::Ok);
    }
    assert_eq!((n, obs_dim, act_len, cont), (3, 10, 2, 1));
    let seq = observations(20, obs_dim, 5);
    for agent in 0..n {
        let want = reference_actions(&state, agent, &seq);
        for (o, w) in seq.iter().zip(&want) {
            let mut out = vec![0.0; act_len];
            let s = unsafe { lorasa_policy_act(p, agent, o.as_ptr(), o.len(), 1, out.as_mut_ptr(), out.len()) };
            assert_eq!(s, LorasaStatus::Ok);
            for (a, b) in out.iter().zip(w) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
    let mut count = 0usize;
    unsafe {
        assert_eq!(lorasa_policy_param_count(p, 0, &mut count), LorasaStatus::Ok);
        lorasa_policy_free(p);
    }
    assert_eq!(count, state.policy.agent_params(0).unwrap().param_count());
}

#[test]
fn discrete_policy_and_reset() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_policy(dir.path(), EnvConfig::hetero_grid(), RegimeKind::PsId);
    let p = load(&path);
    let mut obs_dim = 0usize;
    unsafe { lorasa_policy_obs_dim(p, &mut obs_dim) };
    let seq = observations(15, obs_dim, 9);
    let run = |deterministic: i32| -> Vec<f64> {
        unsafe { assert_eq!(lorasa_policy_reset(p, 3), LorasaStatus::Ok) };
        seq.iter()
            .map(|o| {
                let mut a = [f64::NAN];
                let s = unsafe { lorasa_policy_act(p, 1, o.as_ptr(), o.len(), deterministic, a.as_mut_ptr(), 1) };
                assert_eq!(s, LorasaStatus::Ok);
                a[0]
            })
            .collect()
    };
    let det = run(1);
    assert!(det.iter().all(|a| a.fract() == 0.0 && (0.0..5.0).contains(a)));
    assert_eq!(det, run(1));
    assert_eq!(run(0), run(0));
    unsafe { lorasa_policy_free(p) };
}

#[test]
fn errors_are_reported() {
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(lorasa_policy_load(ptr::null(), &mut p), LorasaStatus::NullPointer);
        let missing = CString::new("/nonexistent/policy.ckpt").unwrap();
        assert_eq!(lorasa_policy_load(missing.as_ptr(), &mut p), LorasaStatus::Io);
        assert!(p.is_null());
        assert!(last_error().contains("nonexistent"));
        let mut n = 0usize;
        assert_eq!(lorasa_policy_n_agents(ptr::null(), &mut n), LorasaStatus::NullPointer);
        lorasa_policy_free(ptr::null_mut());
    }

    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("bad.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let c = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lorasa_policy_load(c.as_ptr(), &mut p) }, LorasaStatus::Integrity);

    let (path, _) = write_policy(dir.path(), EnvConfig::hetero_grid(), RegimeKind::PsId);
    let p = load(&path);
    let obs = [0.0; 3];
    let mut a = [0.0];
    unsafe {
        assert_eq!(lorasa_policy_act(p, 0, obs.as_ptr(), obs.len(), 1, a.as_mut_ptr(), 1), LorasaStatus::Shape);
        assert_eq!(lorasa_policy_act(p, 7, obs.as_ptr(), obs.len(), 1, a.as_mut_ptr(), 1), LorasaStatus::InvalidArgument);
        assert_eq!(lorasa_policy_act(p, 0, ptr::null(), 0, 1, a.as_mut_ptr(), 1), LorasaStatus::NullPointer);
        lorasa_policy_free(p);
    }
    assert!(!unsafe { CStr::from_ptr(lorasa_version()) }.to_bytes().is_empty());
}

#[test]
fn header_is_generated() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lorasa.h")).unwrap();
    for sym in ["lorasa_policy_load", "lorasa_policy_act", "lorasa_last_error", "LORASA_STATUS_INTEGRITY"] {
        assert!(h.contains(sym), "{sym} missing from header");
    }
}
