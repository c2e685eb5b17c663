//! C ABI over exported (merged, per-agent) policies.
//!
//! Handles are opaque; every entry point returns a [`LorasaStatus`] and on
//! failure stores a message retrievable with [`lorasa_last_error`]. Panics
//! never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lorasa::cli::{load_policy, PolicyExport};
use lorasa::nn::{forward_view, sample, Action, SampleMode, SeqInput};
use lorasa::numerics::{Matrix, RngStream};
use lorasa::trainers::agent_input;
use lorasa::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LorasaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Integrity = 4,
    Shape = 5,
    Panic = 6,
}

/// A loaded policy plus per-agent recurrent state.
pub struct LorasaPolicy {
    export: PolicyExport,
    hidden: Vec<Matrix>,
    rng: RngStream,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LorasaStatus {
    match e {
        Error::Io { .. } => LorasaStatus::Io,
        Error::Integrity(_) | Error::Json(_) => LorasaStatus::Integrity,
        Error::Shape(_) => LorasaStatus::Shape,
        _ => LorasaStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (LorasaStatus, String)>) -> LorasaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LorasaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LorasaStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (LorasaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (LorasaStatus, String) {
    (LorasaStatus::NullPointer, format!("{what} is null"))
}

fn policy_ref<'a>(p: *const LorasaPolicy) -> Result<&'a LorasaPolicy, (LorasaStatus, String)> {
    // SAFETY: non-null handles come from `lorasa_policy_load` and are live
    // until `lorasa_policy_free`.
    unsafe { p.as_ref() }.ok_or_else(|| null("policy"))
}

fn policy_mut<'a>(p: *mut LorasaPolicy) -> Result<&'a mut LorasaPolicy, (LorasaStatus, String)> {
    // SAFETY: as in `policy_ref`; the caller guarantees exclusive use.
    unsafe { p.as_mut() }.ok_or_else(|| null("policy"))
}

fn write_out<T>(out: *mut T, v: T) -> Result<(), (LorasaStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    // SAFETY: checked non-null; the caller provides a valid location.
    unsafe { out.write(v) };
    Ok(())
}

/// Message of the most recent failure on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lorasa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lorasa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an exported policy file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasa_policy_load(path: *const c_char, out: *mut *mut LorasaPolicy) -> LorasaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("output pointer"));
        }
        // SAFETY: checked non-null, NUL-terminated by contract.
        let s = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (LorasaStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let export = load_policy(Path::new(s)).map_err(lib_err)?;
        let hd = export.agents.first().map_or(0, |a| a.arch.hidden_dim);
        let hidden = vec![Matrix::zeros(1, hd); export.agents.len()];
        let rng = RngStream::new(export.seed, 0);
        write_out(out, Box::into_raw(Box::new(LorasaPolicy { export, hidden, rng })))
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `policy` must come from `lorasa_policy_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lorasa_policy_free(policy: *mut LorasaPolicy) {
    if !policy.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(policy) });
    }
}

/// Clears every agent's recurrent state and reseeds stochastic sampling.
///
/// # Safety
/// `policy` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lorasa_policy_reset(policy: *mut LorasaPolicy, seed: u64) -> LorasaStatus {
    guard(|| {
        let p = policy_mut(policy)?;
        for h in &mut p.hidden {
            h.fill(0.0);
        }
        p.rng = RngStream::new(seed, 0);
        Ok(())
    })
}

/// # Safety
/// `policy` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lorasa_policy_n_agents(policy: *const LorasaPolicy, out: *mut usize) -> LorasaStatus {
    guard(|| write_out(out, policy_ref(policy)?.export.agents.len()))
}

/// Observation length expected by `lorasa_policy_act` (agent id excluded).
///
/// # Safety
/// `policy` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lorasa_policy_obs_dim(policy: *const LorasaPolicy, out: *mut usize) -> LorasaStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        write_out(out, p.export.agents.first().map_or(0, |a| a.arch.obs_dim))
    })
}

/// Number of values `lorasa_policy_act` writes: 1 for discrete actions,
/// the action dimension for continuous ones.
///
/// # Safety
/// `policy` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lorasa_policy_action_len(policy: *const LorasaPolicy, out: *mut usize) -> LorasaStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        let arch = p.export.agents.first().map(|a| a.arch).ok_or_else(|| (LorasaStatus::Shape, "no agents".into()))?;
        write_out(out, if arch.action.is_continuous() { arch.action.head_dim() } else { 1 })
    })
}

/// 1 when actions are continuous, 0 when discrete.
///
/// # Safety
/// `policy` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lorasa_policy_is_continuous(policy: *const LorasaPolicy, out: *mut c_int) -> LorasaStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        let c = p.export.agents.first().is_some_and(|a| a.arch.action.is_continuous());
        write_out(out, c as c_int)
    })
}

/// Parameter count of one agent's merged network.
///
/// # Safety
/// `policy` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lorasa_policy_param_count(policy: *const LorasaPolicy, agent: usize, out: *mut usize) -> LorasaStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        let a = p
            .export
            .agents
            .get(agent)
            .ok_or_else(|| (LorasaStatus::InvalidArgument, format!("agent {agent} out of range")))?;
        write_out(out, a.param_count())
    })
}

/// Advances `agent`'s recurrent state by one observation and writes its
/// action: the action index (as a double) for discrete policies, the squashed
/// action vector for continuous ones. `deterministic` non-zero takes the
/// mode; otherwise the action is sampled.
///
/// # Safety
/// `policy` must be a live handle; `obs` must point to `obs_len` doubles and
/// `action` to `action_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lorasa_policy_act(
    policy: *mut LorasaPolicy,
    agent: usize,
    obs: *const f64,
    obs_len: usize,
    deterministic: c_int,
    action: *mut f64,
    action_len: usize,
) -> LorasaStatus {
    guard(|| {
        let p = policy_mut(policy)?;
        if obs.is_null() {
            return Err(null("observation"));
        }
        if action.is_null() {
            return Err(null("action buffer"));
        }
        let params = p
            .export
            .agents
            .get(agent)
            .ok_or_else(|| (LorasaStatus::InvalidArgument, format!("agent {agent} out of range")))?;
        let arch = params.arch;
        if obs_len != arch.obs_dim {
            return Err((LorasaStatus::Shape, format!("observation has {obs_len} values, expected {}", arch.obs_dim)));
        }
        let want = if arch.action.is_continuous() { arch.action.head_dim() } else { 1 };
        if action_len < want {
            return Err((LorasaStatus::Shape, format!("action buffer holds {action_len} values, need {want}")));
        }
        // SAFETY: non-null with `obs_len` elements by contract.
        let o = unsafe { std::slice::from_raw_parts(obs, obs_len) };
        let x = Matrix::from_vec(1, arch.input_dim(), agent_input(o, agent, p.export.id_dim)).map_err(lib_err)?;
        let input = SeqInput { obs: vec![x], episode_start: vec![vec![false]] };
        let fwd = forward_view(&arch, &params.view(), &input, &p.hidden[agent]).map_err(lib_err)?;
        let mode = if deterministic != 0 { SampleMode::Deterministic } else { SampleMode::Stochastic };
        let s = sample(&fwd.dists[0].row(0), mode, &mut p.rng);
        p.hidden[agent] = fwd.h_final;
        // SAFETY: non-null with at least `want` writable elements by contract.
        let out = unsafe { std::slice::from_raw_parts_mut(action, want) };
        match s.action {
            Action::Discrete(a) => out[0] = a as f64,
            Action::Continuous(v) => out.copy_from_slice(&v),
        }
        Ok(())
    })
}
