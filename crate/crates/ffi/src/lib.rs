//! C ABI over the diversity metrics, the simulator and checkpoints.
//!
//! Every function returns an [`MmrlStatus`]; results come back through out
//! pointers. After a non-OK status, [`mmrl_last_error`] describes the failure
//! on the calling thread. Handles are opaque and must be released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use mmrl_core::checkpoint::Checkpoint;
use mmrl_core::diversity::{self, DeviationSet};
use mmrl_core::env::{self, PomgState, TaskConfig, TaskKind};
use mmrl_core::eval::{evaluate, EvalOptions};
use mmrl_core::Error;

/// Status codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Degenerate = 4,
    Format = 5,
    Io = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// A simulator instance.
pub struct MmrlEnv {
    config: TaskConfig,
    state: PomgState,
    done: bool,
}

/// A loaded checkpoint.
pub struct MmrlCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MmrlStatus {
    match e {
        Error::Config(_) | Error::ConfigKey { .. } => MmrlStatus::Config,
        Error::Usage(_) | Error::Assumption(_) => MmrlStatus::InvalidArgument,
        Error::Degenerate(_) => MmrlStatus::Degenerate,
        Error::Format(_) | Error::Json(_) => MmrlStatus::Format,
        Error::Io(_) => MmrlStatus::Io,
        Error::Oracle(_) | Error::Divergence(_) => MmrlStatus::Internal,
    }
}

struct Fail(MmrlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: MmrlStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MmrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MmrlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MmrlStatus::Internal
        }
    }
}

fn nonnull<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        fail(MmrlStatus::NullPointer, format!("`{name}` is null"))
    } else {
        Ok(())
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    nonnull(p, name)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    nonnull(p, name)?;
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    nonnull(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(MmrlStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

unsafe fn deviations(devs: *const f64, behaviors: usize, action_dim: usize) -> Result<DeviationSet, Fail> {
    let flat = input(devs, behaviors * action_dim, "devs")?;
    if action_dim == 0 {
        return fail(MmrlStatus::InvalidArgument, "action_dim must be positive");
    }
    Ok(DeviationSet::new(flat.chunks(action_dim).map(<[f64]>::to_vec).collect())?)
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mmrl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// W₂ distance between two diagonal Gaussians of dimension `dim`.
///
/// # Safety
/// Each input must point to `dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_w2_bures_diag(
    mean_a: *const f64,
    std_a: *const f64,
    mean_b: *const f64,
    std_b: *const f64,
    dim: usize,
    out: *mut f64,
) -> MmrlStatus {
    guard(|| {
        nonnull(out, "out")?;
        let v = diversity::w2_bures_diag(
            input(mean_a, dim, "mean_a")?,
            input(std_a, dim, "std_a")?,
            input(mean_b, dim, "mean_b")?,
            input(std_b, dim, "std_b")?,
        )?;
        *out = v;
        Ok(())
    })
}

/// Diversity estimate of `behaviors` deviations (row-major,
/// `behaviors × action_dim`) at one observation out of `obs_count`.
///
/// # Safety
/// `devs` must point to `behaviors * action_dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_nmd_hat_deviations(
    devs: *const f64,
    behaviors: usize,
    action_dim: usize,
    obs_count: usize,
    out: *mut f64,
) -> MmrlStatus {
    guard(|| {
        nonnull(out, "out")?;
        let set = deviations(devs, behaviors, action_dim)?;
        *out = diversity::nmd_hat_deviations(&set, obs_count);
        Ok(())
    })
}

/// Gradient of [`mmrl_nmd_hat_deviations`] with respect to deviation `m`,
/// written to `grad_out` (`action_dim` doubles).
///
/// # Safety
/// `devs` must point to `behaviors * action_dim` doubles and `grad_out` to
/// `action_dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mmrl_nmd_grad(
    devs: *const f64,
    behaviors: usize,
    action_dim: usize,
    obs_count: usize,
    m: usize,
    grad_out: *mut f64,
) -> MmrlStatus {
    guard(|| {
        let set = deviations(devs, behaviors, action_dim)?;
        let g = diversity::nmd_grad(&set, obs_count, m)?;
        output(grad_out, action_dim, "grad_out")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Diversity scalar `min(nmd_des / max(measured, floor), cap)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_compute_alpha(
    nmd_des: f64,
    measured: f64,
    floor: f64,
    cap: f64,
    out: *mut f64,
) -> MmrlStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = diversity::compute_alpha(nmd_des, measured, floor, cap)?;
        Ok(())
    })
}

/// Creates an environment for `task` (`dispersion`, `pressure_plate` or
/// `wind_flocking`) with its default layout, reset with `seed`.
///
/// # Safety
/// `task` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_env_new(task: *const c_char, seed: u64, out: *mut *mut MmrlEnv) -> MmrlStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = ptr::null_mut();
        let kind: TaskKind = text(task, "task")?.parse()?;
        let config = TaskConfig::for_task(kind);
        let (state, _) = env::reset(&config, seed)?;
        *out = Box::into_raw(Box::new(MmrlEnv {
            config,
            state,
            done: false,
        }));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`mmrl_env_new`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mmrl_env_free(env: *mut MmrlEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmrl_env_reset(env: *mut MmrlEnv, seed: u64) -> MmrlStatus {
    guard(|| {
        nonnull(env, "env")?;
        let e = &mut *env;
        e.state = env::reset(&e.config, seed)?.0;
        e.done = false;
        Ok(())
    })
}

/// Observation width per agent and the current number of live agents.
///
/// # Safety
/// `env` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_env_dims(env: *const MmrlEnv, obs_width: *mut usize, live_agents: *mut usize) -> MmrlStatus {
    guard(|| {
        nonnull(env, "env")?;
        nonnull(obs_width, "obs_width")?;
        nonnull(live_agents, "live_agents")?;
        let e = &*env;
        *obs_width = e.config.obs_width();
        *live_agents = e.state.live_count();
        Ok(())
    })
}

/// Writes the live agents' observations row-major into `out`
/// (`live_agents × obs_width` doubles, capacity `cap`).
///
/// # Safety
/// `env` must be a live handle and `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmrl_env_observe(env: *const MmrlEnv, out: *mut f64, cap: usize) -> MmrlStatus {
    guard(|| {
        nonnull(env, "env")?;
        let e = &*env;
        let obs: Vec<f64> = env::observe(&e.config, &e.state).concat();
        if cap < obs.len() {
            return fail(MmrlStatus::BufferTooSmall, format!("need {} doubles, got {cap}", obs.len()));
        }
        output(out, obs.len(), "out")?.copy_from_slice(&obs);
        Ok(())
    })
}

/// Advances one step with `actions` (`live_agents × 2` doubles in [-1, 1]).
/// `event_kind` receives 0 for no event, then AgentRemoved,
/// CapabilityChanged, DiversityTargetChanged, EnvSignal as 1..=4.
///
/// # Safety
/// `env` must be a live handle; `actions` must hold `live_agents * 2` doubles;
/// the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_env_step(
    env: *mut MmrlEnv,
    actions: *const f64,
    live_agents: usize,
    reward: *mut f64,
    done: *mut bool,
    event_kind: *mut u32,
) -> MmrlStatus {
    guard(|| {
        nonnull(env, "env")?;
        nonnull(reward, "reward")?;
        nonnull(done, "done")?;
        nonnull(event_kind, "event_kind")?;
        let e = &mut *env;
        if e.done {
            return fail(MmrlStatus::InvalidArgument, "episode finished; reset first");
        }
        if live_agents != e.state.live_count() {
            return fail(
                MmrlStatus::InvalidArgument,
                format!("{live_agents} actions for {} live agents", e.state.live_count()),
            );
        }
        let acts: Vec<[f64; 2]> = input(actions, live_agents * 2, "actions")?
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let out = env::step(&e.config, &e.state, &acts)?;
        *reward = out.reward;
        *done = out.done;
        *event_kind = out.event.kind.index() as u32;
        e.state = out.state;
        e.done = out.done;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_checkpoint_load(path: *const c_char, out: *mut *mut MmrlCheckpoint) -> MmrlStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = ptr::null_mut();
        let inner = Checkpoint::load(PathBuf::from(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(MmrlCheckpoint { inner }));
        Ok(())
    })
}

/// # Safety
/// `ck` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mmrl_checkpoint_save(ck: *const MmrlCheckpoint, path: *const c_char) -> MmrlStatus {
    guard(|| {
        nonnull(ck, "ck")?;
        (*ck).inner.save(PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `ck` must come from [`mmrl_checkpoint_load`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mmrl_checkpoint_free(ck: *mut MmrlCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Copies the metadata JSON (NUL-terminated) into `buf`. `needed` always
/// receives the required size including the terminator.
///
/// # Safety
/// `ck` must be a live handle; `buf` must hold `cap` bytes (may be null when
/// `cap` is 0); `needed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_checkpoint_meta_json(
    ck: *const MmrlCheckpoint,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> MmrlStatus {
    guard(|| {
        nonnull(ck, "ck")?;
        nonnull(needed, "needed")?;
        let json = serde_json::to_string(&(*ck).inner.meta).map_err(Error::from)?;
        *needed = json.len() + 1;
        if cap < json.len() + 1 {
            return fail(MmrlStatus::BufferTooSmall, format!("need {} bytes, got {cap}", json.len() + 1));
        }
        nonnull(buf, "buf")?;
        ptr::copy_nonoverlapping(json.as_ptr(), buf.cast::<u8>(), json.len());
        *buf.add(json.len()) = 0;
        Ok(())
    })
}

/// Number of named arrays in the checkpoint.
///
/// # Safety
/// `ck` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_checkpoint_array_count(ck: *const MmrlCheckpoint, out: *mut usize) -> MmrlStatus {
    guard(|| {
        nonnull(ck, "ck")?;
        nonnull(out, "out")?;
        *out = (*ck).inner.arrays.len();
        Ok(())
    })
}

/// Deterministic evaluation of `episodes` episodes at diversity target
/// `nmd_des` (negative selects the default target).
///
/// # Safety
/// `ck` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrl_checkpoint_evaluate(
    ck: *const MmrlCheckpoint,
    episodes: usize,
    seed: u64,
    nmd_des: f64,
    completion_rate: *mut f64,
    mean_reward: *mut f64,
) -> MmrlStatus {
    guard(|| {
        nonnull(ck, "ck")?;
        nonnull(completion_rate, "completion_rate")?;
        nonnull(mean_reward, "mean_reward")?;
        let ck = &(*ck).inner;
        let model = ck.to_model()?;
        let opts = EvalOptions {
            episodes,
            seed,
            nmd_des: (nmd_des >= 0.0).then_some(nmd_des),
            single_query: ck.meta.ablation,
            ..EvalOptions::default()
        };
        let (summary, _) = evaluate(&model, &ck.meta, &opts)?;
        *completion_rate = summary.completion_rate;
        *mean_reward = summary.mean_reward;
        Ok(())
    })
}
