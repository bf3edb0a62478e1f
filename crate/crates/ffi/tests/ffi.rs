use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mmrl_core::checkpoint::{Checkpoint, CheckpointMeta};
use mmrl_core::env::TaskConfig;
use mmrl_core::model::{Model, ModelConfig};
use mmrl_core::trainer::TrainConfig;
use mmrl_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mmrl_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn diversity_functions_match_the_library() {
    let devs = [0.3, -0.2, 1.1, 0.4, -0.7, 0.9];
    let mut n = 0.0;
    assert_eq!(unsafe { mmrl_nmd_hat_deviations(devs.as_ptr(), 3, 2, 1, &mut n) }, MmrlStatus::Ok);
    let set = mmrl_core::diversity::DeviationSet::new(devs.chunks(2).map(<[f64]>::to_vec).collect()).unwrap();
    assert_eq!(n, mmrl_core::diversity::nmd_hat_deviations(&set, 1));

    let mut g = [0.0; 2];
    assert_eq!(unsafe { mmrl_nmd_grad(devs.as_ptr(), 3, 2, 1, 1, g.as_mut_ptr()) }, MmrlStatus::Ok);
    assert_eq!(g.to_vec(), mmrl_core::diversity::nmd_grad(&set, 1, 1).unwrap());

    let mut w = 0.0;
    let st = unsafe { mmrl_w2_bures_diag([0.0].as_ptr(), [1.0].as_ptr(), [3.0].as_ptr(), [5.0].as_ptr(), 1, &mut w) };
    assert_eq!(st, MmrlStatus::Ok);
    assert!((w - 5.0).abs() < 1e-12);

    let mut a = 0.0;
    assert_eq!(unsafe { mmrl_compute_alpha(0.5, 0.0, 1e-6, 1e3, &mut a) }, MmrlStatus::Ok);
    assert_eq!(a, 1e3);
}

#[test]
fn errors_set_status_and_message() {
    let mut out = 0.0;
    let st = unsafe { mmrl_compute_alpha(-1.0, 1.0, 1e-6, 1e3, &mut out) };
    assert_eq!(st, MmrlStatus::InvalidArgument);
    assert!(last_error().contains("non-negative"));

    assert_eq!(unsafe { mmrl_compute_alpha(1.0, 1.0, 1e-6, 1e3, ptr::null_mut()) }, MmrlStatus::NullPointer);
    assert_eq!(unsafe { mmrl_compute_alpha(1.0, 1.0, 1e-6, 1e3, &mut out) }, MmrlStatus::Ok);
    assert_eq!(last_error(), "");

    let same = [1.0, 1.0, 1.0, 1.0];
    let mut g = [0.0; 2];
    let st = unsafe { mmrl_nmd_grad(same.as_ptr(), 2, 2, 1, 0, g.as_mut_ptr()) };
    assert_eq!(st, MmrlStatus::Degenerate);
}

#[test]
fn environment_handle_runs_an_episode() {
    let task = CString::new("dispersion").unwrap();
    let mut env = ptr::null_mut();
    assert_eq!(unsafe { mmrl_env_new(task.as_ptr(), 3, &mut env) }, MmrlStatus::Ok);
    let (mut width, mut live) = (0, 0);
    assert_eq!(unsafe { mmrl_env_dims(env, &mut width, &mut live) }, MmrlStatus::Ok);
    assert_eq!(width, TaskConfig::dispersion(2, 2).obs_width());
    let mut small = vec![0.0; 1];
    assert_eq!(unsafe { mmrl_env_observe(env, small.as_mut_ptr(), 1) }, MmrlStatus::BufferTooSmall);
    let mut obs = vec![0.0; width * live];
    assert_eq!(unsafe { mmrl_env_observe(env, obs.as_mut_ptr(), obs.len()) }, MmrlStatus::Ok);
    let (expected, _) = mmrl_core::env::reset(&TaskConfig::dispersion(2, 2), 3).unwrap();
    assert_eq!(obs, mmrl_core::env::observe(&TaskConfig::dispersion(2, 2), &expected).concat());

    let actions = vec![0.5; live * 2];
    let (mut reward, mut done, mut kind) = (0.0, false, 0u32);
    let mut steps = 0;
    while !done {
        let st = unsafe { mmrl_env_step(env, actions.as_ptr(), live, &mut reward, &mut done, &mut kind) };
        assert_eq!(st, MmrlStatus::Ok, "{}", last_error());
        steps += 1;
    }
    assert!(steps <= TaskConfig::dispersion(2, 2).horizon);
    assert_eq!(unsafe { mmrl_env_reset(env, 4) }, MmrlStatus::Ok);
    let st = unsafe { mmrl_env_step(env, actions.as_ptr(), live + 1, &mut reward, &mut done, &mut kind) };
    assert_eq!(st, MmrlStatus::InvalidArgument);
    unsafe { mmrl_env_free(env) };
}

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let mut task = TaskConfig::dispersion(2, 2);
    task.horizon = 10;
    let model_cfg = ModelConfig {
        feature_hidden: vec![8, 8],
        critic_hidden: vec![8],
        embed: 8,
        heads: 2,
        blocks: 1,
        ff: 8,
        rank: 2,
        ..ModelConfig::default()
    };
    let model = Model::init(&mut ChaCha8Rng::seed_from_u64(1), &model_cfg, task.obs_width(), task.agents).unwrap();
    let train = TrainConfig::default();
    let meta = CheckpointMeta {
        task,
        model: model_cfg,
        seed: 0,
        env_steps: 0,
        updates: 0,
        alpha_ema: 1.0,
        nmd_des_min: train.nmd_des_min,
        nmd_des_max: train.nmd_des_max,
        ablation: false,
        train,
    };
    let path = dir.join("tiny.mmrl");
    Checkpoint::from_model(&model, meta).save(&path).unwrap();
    path
}

#[test]
fn checkpoint_handle_round_trips_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { mmrl_checkpoint_load(c_path.as_ptr(), &mut ck) }, MmrlStatus::Ok);

    let mut count = 0;
    assert_eq!(unsafe { mmrl_checkpoint_array_count(ck, &mut count) }, MmrlStatus::Ok);
    assert!(count > 0);

    let mut needed = 0;
    let st = unsafe { mmrl_checkpoint_meta_json(ck, ptr::null_mut(), 0, &mut needed) };
    assert_eq!(st, MmrlStatus::BufferTooSmall);
    let mut buf = vec![0 as std::ffi::c_char; needed];
    assert_eq!(unsafe { mmrl_checkpoint_meta_json(ck, buf.as_mut_ptr(), needed, &mut needed) }, MmrlStatus::Ok);
    let json = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert!(json.contains("\"alpha_ema\""));

    let copy = dir.path().join("copy.mmrl");
    let c_copy = CString::new(copy.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mmrl_checkpoint_save(ck, c_copy.as_ptr()) }, MmrlStatus::Ok);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());

    let (mut comp, mut reward) = (0.0, 0.0);
    let st = unsafe { mmrl_checkpoint_evaluate(ck, 4, 0, -1.0, &mut comp, &mut reward) };
    assert_eq!(st, MmrlStatus::Ok, "{}", last_error());
    assert!((0.0..=1.0).contains(&comp) && reward.is_finite());
    unsafe { mmrl_checkpoint_free(ck) };

    std::fs::write(dir.path().join("bad.mmrl"), b"nope").unwrap();
    let bad = CString::new(dir.path().join("bad.mmrl").to_str().unwrap()).unwrap();
    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { mmrl_checkpoint_load(bad.as_ptr(), &mut ck) }, MmrlStatus::Format);
    assert!(ck.is_null());
}

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_the_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let Some(lib) = [deps, deps.parent().unwrap()]
        .iter()
        .map(|d| d.join("libmmrl_ffi.a"))
        .find(|p| p.exists())
    else {
        eprintln!("skipping: static library not found next to {}", exe.display());
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status();
    let Ok(status) = status else {
        eprintln!("skipping: no C compiler");
        return;
    };
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
