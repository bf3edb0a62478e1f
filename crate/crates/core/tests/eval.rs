use std::path::{Path, PathBuf};

use mmrl_core::checkpoint::Checkpoint;
use mmrl_core::cli::{eval_checkpoint, export_checkpoint, EvalRequest};
use mmrl_core::diversity::ALPHA_CAP;
use mmrl_core::env::trajectory::TrajectoryRecord;
use mmrl_core::env::{TaskConfig, TaskKind};
use mmrl_core::event::{EventKind, Signal};
use mmrl_core::eval::{AlphaSource, ExportRecord};
use mmrl_core::model::ModelConfig;
use mmrl_core::trainer::{TrainConfig, Trainer};
use mmrl_core::Error;

fn checkpoint(dir: &Path, task: TaskConfig, model: ModelConfig) -> PathBuf {
    let tc = TrainConfig {
        envs: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let tr = Trainer::new(task, model, tc).unwrap();
    let path = dir.join("model.mmrl");
    Checkpoint::from_trainer(&tr).save(&path).unwrap();
    path
}

fn small_model() -> ModelConfig {
    ModelConfig {
        feature_hidden: vec![16],
        critic_hidden: vec![16],
        embed: 8,
        heads: 2,
        blocks: 1,
        ff: 16,
        rank: 2,
        ..ModelConfig::default()
    }
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn dispersion(horizon: usize) -> TaskConfig {
    let mut t = TaskConfig::dispersion(2, 2);
    t.horizon = horizon;
    t
}

#[test]
fn same_checkpoint_and_seed_give_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path(), dispersion(30), small_model());
    let req = EvalRequest {
        checkpoint: ck,
        episodes: 6,
        seed: 11,
        ..EvalRequest::default()
    };
    let a = eval_checkpoint(&req).unwrap();
    let b = eval_checkpoint(&req).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes, 6);
    assert_eq!(a.alpha_source, AlphaSource::Batch);
    let stochastic = eval_checkpoint(&EvalRequest {
        stochastic: true,
        ..req.clone()
    })
    .unwrap();
    assert_eq!(stochastic, eval_checkpoint(&EvalRequest { stochastic: true, ..req }).unwrap());
}

#[test]
fn requested_target_is_realized_in_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path(), dispersion(40), ModelConfig::default());
    let traj = dir.path().join("traj.jsonl");
    let s = eval_checkpoint(&EvalRequest {
        checkpoint: ck,
        episodes: 8,
        nmd_des: Some(0.8),
        traj_out: Some(traj.clone()),
        ..EvalRequest::default()
    })
    .unwrap();
    assert_eq!(s.nmd_des, 0.8);
    let recs: Vec<TrajectoryRecord> = read_lines(&traj);
    let mut matched = 0;
    let mut capped = 0;
    for r in &recs {
        let (Some(target), Some(realized), Some(alpha)) = (r.nmd_target, r.nmd_realized, r.alpha) else {
            continue;
        };
        assert_eq!(target, 0.8);
        if alpha >= ALPHA_CAP {
            capped += 1;
            continue;
        }
        assert!((realized - 0.8).abs() / 0.8 <= 1e-3, "t={}: realized {realized}", r.t);
        matched += 1;
    }
    assert!(matched > 10 * capped, "{matched} matched, {capped} at the α cap");
}

#[test]
fn removal_fires_once_per_episode_and_masks_the_agent() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path(), TaskConfig::pressure_plate(), small_model());
    let traj = dir.path().join("traj.jsonl");
    eval_checkpoint(&EvalRequest {
        checkpoint: ck,
        episodes: 4,
        perturb: "remove:1@5".into(),
        traj_out: Some(traj.clone()),
        ..EvalRequest::default()
    })
    .unwrap();
    let recs: Vec<TrajectoryRecord> = read_lines(&traj);
    for ep in 0..4 {
        let mine: Vec<&TrajectoryRecord> = recs.iter().filter(|r| r.episode == Some(ep)).collect();
        assert!(!mine.is_empty());
        let removals = mine.iter().filter(|r| r.event_kind == EventKind::AgentRemoved).count();
        assert_eq!(removals, 1, "episode {ep}");
        for r in &mine {
            assert_eq!(r.live_mask[1], r.t < 5, "episode {ep} t {}", r.t);
        }
    }
}

#[test]
fn malformed_perturbations_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path(), dispersion(10), small_model());
    for bad in ["teleport:1@2", "remove:first_on_plate2"] {
        let err = eval_checkpoint(&EvalRequest {
            checkpoint: ck.clone(),
            episodes: 2,
            perturb: bad.into(),
            ..EvalRequest::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_) | Error::Usage(_)), "{bad}: {err}");
    }
}

#[test]
fn export_writes_a_record_per_generated_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model();
    let ck = checkpoint(dir.path(), dispersion(20), model.clone());
    let out = dir.path().join("export.jsonl");
    let n = export_checkpoint(&ck, Some(TaskKind::Dispersion), 128, 0, false, &out).unwrap();
    let recs: Vec<ExportRecord> = read_lines(&out);
    assert_eq!(recs.len(), n);
    assert!(n >= 128);
    let episodes: std::collections::BTreeSet<usize> = recs.iter().map(|r| r.episode).collect();
    assert_eq!(episodes.len(), 128);

    let restored = Checkpoint::load(&ck).unwrap().to_model().unwrap();
    let d = restored.backbone.feature_dim();
    let da = restored.backbone.action_dim();
    let r = model.rank;
    for rec in &recs {
        assert_eq!(rec.lora.len() + rec.deviation.len(), r * d + da * r + da);
        assert_eq!(rec.deviation.len(), da);
    }
}

#[test]
fn pressure_plate_export_carries_plate_and_door_events() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path(), TaskConfig::pressure_plate(), small_model());
    let out = dir.path().join("export.jsonl");
    export_checkpoint(&ck, Some(TaskKind::PressurePlate), 32, 0, true, &out).unwrap();
    let recs: Vec<ExportRecord> = read_lines(&out);
    assert!(recs.iter().any(|r| r.event_kind == EventKind::Null && r.t == 0));
    let triggered: Vec<&ExportRecord> = recs.iter().filter(|r| r.t > 0).collect();
    assert!(!triggered.is_empty(), "no event-triggered queries");
    for r in triggered {
        assert_eq!(r.event_kind, EventKind::EnvSignal);
        assert!(
            matches!(
                r.signal,
                Some(Signal::Plate1On | Signal::Plate1Off | Signal::Plate2On | Signal::Plate2Off)
                    | Some(Signal::DoorOpened | Signal::DoorClosed | Signal::GoalReached)
            ),
            "{:?}",
            r.signal
        );
    }
}

#[test]
fn export_rejects_a_task_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path(), dispersion(10), small_model());
    let err = export_checkpoint(&ck, Some(TaskKind::WindFlocking), 4, 0, false, &dir.path().join("x")).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}
