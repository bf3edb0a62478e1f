//! Drivers behind the `mmrl` verbs, kept in the library so tests and the
//! FFI layer can call them without spawning a process.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::env::{parse_perturbations, TaskKind};
use crate::error::{usage, Error, Result};
use crate::eval::{evaluate, export_records, write_jsonl, EvalOptions, EvalSummary};
use crate::trainer::{MetricsRecord, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.mmrl";
pub const DIVERGED_FILE: &str = "diverged.mmrl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const METADATA_FILE: &str = "metadata.json";

/// Process exit code for an error: 2 for bad input, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ConfigKey { .. } | Error::Usage(_) => 2,
        _ => 1,
    }
}

/// Summary of a training run, written next to the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub task: TaskKind,
    pub seed: u64,
    /// True for single-query ablation runs.
    pub ablation: bool,
    pub total_steps: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub diverged: bool,
    pub checkpoint: String,
    pub metrics: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    pub metadata: RunMetadata,
}

/// Trains per `cfg`, streaming metrics to `out/metrics.jsonl` and writing the
/// final checkpoint and `out/metadata.json`. On divergence the last state is
/// saved to `out/diverged.mmrl` and the divergence error is returned.
pub fn train_to_dir(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&MetricsRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut trainer = Trainer::new(cfg.task.clone(), cfg.model.clone(), cfg.train.clone())?;
    let mut metrics_out = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let mut metrics = Vec::new();
    let result = trainer.train(|rec| {
        serde_json::to_writer(&mut metrics_out, rec)?;
        metrics_out.write_all(b"\n")?;
        metrics_out.flush()?;
        progress(rec);
        metrics.push(rec.clone());
        Ok(())
    });
    let divergence = match result {
        Ok(()) => None,
        Err(Error::Divergence(msg)) => Some(msg),
        Err(e) => return Err(e),
    };
    let diverged = divergence.is_some();
    let name = if diverged { DIVERGED_FILE } else { CHECKPOINT_FILE };
    let checkpoint = out.join(name);
    Checkpoint::from_trainer(&trainer).save(&checkpoint)?;
    let metadata = RunMetadata {
        task: cfg.task.task,
        seed: cfg.train.seed,
        ablation: cfg.train.single_query,
        total_steps: cfg.train.total_steps,
        env_steps: trainer.env_steps,
        updates: trainer.updates,
        diverged,
        checkpoint: name.into(),
        metrics: METRICS_FILE.into(),
    };
    fs::write(out.join(METADATA_FILE), serde_json::to_string_pretty(&metadata)?)?;
    if let Some(msg) = divergence {
        return Err(Error::Divergence(format!("{msg}; last state saved to {}", checkpoint.display())));
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        metadata,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub episodes: usize,
    pub seed: u64,
    pub perturb: String,
    pub nmd_des: Option<f64>,
    pub traj_out: Option<PathBuf>,
    pub stochastic: bool,
    /// `None` follows the checkpoint's training mode.
    pub single_query: Option<bool>,
}

pub fn eval_checkpoint(req: &EvalRequest) -> Result<EvalSummary> {
    let plan = parse_perturbations(&req.perturb)?;
    let ck = Checkpoint::load(&req.checkpoint)?;
    plan.validate(&ck.meta.task)?;
    let model = ck.to_model()?;
    let opts = EvalOptions {
        episodes: req.episodes,
        seed: req.seed,
        nmd_des: req.nmd_des,
        plan,
        deterministic: !req.stochastic,
        single_query: req.single_query.unwrap_or(ck.meta.ablation),
        trajectories: req.traj_out.is_some(),
    };
    let (summary, batch) = evaluate(&model, &ck.meta, &opts)?;
    if let Some(path) = &req.traj_out {
        let mut w = BufWriter::new(File::create(path)?);
        write_jsonl(&mut w, &batch.trajectories)?;
        w.flush()?;
    }
    Ok(summary)
}

/// Rolls out `episodes` episodes and writes one record per behavior emitted
/// by each hypernetwork query; returns the record count.
pub fn export_checkpoint(
    checkpoint: &Path,
    env: Option<TaskKind>,
    episodes: usize,
    seed: u64,
    stochastic: bool,
    out: &Path,
) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(kind) = env {
        if kind != ck.meta.task.task {
            return usage(format!("checkpoint was trained on {}, not {kind}", ck.meta.task.task));
        }
    }
    let model = ck.to_model()?;
    let opts = EvalOptions {
        episodes,
        seed,
        single_query: ck.meta.ablation,
        deterministic: !stochastic,
        ..EvalOptions::default()
    };
    let (_, batch) = evaluate(&model, &ck.meta, &opts)?;
    let records = export_records(&model, &batch)?;
    let mut w = BufWriter::new(File::create(out)?);
    write_jsonl(&mut w, &records)?;
    w.flush()?;
    Ok(records.len())
}
