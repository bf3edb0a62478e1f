//! Evaluation rollouts and behavior export.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointMeta;
use crate::env::PerturbationPlan;
use crate::error::{usage, Result};
use crate::event::{EventKind, Signal};
use crate::model::Model;
use crate::policy::{deviation, LoraPair};
use crate::trainer::rollout::{collect_with, RolloutBatch, RolloutOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Episodes, run as one synchronized batch.
    pub episodes: usize,
    pub seed: u64,
    /// Defaults to [`default_eval_target`] of the training range.
    pub nmd_des: Option<f64>,
    pub plan: PerturbationPlan,
    pub deterministic: bool,
    pub single_query: bool,
    pub trajectories: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            episodes: 16,
            seed: 0,
            nmd_des: None,
            plan: PerturbationPlan::default(),
            deterministic: true,
            single_query: false,
            trajectories: false,
        }
    }
}

/// Where the diversity scalar came from during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    /// Normalized over the episodes of the batch, as in training.
    Batch,
    /// Stored training average; a single episode has no batch to normalize over.
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub completion_rate: f64,
    pub mean_reward: f64,
    pub mean_episode_len: f64,
    pub hypernet_calls: usize,
    pub nmd_des: f64,
    pub alpha_source: AlphaSource,
}

/// Geometric mean of the training target range.
pub fn default_eval_target(min: f64, max: f64) -> f64 {
    (min * max).sqrt()
}

pub fn evaluate(model: &Model, meta: &CheckpointMeta, opts: &EvalOptions) -> Result<(EvalSummary, RolloutBatch)> {
    if opts.episodes == 0 {
        return usage("evaluation needs at least one episode");
    }
    let nmd_des = opts
        .nmd_des
        .unwrap_or_else(|| default_eval_target(meta.nmd_des_min, meta.nmd_des_max));
    if !(nmd_des >= 0.0 && nmd_des.is_finite()) {
        return usage(format!("diversity target {nmd_des} must be a nonnegative number"));
    }
    let mut cfg = meta.train.clone();
    cfg.envs = opts.episodes;
    cfg.single_query = opts.single_query;
    let source = if opts.episodes == 1 {
        AlphaSource::Ema
    } else {
        AlphaSource::Batch
    };
    let ro = RolloutOptions {
        plan: opts.plan.clone(),
        nmd_des: Some(nmd_des),
        deterministic: opts.deterministic,
        ema_alpha: source == AlphaSource::Ema,
        trajectories: opts.trajectories,
        freeze_ema: true,
    };
    let mut ema = meta.alpha_ema;
    let batch = collect_with(model, &meta.task, &cfg, opts.seed, &mut ema, &ro)?;
    let n = batch.episodes.len().max(1) as f64;
    let summary = EvalSummary {
        episodes: batch.episodes.len(),
        completion_rate: batch.episodes.iter().filter(|e| e.completed).count() as f64 / n,
        mean_reward: batch.episodes.iter().map(|e| e.ret).sum::<f64>() / n,
        mean_episode_len: batch.episodes.iter().map(|e| e.len as f64).sum::<f64>() / n,
        hypernet_calls: batch.queries.len(),
        nmd_des,
        alpha_source: source,
    };
    Ok((summary, batch))
}

/// One behavior emitted by one hypernetwork query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub episode: usize,
    pub t: usize,
    pub event_kind: EventKind,
    /// Plate, door or goal signal for environment events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<Signal>,
    pub agent_slot: usize,
    /// `C` row-major followed by `D` row-major (`r·d + d_a·r` values).
    pub lora: Vec<f64>,
    /// Deviation of the behavior at the agent's observation at query time.
    pub deviation: Vec<f64>,
}

pub fn export_records(model: &Model, batch: &RolloutBatch) -> Result<Vec<ExportRecord>> {
    let hp = &model.hypernet;
    let mut out = Vec::new();
    for q in &batch.queries {
        for (j, &agent) in q.agents.iter().enumerate() {
            let lora = q.packed.row(j).to_vec();
            let pair = LoraPair::from_flat(&lora, hp.rank, hp.feature_dim, hp.action_dim)?;
            let dev = deviation(&model.backbone, &pair, &q.input.observations[j])?;
            out.push(ExportRecord {
                episode: q.env,
                t: q.t,
                event_kind: q.event.kind,
                signal: q.event.signal_code(),
                agent_slot: agent,
                lora,
                deviation: dev,
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl<W: Write, T: Serialize>(out: &mut W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
