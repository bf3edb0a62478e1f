//! On-policy multi-agent training loop.

pub mod ppo;
pub mod rollout;
pub mod update;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diversity::{euler_residual, DeviationSet};
use crate::env::{instance_seed, reset, step, TaskConfig};
use crate::error::{config, Result};
use crate::model::{Model, ModelConfig};
use crate::policy::{deviation, LoraPair};
use ppo::{clip_grad_norm, Adam, AdamConfig};
pub use rollout::{collect_rollouts, EpisodeSummary, QueryRecord, RolloutBatch, StepGroup, StepSample};
pub use update::{loss_and_grads, LossReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Environment transitions (one per environment per step).
    pub total_steps: u64,
    pub envs: usize,
    pub minibatches: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Multiplies rewards before advantage and return estimation.
    pub reward_scale: f64,
    pub adam: AdamConfig,
    pub nmd_des_min: f64,
    pub nmd_des_max: f64,
    /// Observations per step at which the estimator compares behaviors;
    /// 0 compares at all of them.
    pub nmd_obs_samples: usize,
    /// Ablation: query the hypernetwork only at the start of each episode.
    pub single_query: bool,
    /// Treat α as a constant in the update.
    pub freeze_alpha: bool,
    pub alpha_ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 500_000,
            envs: 128,
            minibatches: 8,
            epochs: 4,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            reward_scale: 1.0,
            adam: AdamConfig::default(),
            nmd_des_min: 0.05,
            nmd_des_max: 2.0,
            nmd_obs_samples: 32,
            single_query: false,
            freeze_alpha: false,
            alpha_ema_decay: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.envs == 0 || self.minibatches == 0 || self.epochs == 0 {
            return config("envs, minibatches and epochs must be positive");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return config(format!("clip {} must lie in (0, 1)", self.clip));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("alpha_ema_decay", self.alpha_ema_decay),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return config(format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("max_grad_norm", self.max_grad_norm),
            ("learning_rate", self.adam.lr),
            ("adam_eps", self.adam.eps),
            ("reward_scale", self.reward_scale),
            ("nmd_des_min", self.nmd_des_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return config(format!("{name} must be positive"));
            }
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return config("loss coefficients must be nonnegative");
        }
        if self.nmd_des_max < self.nmd_des_min {
            return config("nmd_des_max must not be below nmd_des_min");
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: u64,
    pub env_steps: u64,
    pub mean_reward: f64,
    pub completion_rate: f64,
    pub episode_len_mean: f64,
    pub nmd_target_mean: f64,
    pub nmd_realized_mean: f64,
    /// Largest relative realized-versus-target gap over uncapped steps.
    pub nmd_max_rel_gap: f64,
    pub alpha_mean: f64,
    pub euler_residual_mean: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    /// Wall-clock time of the update; the only field that varies between
    /// identical runs.
    pub seconds: f64,
}

impl MetricsRecord {
    /// Copy with the wall-clock field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Diversity statistics of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiversityStats {
    pub target_mean: f64,
    pub realized_mean: f64,
    pub alpha_mean: f64,
    /// Largest relative gap between realized and target over steps whose
    /// unscaled estimate exceeds the floor and whose α is below the cap.
    pub max_rel_gap: f64,
    pub matched_steps: usize,
    pub capped_steps: usize,
}

pub fn diversity_stats(batch: &RolloutBatch) -> DiversityStats {
    let mut st = DiversityStats::default();
    let mut n = 0usize;
    for s in batch.samples.iter().filter(|s| s.agents.len() >= 2) {
        n += 1;
        let realized = s.alpha * s.unscaled_nmd;
        st.target_mean += s.nmd_des;
        st.realized_mean += realized;
        st.alpha_mean += s.alpha;
        if s.unscaled_nmd > crate::diversity::ALPHA_FLOOR
            && s.alpha < crate::diversity::ALPHA_CAP
            && s.nmd_des > 0.0
        {
            st.matched_steps += 1;
            st.max_rel_gap = st.max_rel_gap.max((realized - s.nmd_des).abs() / s.nmd_des);
        } else {
            st.capped_steps += 1;
        }
    }
    if n > 0 {
        st.target_mean /= n as f64;
        st.realized_mean /= n as f64;
        st.alpha_mean /= n as f64;
    }
    st
}

/// Mean per-behavior Euler residual at the first step of each episode.
fn euler_audit(model: &Model, batch: &RolloutBatch) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in batch.samples.iter().filter(|s| s.t == 0 && s.agents.len() >= 2) {
        let rec = &batch.queries[s.query];
        let pairs: Vec<LoraPair> = (0..rec.packed.rows())
            .filter_map(|r| {
                LoraPair::from_flat(
                    rec.packed.row(r),
                    model.hypernet.rank,
                    model.hypernet.feature_dim,
                    model.hypernet.action_dim,
                )
                .ok()
            })
            .collect();
        let Some(o) = s.obs.first() else { continue };
        let Ok(devs) = pairs
            .iter()
            .map(|p| deviation(&model.backbone, p, o))
            .collect::<Result<Vec<_>>>()
            .and_then(DeviationSet::new)
        else {
            continue;
        };
        for m in 0..devs.behavior_count() {
            if let Ok(r) = euler_residual(&devs, 1, m) {
                total += r;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub struct Trainer {
    pub task: TaskConfig,
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub alpha_ema: f64,
    pub env_steps: u64,
    pub updates: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(task: TaskConfig, model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        task.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(&mut rng, &model_config, task.obs_width(), task.agents)?;
        let adam = Adam::new(config.adam, &model);
        Ok(Self {
            task,
            model_config,
            config,
            model,
            adam,
            alpha_ema: 1.0,
            env_steps: 0,
            updates: 0,
            rng,
        })
    }

    /// Seed of the next rollout wave.
    pub fn wave_seed(&self) -> u64 {
        instance_seed(self.config.seed, self.updates as usize)
    }

    pub fn collect(&mut self) -> Result<RolloutBatch> {
        let seed = self.wave_seed();
        collect_rollouts(&self.model, &self.task, &self.config, seed, &mut self.alpha_ema)
    }

    /// Several epochs of minibatch updates over shuffled whole time steps;
    /// returns the mean loss report and mean pre-clip gradient norm.
    pub fn ppo_update(&mut self, batch: &RolloutBatch) -> Result<(LossReport, f64)> {
        let mut order: Vec<usize> = (0..batch.steps.len()).collect();
        let mut acc = LossReport::default();
        let mut norm_sum = 0.0;
        let mut n = 0usize;
        let mb = self.config.minibatches.min(order.len().max(1));
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            let size = order.len().div_ceil(mb);
            for chunk in order.chunks(size.max(1)) {
                let (report, mut grads) = loss_and_grads(&self.model, batch, chunk, &self.config)?;
                let norm = clip_grad_norm(&mut grads, self.config.max_grad_norm);
                self.adam.step(&mut self.model, &grads);
                acc.total += report.total;
                acc.policy += report.policy;
                acc.value += report.value;
                acc.entropy += report.entropy;
                norm_sum += norm;
                n += 1;
            }
        }
        let k = n.max(1) as f64;
        Ok((
            LossReport {
                total: acc.total / k,
                policy: acc.policy / k,
                value: acc.value / k,
                entropy: acc.entropy / k,
            },
            norm_sum / k,
        ))
    }

    /// One collect-and-update cycle.
    pub fn iterate(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        let batch = self.collect()?;
        let stats = diversity_stats(&batch);
        let euler = euler_audit(&self.model, &batch);
        let (report, grad_norm) = self.ppo_update(&batch)?;
        self.env_steps += batch.env_steps() as u64;
        self.updates += 1;
        let eps = batch.episodes.len().max(1) as f64;
        Ok(MetricsRecord {
            update: self.updates,
            env_steps: self.env_steps,
            mean_reward: batch.episodes.iter().map(|e| e.ret).sum::<f64>() / eps,
            completion_rate: batch.episodes.iter().filter(|e| e.completed).count() as f64 / eps,
            episode_len_mean: batch.episodes.iter().map(|e| e.len as f64).sum::<f64>() / eps,
            nmd_target_mean: stats.target_mean,
            nmd_realized_mean: stats.realized_mean,
            nmd_max_rel_gap: stats.max_rel_gap,
            alpha_mean: stats.alpha_mean,
            euler_residual_mean: euler,
            policy_loss: report.policy,
            value_loss: report.value,
            entropy: report.entropy,
            grad_norm,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Iterates until the step budget is spent, handing each record to `sink`.
    pub fn train(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while self.env_steps < self.config.total_steps {
            let rec = self.iterate()?;
            sink(&rec)?;
        }
        Ok(())
    }
}

/// Mean episode return of uniformly random actions over `episodes` episodes.
pub fn random_policy_baseline(task: &TaskConfig, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for ep in 0..episodes {
        let s = instance_seed(seed, ep);
        let (mut state, _) = reset(task, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(s, usize::MAX));
        loop {
            let actions: Vec<[f64; 2]> = (0..state.live_count())
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let out = step(task, &state, &actions)?;
            total += out.reward;
            state = out.state;
            if out.done {
                break;
            }
        }
    }
    Ok(total / episodes.max(1) as f64)
}
