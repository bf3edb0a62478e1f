//! Batched rollout collection with event-driven behavior assignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::TrainConfig;
use crate::env::{instance_seed, reset, step_with_plan, PerturbationPlan, PomgState, TaskConfig, Vec2};
use crate::env::trajectory::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::event::{encode_event, EventRecord};
use crate::hypernet::{HyperQuery, HypernetParams};
use crate::model::{critic_input_width, Model};
use crate::numeric::{MlpParams, Tape, Tensor2};
use crate::policy::{act, team_forward, PolicyBackbone, TeamBatch, TeamSpec};

/// One team's input to [`team_means`].
#[derive(Clone, Copy, Debug)]
pub struct TeamInput<'a> {
    pub obs: &'a [Vec<f64>],
    /// Flattened LoRA pairs, one row per agent in `obs` order.
    pub packed: &'a Tensor2,
    pub nmd_des: f64,
    pub fallback_alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeamOutput {
    pub means: Vec<Vec<f64>>,
    pub alpha: f64,
    /// Unscaled estimator over the team's deviations at its observations.
    pub unscaled: f64,
}

impl TeamOutput {
    /// Estimator over the α-scaled behaviors.
    pub fn realized(&self) -> f64 {
        self.alpha * self.unscaled
    }
}

/// Pre-activation means for several teams sharing one estimator pool.
///
/// `compare` lists `(team, agent position)` observations at which every
/// behavior of every team is evaluated for `N̂`.
pub fn team_means(
    backbone: &PolicyBackbone,
    rank: usize,
    teams: &[TeamInput<'_>],
    compare: &[(usize, usize)],
) -> Result<Vec<TeamOutput>> {
    if teams.is_empty() {
        return Ok(Vec::new());
    }
    let mut obs_rows = Vec::new();
    let mut packed_rows = Vec::new();
    let mut lora_rows = Vec::new();
    let mut first_row = Vec::with_capacity(teams.len());
    let mut specs = Vec::with_capacity(teams.len());
    for t in teams {
        first_row.push(obs_rows.len());
        for (j, o) in t.obs.iter().enumerate() {
            lora_rows.push(packed_rows.len() + j);
            obs_rows.push(o.clone());
        }
        for r in 0..t.packed.rows() {
            packed_rows.push(t.packed.row(r).to_vec());
        }
        specs.push(TeamSpec {
            agents: t.obs.len(),
            nmd_des: t.nmd_des,
            fallback_alpha: t.fallback_alpha,
            group: 0,
        });
    }
    let rows = compare.iter().map(|&(k, j)| first_row[k] + j).collect();
    let mut tape = Tape::new();
    let vars = backbone.bind(&mut tape, false);
    let packed = tape.constant(Tensor2::from_rows(&packed_rows)?);
    let batch = TeamBatch {
        obs: Tensor2::from_rows(&obs_rows)?,
        teams: specs,
        lora_rows,
        groups: vec![rows],
    };
    let out = team_forward(&mut tape, &vars, packed, &batch, rank, true);
    let mean = tape.value(out.mean);
    if !mean.is_finite() {
        return Err(Error::Divergence("non-finite policy output".into()));
    }
    let alpha = tape.value(out.alpha);
    let unscaled = tape.value(out.unscaled);
    let mut row = 0;
    Ok(teams
        .iter()
        .enumerate()
        .map(|(s, t)| {
            let means = (0..t.obs.len()).map(|j| mean.row(row + j).to_vec()).collect();
            row += t.obs.len();
            TeamOutput {
                means,
                alpha: alpha.get(s, 0),
                unscaled: unscaled.get(s, 0),
            }
        })
        .collect())
}

/// Every `(team, agent)` observation, or `limit` of them drawn without
/// replacement when `limit` is positive and smaller.
pub fn comparison_set<R: Rng>(rng: &mut R, team_sizes: &[usize], limit: usize) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = team_sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| (0..n).map(move |j| (k, j)))
        .collect();
    if limit == 0 || all.len() <= limit {
        return all;
    }
    let mut picked = rand::seq::index::sample(rng, all.len(), limit).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Zero-padded team observations followed by the alive mask.
pub fn critic_input(slots: usize, obs_dim: usize, agents: &[usize], obs: &[Vec<f64>]) -> Vec<f64> {
    let mut x = vec![0.0; critic_input_width(slots, obs_dim)];
    for (&a, o) in agents.iter().zip(obs) {
        if a < slots {
            x[a * obs_dim..(a + 1) * obs_dim].copy_from_slice(o);
            x[slots * obs_dim + a] = 1.0;
        }
    }
    x
}

pub fn critic_values(critic: &MlpParams, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let vars = critic.bind(&mut tape, false);
    let x = tape.constant(Tensor2::from_rows(inputs)?);
    let v = vars.forward(&mut tape, x);
    let v = tape.value(v);
    if !v.is_finite() {
        return Err(Error::Divergence("non-finite value estimate".into()));
    }
    Ok(v.data().to_vec())
}

/// Runs the hypernetwork on several queries at once; one packed matrix per query.
pub fn generate_batch(params: &HypernetParams, queries: &[HyperQuery]) -> Result<Vec<Tensor2>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let out = vars.forward(&mut tape, queries);
    let out = tape.value(out);
    if !out.is_finite() {
        return Err(Error::Divergence("non-finite hypernetwork output".into()));
    }
    let mut row = 0;
    Ok(queries
        .iter()
        .map(|q| {
            let idx: Vec<usize> = (row..row + q.observations.len()).collect();
            row += q.observations.len();
            out.gather_rows(&idx)
        })
        .collect())
}

/// A hypernetwork query issued during collection.
#[derive(Clone, Debug)]
pub struct QueryRecord {
    pub env: usize,
    pub t: usize,
    pub agents: Vec<usize>,
    pub input: HyperQuery,
    pub event: EventRecord,
    pub packed: Tensor2,
}

/// One environment step of one environment.
#[derive(Clone, Debug)]
pub struct StepSample {
    pub env: usize,
    pub t: usize,
    pub agents: Vec<usize>,
    pub obs: Vec<Vec<f64>>,
    pub pre_tanh: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    pub event: EventRecord,
    /// Index into [`RolloutBatch::queries`] of the assignment in force.
    pub query: usize,
    /// Index into [`RolloutBatch::steps`].
    pub group: usize,
    pub nmd_des: f64,
    pub fallback_alpha: f64,
    pub alpha: f64,
    pub unscaled_nmd: f64,
    pub critic_input: Vec<f64>,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub env: usize,
    pub ret: f64,
    pub len: usize,
    pub completed: bool,
    pub queries: usize,
    pub events: usize,
}

/// The samples of one synchronized time step; they share one α denominator.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGroup {
    pub t: usize,
    pub samples: Vec<usize>,
    /// `(sample, agent position)` observations the estimator compared at.
    pub compare: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub samples: Vec<StepSample>,
    pub steps: Vec<StepGroup>,
    /// Filled only when [`RolloutOptions::trajectories`] is set.
    pub trajectories: Vec<TrajectoryRecord>,
    pub queries: Vec<QueryRecord>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBatch {
    pub fn env_steps(&self) -> usize {
        self.samples.len()
    }

    /// Hypernetwork calls issued in environment `env`.
    pub fn queries_in_env(&self, env: usize) -> usize {
        self.queries.iter().filter(|q| q.env == env).count()
    }
}

/// `exp(U(ln lo, ln hi))`.
pub fn sample_log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

/// Collection settings beyond the training configuration.
#[derive(Clone, Debug, Default)]
pub struct RolloutOptions {
    /// Applied independently in every environment.
    pub plan: PerturbationPlan,
    /// Fixed diversity target instead of the sampled one.
    pub nmd_des: Option<f64>,
    /// Act with the mean.
    pub deterministic: bool,
    /// Use the stored α average instead of normalizing over the batch.
    pub ema_alpha: bool,
    pub trajectories: bool,
    /// Leave the α average untouched.
    pub freeze_ema: bool,
}

struct EnvSlot {
    state: PomgState,
    plan: PerturbationPlan,
    obs: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    nmd_des: f64,
    query: usize,
    done: bool,
    ret: f64,
    queries: usize,
    events: usize,
    samples: Vec<usize>,
}

/// Collects one synchronized episode from each of `cfg.envs` environments.
///
/// `alpha_ema` averages α per unit target over steps; a step holding fewer
/// than two live behaviors falls back to `nmd_des · alpha_ema`.
pub fn collect_rollouts(
    model: &Model,
    task: &TaskConfig,
    cfg: &TrainConfig,
    wave_seed: u64,
    alpha_ema: &mut f64,
) -> Result<RolloutBatch> {
    collect_with(model, task, cfg, wave_seed, alpha_ema, &RolloutOptions::default())
}

/// [`collect_rollouts`] with perturbations, fixed targets and recording.
pub fn collect_with(
    model: &Model,
    task: &TaskConfig,
    cfg: &TrainConfig,
    wave_seed: u64,
    alpha_ema: &mut f64,
    opts: &RolloutOptions,
) -> Result<RolloutBatch> {
    opts.plan.validate(task)?;
    let rank = model.hypernet.rank;
    let slots = task.agents;
    let obs_dim = model.obs_dim();
    let mut envs = (0..cfg.envs)
        .map(|e| {
            let seed = instance_seed(wave_seed, e);
            let (mut state, obs) = reset(task, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, usize::MAX));
            let sampled = sample_log_uniform(&mut rng, cfg.nmd_des_min, cfg.nmd_des_max);
            let nmd_des = opts.nmd_des.unwrap_or(sampled);
            state.diversity_target = nmd_des;
            let mut plan = opts.plan.clone();
            plan.rearm();
            Ok(EnvSlot {
                state,
                plan,
                obs,
                rng,
                nmd_des,
                query: 0,
                done: false,
                ret: 0.0,
                queries: 0,
                events: 0,
                samples: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut batch = RolloutBatch::default();
    let mut compare_rng = ChaCha8Rng::seed_from_u64(instance_seed(wave_seed, usize::MAX));
    let initial: Vec<HyperQuery> = envs
        .iter()
        .map(|s| HyperQuery {
            observations: s.obs.clone(),
            event: encode_event(&EventRecord::null(0)),
            nmd_des: s.nmd_des,
        })
        .collect();
    issue_queries(model, &mut batch, &mut envs, initial, (0..cfg.envs).collect(), 0, &[])?;

    for t in 0..task.horizon {
        let active: Vec<usize> = (0..envs.len()).filter(|&e| !envs[e].done).collect();
        if active.is_empty() {
            break;
        }
        let inputs: Vec<TeamInput<'_>> = active
            .iter()
            .map(|&e| TeamInput {
                obs: &envs[e].obs,
                packed: &batch.queries[envs[e].query].packed,
                nmd_des: envs[e].state.diversity_target,
                fallback_alpha: envs[e].state.diversity_target * *alpha_ema,
            })
            .collect();
        let sizes: Vec<usize> = inputs.iter().map(|i| i.obs.len()).collect();
        let live_behaviors: usize = sizes.iter().sum();
        let compare = comparison_set(&mut compare_rng, &sizes, cfg.nmd_obs_samples);
        let outs = if opts.ema_alpha {
            let measured = team_means(&model.backbone, rank, &inputs, &compare)?;
            let mut outs = team_means(&model.backbone, rank, &inputs, &[])?;
            for (o, m) in outs.iter_mut().zip(measured) {
                o.unscaled = m.unscaled;
            }
            outs
        } else {
            team_means(&model.backbone, rank, &inputs, &compare)?
        };
        let group = batch.steps.len();
        let first_sample = batch.samples.len();
        let crit_in: Vec<Vec<f64>> = active
            .iter()
            .map(|&e| critic_input(slots, obs_dim, &envs[e].state.live_agents(), &envs[e].obs))
            .collect();
        let values = critic_values(&model.critic, &crit_in)?;
        let log_std = model.backbone.log_std();

        let mut alpha_sum = 0.0;
        let mut alpha_n = 0;
        let mut actions: Vec<Vec<Vec2>> = Vec::with_capacity(active.len());
        let mut drawn = Vec::with_capacity(active.len());
        for (k, &e) in active.iter().enumerate() {
            let slot = &mut envs[e];
            let samples: Vec<_> = outs[k]
                .means
                .iter()
                .map(|m| act(m, &log_std, &mut slot.rng, opts.deterministic))
                .collect();
            actions.push(samples.iter().map(|s| [s.action[0], s.action[1]]).collect());
            drawn.push(samples);
            if live_behaviors >= 2 && slot.state.diversity_target > 0.0 {
                alpha_sum += outs[k].alpha / slot.state.diversity_target;
                alpha_n += 1;
            }
        }
        let mut live_slots: Vec<&mut EnvSlot> = envs.iter_mut().filter(|s| !s.done).collect();
        let stepped: Vec<_> = live_slots
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(slot, a)| step_with_plan(task, &slot.state, a, &mut slot.plan))
            .collect::<Result<Vec<_>>>()?;

        batch.steps.push(StepGroup {
            t,
            samples: (first_sample..first_sample + active.len()).collect(),
            compare: compare.iter().map(|&(k, j)| (first_sample + k, j)).collect(),
        });
        let mut requery = Vec::new();
        let mut requery_envs = Vec::new();
        for (k, (&e, out)) in active.iter().zip(stepped).enumerate() {
            let slot = &mut envs[e];
            let sample = StepSample {
                env: e,
                t,
                agents: slot.state.live_agents(),
                obs: std::mem::take(&mut slot.obs),
                pre_tanh: drawn[k].iter().map(|s| s.pre_tanh.clone()).collect(),
                log_probs: drawn[k].iter().map(|s| s.log_prob).collect(),
                reward: out.reward,
                value: values[k],
                done: out.done,
                event: out.event.clone(),
                query: slot.query,
                group,
                nmd_des: slot.state.diversity_target,
                fallback_alpha: slot.state.diversity_target * *alpha_ema,
                alpha: outs[k].alpha,
                unscaled_nmd: outs[k].unscaled,
                critic_input: crit_in[k].clone(),
                advantage: 0.0,
                ret: 0.0,
            };
            if opts.trajectories {
                let mut rec = TrajectoryRecord::new(t, &out.state, out.reward, &out.event, out.done);
                rec.episode = Some(e);
                rec.nmd_target = Some(sample.nmd_des);
                rec.nmd_realized = Some(outs[k].realized());
                rec.alpha = Some(outs[k].alpha);
                batch.trajectories.push(rec);
            }
            slot.samples.push(batch.samples.len());
            batch.samples.push(sample);
            slot.ret += out.reward;
            slot.state = out.state;
            slot.obs = out.observations;
            slot.done = out.done;
            if !out.event.is_null() {
                slot.events += 1;
                if !cfg.single_query && !slot.done {
                    requery.push(HyperQuery {
                        observations: slot.obs.clone(),
                        event: encode_event(&out.event),
                        nmd_des: slot.state.diversity_target,
                    });
                    requery_envs.push(e);
                }
            }
        }
        let events: Vec<EventRecord> = requery_envs
            .iter()
            .map(|&e| batch.samples[*envs[e].samples.last().expect("stepped")].event.clone())
            .collect();
        issue_queries(model, &mut batch, &mut envs, requery, requery_envs, t + 1, &events)?;

        if alpha_n > 0 && !opts.freeze_ema && !opts.ema_alpha {
            let mean = alpha_sum / alpha_n as f64;
            *alpha_ema = cfg.alpha_ema_decay * *alpha_ema + (1.0 - cfg.alpha_ema_decay) * mean;
        }
    }

    for (e, slot) in envs.iter().enumerate() {
        let idx = &slot.samples;
        let rewards: Vec<f64> = idx.iter().map(|&i| batch.samples[i].reward * cfg.reward_scale).collect();
        let values: Vec<f64> = idx.iter().map(|&i| batch.samples[i].value).collect();
        let dones: Vec<bool> = idx.iter().map(|&i| batch.samples[i].done).collect();
        let (adv, ret) = super::ppo::compute_gae(&rewards, &values, &dones, 0.0, cfg.gamma, cfg.lambda);
        for (k, &i) in idx.iter().enumerate() {
            batch.samples[i].advantage = adv[k];
            batch.samples[i].ret = ret[k];
        }
        batch.episodes.push(EpisodeSummary {
            env: e,
            ret: slot.ret,
            len: idx.len(),
            completed: slot.state.completed,
            queries: slot.queries,
            events: slot.events,
        });
    }
    Ok(batch)
}

fn issue_queries(
    model: &Model,
    batch: &mut RolloutBatch,
    envs: &mut [EnvSlot],
    queries: Vec<HyperQuery>,
    owners: Vec<usize>,
    t: usize,
    events: &[EventRecord],
) -> Result<()> {
    let packed = generate_batch(&model.hypernet, &queries)?;
    for (k, ((q, e), p)) in queries.into_iter().zip(owners).zip(packed).enumerate() {
        let slot = &mut envs[e];
        slot.query = batch.queries.len();
        slot.queries += 1;
        batch.queries.push(QueryRecord {
            env: e,
            t,
            agents: slot.state.live_agents(),
            input: q,
            event: events.get(k).cloned().unwrap_or_else(|| EventRecord::null(t)),
            packed: p,
        });
    }
    Ok(())
}
