//! Clipped-surrogate update through the hypernetwork, the LoRA deviation and
//! the diversity scalar.

use std::collections::BTreeMap;

use super::ppo::normalize_advantages;
use super::rollout::RolloutBatch;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::hypernet::HyperQuery;
use crate::model::Model;
use crate::numeric::{Tape, Tensor2};
use crate::policy::{entropy_on_tape, log_prob_on_tape, team_forward, TeamBatch, TeamSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

/// Loss over the time steps `steps` (indices into [`RolloutBatch::steps`])
/// and its gradient for every model tensor in visit order.
///
/// Advantages are normalized within the minibatch.
pub fn loss_and_grads(
    model: &Model,
    batch: &RolloutBatch,
    steps: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossReport, Vec<Tensor2>)> {
    let samples: Vec<usize> = steps
        .iter()
        .flat_map(|&g| batch.steps[g].samples.iter().copied())
        .collect();
    let mut local_group = BTreeMap::new();
    for (k, &g) in steps.iter().enumerate() {
        local_group.insert(g, k);
    }
    let mut query_ids: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &samples {
        query_ids.entry(batch.samples[i].query).or_insert(0);
    }
    let mut queries: Vec<HyperQuery> = Vec::with_capacity(query_ids.len());
    let mut offset = 0;
    for (q, off) in query_ids.iter_mut() {
        *off = offset;
        let rec = &batch.queries[*q];
        offset += rec.input.observations.len();
        queries.push(rec.input.clone());
    }

    let mut obs_rows = Vec::new();
    let mut pre_rows = Vec::new();
    let mut old_lp = Vec::new();
    let mut lora_rows = Vec::new();
    let mut teams = Vec::with_capacity(samples.len());
    let mut adv: Vec<f64> = samples.iter().map(|&i| batch.samples[i].advantage).collect();
    normalize_advantages(&mut adv);
    let mut adv_rows = Vec::new();
    let mut crit_rows = Vec::with_capacity(samples.len());
    let mut returns = Vec::with_capacity(samples.len());
    let mut first_row = BTreeMap::new();
    for (k, &i) in samples.iter().enumerate() {
        let s = &batch.samples[i];
        first_row.insert(i, obs_rows.len());
        let rec = &batch.queries[s.query];
        let base = query_ids[&s.query];
        for (j, &agent) in s.agents.iter().enumerate() {
            let pos = rec
                .agents
                .iter()
                .position(|&a| a == agent)
                .ok_or_else(|| Error::Usage(format!("agent {agent} has no behavior in its assignment")))?;
            lora_rows.push(base + pos);
            obs_rows.push(s.obs[j].clone());
            pre_rows.push(s.pre_tanh[j].clone());
            old_lp.push(s.log_probs[j]);
            adv_rows.push(adv[k]);
        }
        teams.push(TeamSpec {
            agents: s.agents.len(),
            nmd_des: s.nmd_des,
            fallback_alpha: s.fallback_alpha,
            group: local_group[&s.group],
        });
        crit_rows.push(s.critic_input.clone());
        returns.push(s.ret);
    }

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let packed = vars.hypernet.forward(&mut tape, &queries);
    let team_batch = TeamBatch {
        obs: Tensor2::from_rows(&obs_rows)?,
        teams,
        lora_rows,
        groups: steps
            .iter()
            .map(|&g| batch.steps[g].compare.iter().map(|&(i, j)| first_row[&i] + j).collect())
            .collect(),
    };
    let tf = team_forward(&mut tape, &vars.policy, packed, &team_batch, model.hypernet.rank, cfg.freeze_alpha);
    let new_lp = log_prob_on_tape(&mut tape, &Tensor2::from_rows(&pre_rows)?, tf.mean, vars.policy.log_std);
    let old = tape.constant(Tensor2::col_vector(old_lp));
    let log_ratio = tape.sub(new_lp, old);
    let ratio = tape.exp(log_ratio);
    let a = tape.constant(Tensor2::col_vector(adv_rows));
    let s1 = tape.mul(ratio, a);
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = tape.mul(clipped, a);
    let surr = tape.min(s1, s2);
    let surr = tape.mean(surr);
    let policy_loss = tape.scale(surr, -1.0);

    let x = tape.constant(Tensor2::from_rows(&crit_rows)?);
    let v = vars.critic.forward(&mut tape, x);
    let r = tape.constant(Tensor2::col_vector(returns));
    let diff = tape.sub(v, r);
    let sq = tape.square(diff);
    let value_loss = tape.mean(sq);

    let entropy = entropy_on_tape(&mut tape, vars.policy.log_std);

    let vl = tape.scale(value_loss, cfg.value_coef);
    let el = tape.scale(entropy, -cfg.entropy_coef);
    let total = tape.add(policy_loss, vl);
    let total = tape.add(total, el);

    let report = LossReport {
        total: tape.value(total).item(),
        policy: tape.value(policy_loss).item(),
        value: tape.value(value_loss).item(),
        entropy: tape.value(entropy).item(),
    };
    if !report.total.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {report:?}")));
    }
    let grads = tape.backward(total)?;
    let out = vars.vars().into_iter().map(|v| grads.wrt(v)).collect();
    Ok((report, out))
}
