//! Shared-backbone policy with a LoRA deviation on the final linear layer.
//!
//! The pre-activation of behavior `m` is `W_shared φ(o) + α D_m C_m φ(o)`.
//! Actions are `tanh` of a Gaussian sample around it, with a log standard
//! deviation shared by all behaviors.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diversity::{self, DeviationSet, GaussianPolicyOutput, ALPHA_CAP, ALPHA_FLOOR};
use crate::error::{config, Result};
use crate::numeric::{mlp_forward, MlpParams, MlpVars, Params, Tape, Tensor2, Var};

/// Stabilizer inside the `tanh` change-of-variables term.
pub const TANH_LOG_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBackbone {
    /// Produces the shared feature `φ(o) ∈ ℝ^d`.
    pub feature_net: MlpParams,
    /// `d_a × d`.
    pub w_shared: Tensor2,
    /// `1 × d_a`, identical for every behavior.
    pub shared_log_std: Tensor2,
}

impl PolicyBackbone {
    pub fn new(feature_net: MlpParams, w_shared: Tensor2, shared_log_std: Tensor2) -> Result<Self> {
        let d = feature_net.output_width();
        if w_shared.cols() != d {
            return config(format!(
                "w_shared has {} columns, feature width is {d}",
                w_shared.cols()
            ));
        }
        if shared_log_std.shape() != (1, w_shared.rows()) {
            return config("shared_log_std must be 1 x action_dim");
        }
        if !w_shared.is_finite() {
            return config("w_shared has non-finite entries");
        }
        Ok(Self {
            feature_net,
            w_shared,
            shared_log_std,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_shared.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.w_shared.rows()
    }

    pub fn obs_dim(&self) -> usize {
        self.feature_net.input_width()
    }

    pub fn features(&self, obs: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.feature_net, obs)
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.shared_log_std.data().to_vec()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PolicyVars {
        let feature = self.feature_net.bind(tape, trainable);
        let (w_shared, log_std) = if trainable {
            (tape.param(self.w_shared.clone()), tape.param(self.shared_log_std.clone()))
        } else {
            (
                tape.constant(self.w_shared.clone()),
                tape.constant(self.shared_log_std.clone()),
            )
        };
        PolicyVars {
            feature,
            w_shared,
            log_std,
        }
    }
}

impl Params for PolicyBackbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        self.feature_net.visit(&format!("{prefix}.feature"), f);
        f(format!("{prefix}.w_shared"), &self.w_shared);
        f(format!("{prefix}.log_std"), &self.shared_log_std);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
        self.feature_net.visit_mut(&format!("{prefix}.feature"), f);
        f(format!("{prefix}.w_shared"), &mut self.w_shared);
        f(format!("{prefix}.log_std"), &mut self.shared_log_std);
    }
}

/// Rank-`r` adapter factors `(C, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `r × d`.
    pub c: Tensor2,
    /// `d_a × r`.
    pub d_up: Tensor2,
}

impl LoraPair {
    pub fn new(c: Tensor2, d_up: Tensor2) -> Result<Self> {
        let r = c.rows();
        if r == 0 || d_up.cols() != r {
            return config(format!(
                "LoRA factors do not chain: C is {:?}, D is {:?}",
                c.shape(),
                d_up.shape()
            ));
        }
        if r > c.cols() {
            return config(format!("LoRA rank {r} exceeds feature width {}", c.cols()));
        }
        Ok(Self { c, d_up })
    }

    pub fn zeros(rank: usize, feature_dim: usize, action_dim: usize) -> Self {
        Self {
            c: Tensor2::zeros(rank, feature_dim),
            d_up: Tensor2::zeros(action_dim, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.c.rows()
    }

    /// Width of the flattened pair, `r·d + d_a·r`.
    pub fn flat_width(rank: usize, feature_dim: usize, action_dim: usize) -> usize {
        rank * feature_dim + action_dim * rank
    }

    /// `C` row-major followed by `D` row-major.
    pub fn from_flat(flat: &[f64], rank: usize, feature_dim: usize, action_dim: usize) -> Result<Self> {
        if flat.len() != Self::flat_width(rank, feature_dim, action_dim) {
            return config(format!(
                "flattened LoRA pair has {} values, expected {}",
                flat.len(),
                Self::flat_width(rank, feature_dim, action_dim)
            ));
        }
        let split = rank * feature_dim;
        Self::new(
            Tensor2::from_vec(rank, feature_dim, flat[..split].to_vec()),
            Tensor2::from_vec(action_dim, rank, flat[split..].to_vec()),
        )
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.c.data().to_vec();
        v.extend_from_slice(self.d_up.data());
        v
    }
}

fn check_lora(backbone: &PolicyBackbone, lora: &LoraPair) -> Result<()> {
    if lora.c.cols() != backbone.feature_dim() || lora.d_up.rows() != backbone.action_dim() {
        return config(format!(
            "LoRA shapes C {:?}, D {:?} do not fit feature width {} and action width {}",
            lora.c.shape(),
            lora.d_up.shape(),
            backbone.feature_dim(),
            backbone.action_dim()
        ));
    }
    Ok(())
}

fn matvec(m: &Tensor2, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `u_m(o) = D C φ(o)`.
pub fn deviation(backbone: &PolicyBackbone, lora: &LoraPair, obs: &[f64]) -> Result<Vec<f64>> {
    check_lora(backbone, lora)?;
    let phi = backbone.features(obs)?;
    Ok(matvec(&lora.d_up, &matvec(&lora.c, &phi)))
}

/// `z_m(o) = W_shared φ(o) + α D C φ(o)`.
pub fn preactivation(backbone: &PolicyBackbone, lora: &LoraPair, alpha: f64, obs: &[f64]) -> Result<Vec<f64>> {
    check_lora(backbone, lora)?;
    let phi = backbone.features(obs)?;
    let shared = matvec(&backbone.w_shared, &phi);
    let dev = matvec(&lora.d_up, &matvec(&lora.c, &phi));
    Ok(shared.iter().zip(&dev).map(|(s, u)| s + alpha * u).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    pub pre_tanh: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// Log-density of the squashed Gaussian at pre-activation sample `z`.
pub fn squashed_log_prob(z: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((&zi, &mi), &ls) in z.iter().zip(mean).zip(log_std) {
        let s = (zi - mi) / ls.exp();
        lp += -0.5 * s * s - ls - 0.5 * (2.0 * PI).ln();
        let t = zi.tanh();
        lp -= (1.0 - t * t + TANH_LOG_EPS).ln();
    }
    lp
}

/// Samples (or, when `deterministic`, takes the mode of) the squashed Gaussian.
pub fn act<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R, deterministic: bool) -> ActionSample {
    let pre_tanh: Vec<f64> = if deterministic {
        mean.to_vec()
    } else {
        mean.iter()
            .zip(log_std)
            .map(|(m, ls)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + ls.exp() * eps
            })
            .collect()
    };
    let action = pre_tanh.iter().map(|z| z.tanh()).collect();
    let log_prob = squashed_log_prob(&pre_tanh, mean, log_std);
    ActionSample {
        pre_tanh,
        action,
        log_prob,
    }
}

/// Unscaled estimator over the deviations of `loras` at `obs_set`.
pub fn unscaled_team_nmd(backbone: &PolicyBackbone, loras: &[LoraPair], obs_set: &[Vec<f64>]) -> Result<f64> {
    let sets = obs_set
        .iter()
        .map(|o| {
            let devs = loras
                .iter()
                .map(|l| deviation(backbone, l, o))
                .collect::<Result<Vec<_>>>()?;
            DeviationSet::new(devs)
        })
        .collect::<Result<Vec<_>>>()?;
    diversity::nmd_hat_deviation_sets(&sets)
}

/// Estimator over the pre-activation means induced by `loras` at scale `alpha`.
pub fn realized_team_nmd(
    backbone: &PolicyBackbone,
    loras: &[LoraPair],
    alpha: f64,
    obs_set: &[Vec<f64>],
) -> Result<f64> {
    let log_std = backbone.log_std();
    let policies: Vec<Box<diversity::PolicyFn<'_>>> = loras
        .iter()
        .map(|l| {
            let log_std = log_std.clone();
            let f = move |o: &[f64]| GaussianPolicyOutput {
                mean: preactivation(backbone, l, alpha, o).expect("shapes checked"),
                log_std: log_std.clone(),
            };
            Box::new(f) as Box<diversity::PolicyFn<'_>>
        })
        .collect();
    for l in loras {
        check_lora(backbone, l)?;
    }
    if let Some(o) = obs_set.first() {
        backbone.features(o)?;
    }
    let refs: Vec<&diversity::PolicyFn<'_>> = policies.iter().map(|b| b.as_ref()).collect();
    diversity::nmd_hat(&refs, obs_set)
}

/// Tape handles for a [`PolicyBackbone`].
#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub feature: MlpVars,
    pub w_shared: Var,
    pub log_std: Var,
}

impl PolicyVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.feature.vars();
        v.push(self.w_shared);
        v.push(self.log_std);
        v
    }
}

/// One team at one timestep: its live agents share a diversity target and
/// are scaled by one α computed from their own deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeamSpec {
    pub agents: usize,
    pub nmd_des: f64,
    /// α used when the team's group holds fewer than two behaviors.
    pub fallback_alpha: f64,
    /// Index into [`TeamBatch::groups`] of the estimator pool the team shares.
    pub group: usize,
}

/// Row-batched input to [`team_forward`]; observation rows are grouped by team.
#[derive(Clone, Debug)]
pub struct TeamBatch {
    pub obs: Tensor2,
    pub teams: Vec<TeamSpec>,
    /// For each observation row, the row of the packed LoRA matrix holding
    /// that agent's behavior.
    pub lora_rows: Vec<usize>,
    /// Per group, the observation rows at which the group's behaviors are
    /// compared. Every agent of every team in a group is one behavior.
    pub groups: Vec<Vec<usize>>,
}

impl TeamBatch {
    /// Single group holding every team, compared at every observation row.
    pub fn pooled(obs: Tensor2, mut teams: Vec<TeamSpec>, lora_rows: Vec<usize>) -> Self {
        teams.iter_mut().for_each(|t| t.group = 0);
        let rows = (0..obs.rows()).collect();
        Self {
            obs,
            teams,
            lora_rows,
            groups: vec![rows],
        }
    }
}

pub struct TeamForward {
    /// Pre-activation means, one row per agent.
    pub mean: Var,
    /// α per team (`teams × 1`).
    pub alpha: Var,
    /// Unscaled estimator of each team's group (`teams × 1`).
    pub unscaled: Var,
    /// Deviation of each agent's own behavior at its own observation.
    pub self_deviation: Var,
}

/// Records the batched policy on the tape.
///
/// Each group's estimator `N̂` runs over all behaviors of its teams at the
/// group's comparison rows. A team's α is `nmd_des / max(N̂, floor)` capped at
/// `cap`; teams whose group holds fewer than two behaviors use their
/// fallback. With `freeze_alpha` the scalar enters as a constant.
pub fn team_forward(
    tape: &mut Tape,
    vars: &PolicyVars,
    packed_lora: Var,
    batch: &TeamBatch,
    rank: usize,
    freeze_alpha: bool,
) -> TeamForward {
    let x = tape.constant(batch.obs.clone());
    let phi = vars.feature.forward(tape, x);
    let d = tape.value(phi).cols();
    let action_dim = tape.value(vars.w_shared).rows();
    let group_count = batch.groups.len();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); group_count];
    let mut team_of_row = Vec::with_capacity(batch.obs.rows());
    let mut first = 0;
    for (s, team) in batch.teams.iter().enumerate() {
        for j in 0..team.agents {
            members[team.group].push(first + j);
            team_of_row.push(s);
        }
        first += team.agents;
    }

    let mut phi_idx = Vec::new();
    let mut lora_idx = Vec::new();
    let mut pair_a = Vec::new();
    let mut pair_b = Vec::new();
    let mut pair_group = Vec::new();
    let mut coef = Vec::with_capacity(group_count);
    let mut live = Vec::with_capacity(group_count);
    for (g, rows) in batch.groups.iter().enumerate() {
        let b = members[g].len();
        if b < 2 || rows.is_empty() {
            coef.push(0.0);
            live.push(false);
            continue;
        }
        let base = phi_idx.len();
        let k = rows.len();
        for &m in &members[g] {
            for &o in rows {
                phi_idx.push(o);
                lora_idx.push(batch.lora_rows[m]);
            }
        }
        for j in 0..k {
            for m in 0..b {
                for q in m + 1..b {
                    pair_a.push(base + m * k + j);
                    pair_b.push(base + q * k + j);
                    pair_group.push(g);
                }
            }
        }
        coef.push(diversity::pair_coefficient(b, k));
        live.push(true);
    }

    let self_lora = Rc::new(batch.lora_rows.clone());
    let hidden = tape.packed_matvec(packed_lora, phi, Rc::clone(&self_lora), 0, rank);
    let self_dev = tape.packed_matvec(packed_lora, hidden, self_lora, rank * d, action_dim);

    let group_nmd = if pair_a.is_empty() {
        tape.constant(Tensor2::zeros(group_count, 1))
    } else {
        let phi_g = tape.gather_rows(phi, Rc::new(phi_idx));
        let lora_idx = Rc::new(lora_idx);
        let hidden = tape.packed_matvec(packed_lora, phi_g, Rc::clone(&lora_idx), 0, rank);
        let devs = tape.packed_matvec(packed_lora, hidden, lora_idx, rank * d, action_dim);
        let a = tape.gather_rows(devs, Rc::new(pair_a));
        let b = tape.gather_rows(devs, Rc::new(pair_b));
        let diff = tape.sub(a, b);
        let norms = tape.row_norm(diff);
        let sums = tape.segment_sum(norms, Rc::new(pair_group), group_count);
        let coef = tape.constant(Tensor2::col_vector(coef));
        tape.mul(sums, coef)
    };

    let team_group: Vec<usize> = batch.teams.iter().map(|t| t.group).collect();
    let unscaled = tape.gather_rows(group_nmd, Rc::new(team_group));
    let mask: Vec<f64> = batch.teams.iter().map(|t| if live[t.group] { 1.0 } else { 0.0 }).collect();
    let fallback: Vec<f64> = batch
        .teams
        .iter()
        .map(|t| if live[t.group] { 0.0 } else { t.fallback_alpha })
        .collect();
    let des: Vec<f64> = batch.teams.iter().map(|t| t.nmd_des).collect();

    let denom = tape.clamp(unscaled, ALPHA_FLOOR, f64::INFINITY);
    let des = tape.constant(Tensor2::col_vector(des));
    let ratio = tape.div(des, denom);
    let alpha = tape.clamp(ratio, 0.0, ALPHA_CAP);
    let mask = tape.constant(Tensor2::col_vector(mask));
    let masked = tape.mul(alpha, mask);
    let fallback = tape.constant(Tensor2::col_vector(fallback));
    let mut alpha = tape.add(masked, fallback);
    if freeze_alpha {
        alpha = tape.detach(alpha);
    }

    let alpha_rows = tape.gather_rows(alpha, Rc::new(team_of_row));
    let scaled = tape.mul_col(self_dev, alpha_rows);
    let shared = tape.matmul_bt(phi, vars.w_shared);
    let mean = tape.add(shared, scaled);
    TeamForward {
        mean,
        alpha,
        unscaled,
        self_deviation: self_dev,
    }
}

/// Squashed-Gaussian log-probabilities of stored pre-activation samples
/// (`rows × 1`).
pub fn log_prob_on_tape(tape: &mut Tape, pre_tanh: &Tensor2, mean: Var, log_std: Var) -> Var {
    let rows = pre_tanh.rows();
    let dims = pre_tanh.cols();
    let correction: f64 = 0.5 * dims as f64 * (2.0 * PI).ln();
    let squash: Vec<f64> = (0..rows)
        .map(|r| {
            pre_tanh
                .row(r)
                .iter()
                .map(|z| {
                    let t = z.tanh();
                    (1.0 - t * t + TANH_LOG_EPS).ln()
                })
                .sum::<f64>()
                + correction
        })
        .collect();
    let z = tape.constant(pre_tanh.clone());
    let diff = tape.sub(z, mean);
    let neg = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg);
    let scaled = tape.mul_row(diff, inv_std);
    let sq = tape.square(scaled);
    let quad = tape.row_sum(sq);
    let quad = tape.scale(quad, -0.5);
    let ls_sum = tape.sum(log_std);
    let ones = tape.constant(Tensor2::filled(rows, 1, 1.0));
    let ls_rows = tape.matmul(ones, ls_sum);
    let lp = tape.sub(quad, ls_rows);
    let squash = tape.constant(Tensor2::col_vector(squash));
    tape.sub(lp, squash)
}

/// Entropy of the pre-squash Gaussian, identical for every behavior (1×1).
pub fn entropy_on_tape(tape: &mut Tape, log_std: Var) -> Var {
    let dims = tape.value(log_std).cols() as f64;
    let s = tape.sum(log_std);
    tape.add_const(s, 0.5 * dims * (1.0 + (2.0 * PI).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Activation, Layer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_backbone(d: usize, da: usize) -> PolicyBackbone {
        let mut w = Tensor2::zeros(d, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        let net = MlpParams::new(vec![Layer::new(w, Tensor2::zeros(1, d), Activation::Identity).unwrap()]).unwrap();
        let mut ws = Tensor2::zeros(da, d);
        ws.set(0, 0, 0.5);
        ws.set(1, 1, -1.0);
        PolicyBackbone::new(net, ws, Tensor2::filled(1, da, 0.5f64.ln())).unwrap()
    }

    #[test]
    fn zero_lora_has_zero_deviation() {
        let bb = identity_backbone(3, 2);
        let lora = LoraPair::zeros(1, 3, 2);
        assert_eq!(deviation(&bb, &lora, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            preactivation(&bb, &lora, 7.0, &[1.0, 2.0, 3.0]).unwrap(),
            preactivation(&bb, &lora, 0.0, &[1.0, 2.0, 3.0]).unwrap()
        );
    }

    #[test]
    fn rank_one_pick() {
        let bb = identity_backbone(3, 2);
        let lora = LoraPair::new(
            Tensor2::from_vec(1, 3, vec![1.0, 0.0, 0.0]),
            Tensor2::from_vec(2, 1, vec![2.0, 0.0]),
        )
        .unwrap();
        assert_eq!(deviation(&bb, &lora, &[1.5, -4.0, 9.0]).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn deviation_is_linear_in_features() {
        let bb = identity_backbone(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flat: Vec<f64> = (0..LoraPair::flat_width(2, 3, 2)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lora = LoraPair::from_flat(&flat, 2, 3, 2).unwrap();
        let (a, b) = ([0.3, -0.2, 1.0], [1.1, 0.4, -0.7]);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ua = deviation(&bb, &lora, &a).unwrap();
        let ub = deviation(&bb, &lora, &b).unwrap();
        let us = deviation(&bb, &lora, &sum).unwrap();
        for i in 0..2 {
            assert!((us[i] - ua[i] - ub[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn preactivation_affine_in_alpha() {
        let bb = identity_backbone(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flat: Vec<f64> = (0..LoraPair::flat_width(2, 3, 2)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lora = LoraPair::from_flat(&flat, 2, 3, 2).unwrap();
        let o = [0.2, 0.9, -0.4];
        let z0 = preactivation(&bb, &lora, 0.0, &o).unwrap();
        let z1 = preactivation(&bb, &lora, 1.7, &o).unwrap();
        let z2 = preactivation(&bb, &lora, 3.4, &o).unwrap();
        for i in 0..2 {
            assert!(((z2[i] - z0[i]) - 2.0 * (z1[i] - z0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_zero_mean_acts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = act(&[0.0, 0.0], &[0.0, 0.0], &mut rng, true);
        assert_eq!(s.action, vec![0.0, 0.0]);
        assert!(s.log_prob.is_finite());
    }

    #[test]
    fn samples_stay_inside_open_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let s = act(&[3.0, -2.0], &[0.5, 0.5], &mut rng, false);
            assert!(s.action.iter().all(|a| a.abs() < 1.0));
            assert!(s.log_prob.is_finite());
        }
    }

    #[test]
    fn lora_shape_checks() {
        assert!(LoraPair::new(Tensor2::zeros(2, 4), Tensor2::zeros(2, 3)).is_err());
        assert!(LoraPair::new(Tensor2::zeros(5, 4), Tensor2::zeros(2, 5)).is_err());
        assert!(LoraPair::from_flat(&[0.0; 3], 1, 2, 2).is_err());
        let bb = identity_backbone(3, 2);
        let wrong = LoraPair::zeros(1, 4, 2);
        assert!(matches!(deviation(&bb, &wrong, &[0.0; 3]), Err(crate::Error::Config(_))));
    }
}
