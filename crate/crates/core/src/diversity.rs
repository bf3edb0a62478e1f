//! Wasserstein kernels, the behavior pseudometric, the manifold-diversity
//! estimator and the diversity-control scalar.
//!
//! Everything here works in pre-activation space: behaviors are Gaussians
//! with a covariance shared across the batch, so the 2-Wasserstein distance
//! between two behaviors at an observation is the distance between their
//! means.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::numeric::tensor::{dot, l2_norm, Tensor2};

/// Lower bound applied to the measured diversity before dividing by it.
pub const ALPHA_FLOOR: f64 = 1e-6;
/// Upper bound on the diversity scalar.
pub const ALPHA_CAP: f64 = 1e3;
/// Deviations closer than this are treated as coincident.
pub const COINCIDENCE_TOL: f64 = 1e-12;

/// Action distribution of one behavior at one observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicyOutput {
    pub mean: Vec<f64>,
    /// Diagonal log standard deviations, shared by every behavior in a batch.
    pub log_std: Vec<f64>,
}

/// Deviations `u_m` of `B ≥ 2` behaviors evaluated at one common observation.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationSet {
    deviations: Vec<Vec<f64>>,
}

impl DeviationSet {
    pub fn new(deviations: Vec<Vec<f64>>) -> Result<Self> {
        if deviations.len() < 2 {
            return usage(format!(
                "a deviation set needs at least 2 behaviors, got {}",
                deviations.len()
            ));
        }
        let width = deviations[0].len();
        if deviations.iter().any(|d| d.len() != width) {
            return usage("deviation vectors differ in length");
        }
        Ok(Self { deviations })
    }

    pub fn behavior_count(&self) -> usize {
        self.deviations.len()
    }

    pub fn action_dim(&self) -> usize {
        self.deviations[0].len()
    }

    pub fn deviations(&self) -> &[Vec<f64>] {
        &self.deviations
    }

    pub fn get(&self, m: usize) -> &[f64] {
        &self.deviations[m]
    }

    /// Copy with every deviation multiplied by `t`.
    pub fn scaled(&self, t: f64) -> Self {
        Self {
            deviations: self
                .deviations
                .iter()
                .map(|d| d.iter().map(|v| v * t).collect())
                .collect(),
        }
    }

    /// Copy with only behavior `m` multiplied by `t`.
    pub fn with_scaled_member(&self, m: usize, t: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.deviations[m] {
            *v *= t;
        }
        out
    }
}

/// Target diversity, the measured (unscaled) estimate and the resulting scalar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityState {
    pub nmd_des: f64,
    pub nmd_measured: f64,
    pub alpha: f64,
    pub epsilon_floor: f64,
    pub alpha_cap: f64,
}

impl DiversityState {
    pub fn new(nmd_des: f64, nmd_measured: f64) -> Result<Self> {
        let alpha = compute_alpha(nmd_des, nmd_measured, ALPHA_FLOOR, ALPHA_CAP)?;
        Ok(Self {
            nmd_des,
            nmd_measured,
            alpha,
            epsilon_floor: ALPHA_FLOOR,
            alpha_cap: ALPHA_CAP,
        })
    }

    /// True when the scalar hit neither the floor nor the cap, so the
    /// realized diversity equals the target.
    pub fn is_exact(&self) -> bool {
        self.nmd_measured > self.epsilon_floor && self.alpha < self.alpha_cap
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return usage(format!("vector lengths differ: {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// 2-Wasserstein distance between two Gaussians sharing one covariance.
pub fn w2_shared_cov(mean_a: &[f64], mean_b: &[f64]) -> Result<f64> {
    check_same_len(mean_a, mean_b)?;
    Ok(euclidean(mean_a, mean_b))
}

/// 2-Wasserstein distance between two diagonal Gaussians.
pub fn w2_bures_diag(mean_a: &[f64], std_a: &[f64], mean_b: &[f64], std_b: &[f64]) -> Result<f64> {
    check_same_len(mean_a, mean_b)?;
    check_same_len(mean_a, std_a)?;
    check_same_len(mean_a, std_b)?;
    if std_a.iter().chain(std_b).any(|s| !(*s > 0.0)) {
        return usage("standard deviations must be positive");
    }
    let mean_sq: f64 = mean_a.iter().zip(mean_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let bures: f64 = std_a.iter().zip(std_b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((mean_sq + bures).sqrt())
}

fn shared_w2(a: &GaussianPolicyOutput, b: &GaussianPolicyOutput) -> Result<f64> {
    if a.log_std != b.log_std {
        return Err(Error::Assumption(
            "behaviors must share one covariance (log_std vectors differ)".into(),
        ));
    }
    w2_shared_cov(&a.mean, &b.mean)
}

/// Mean over `obs_set` of the W₂ distance between two behaviors.
pub fn behavior_distance<P, Q>(policy_m: P, policy_n: Q, obs_set: &[Vec<f64>]) -> Result<f64>
where
    P: Fn(&[f64]) -> GaussianPolicyOutput,
    Q: Fn(&[f64]) -> GaussianPolicyOutput,
{
    if obs_set.is_empty() {
        return usage("observation set is empty");
    }
    let mut total = 0.0;
    for o in obs_set {
        total += shared_w2(&policy_m(o), &policy_n(o))?;
    }
    Ok(total / obs_set.len() as f64)
}

/// A behavior evaluated as a function of the observation.
pub type PolicyFn<'a> = dyn Fn(&[f64]) -> GaussianPolicyOutput + 'a;

/// Empirical manifold diversity: average W₂ over all unordered behavior
/// pairs and all observations.
pub fn nmd_hat(policies: &[&PolicyFn<'_>], obs_set: &[Vec<f64>]) -> Result<f64> {
    let b = policies.len();
    if b < 2 {
        return usage(format!("need at least 2 behaviors, got {b}"));
    }
    if obs_set.is_empty() {
        return usage("observation set is empty");
    }
    let mut total = 0.0;
    for o in obs_set {
        let outs: Vec<GaussianPolicyOutput> = policies.iter().map(|p| p(o)).collect();
        for m in 0..b {
            for n in m + 1..b {
                total += shared_w2(&outs[m], &outs[n])?;
            }
        }
    }
    Ok(2.0 * total / ((b * (b - 1)) as f64 * obs_set.len() as f64))
}

/// Normalizing constant `2 / (B (B − 1) |O|)`.
pub fn pair_coefficient(behaviors: usize, obs_count: usize) -> f64 {
    2.0 / ((behaviors * (behaviors - 1)) as f64 * obs_count as f64)
}

/// Contribution of one observation's deviations to the estimator, normalized
/// for `obs_count` observations in total.
pub fn nmd_hat_deviations(devs: &DeviationSet, obs_count: usize) -> f64 {
    let b = devs.behavior_count();
    let mut total = 0.0;
    for m in 0..b {
        for n in m + 1..b {
            total += euclidean(devs.get(m), devs.get(n));
        }
    }
    pair_coefficient(b, obs_count.max(1)) * total
}

/// Estimator over several observations, one deviation set per observation.
pub fn nmd_hat_deviation_sets(sets: &[DeviationSet]) -> Result<f64> {
    let Some(first) = sets.first() else {
        return usage("no observations");
    };
    if sets.iter().any(|s| s.behavior_count() != first.behavior_count()) {
        return usage("behavior count differs across observations");
    }
    Ok(sets.iter().map(|s| nmd_hat_deviations(s, sets.len())).sum())
}

/// Gradient of [`nmd_hat_deviations`] with respect to `u_m`.
pub fn nmd_grad(devs: &DeviationSet, obs_count: usize, m: usize) -> Result<Vec<f64>> {
    let b = devs.behavior_count();
    if m >= b {
        return usage(format!("behavior index {m} out of range for {b} behaviors"));
    }
    let um = devs.get(m);
    let c = pair_coefficient(b, obs_count.max(1));
    let mut grad = vec![0.0; um.len()];
    for n in (0..b).filter(|&n| n != m) {
        let un = devs.get(n);
        let dist = euclidean(um, un);
        if dist < COINCIDENCE_TOL {
            return Err(Error::Degenerate(format!(
                "deviations {m} and {n} coincide; the pairwise norm is not differentiable"
            )));
        }
        for ((g, a), b) in grad.iter_mut().zip(um).zip(un) {
            *g += c * (a - b) / dist;
        }
    }
    Ok(grad)
}

/// Diversity scalar `min(nmd_des / max(measured, floor), cap)`.
pub fn compute_alpha(nmd_des: f64, nmd_measured: f64, floor: f64, cap: f64) -> Result<f64> {
    if !(nmd_des >= 0.0) || !(nmd_measured >= 0.0) {
        return usage("diversity target and measurement must be non-negative");
    }
    if !(floor > 0.0) || !(cap > 0.0) {
        return usage("floor and cap must be positive");
    }
    Ok((nmd_des / nmd_measured.max(floor)).min(cap))
}

/// `P = I − u · gradᵀ / nmd`.
pub fn projection_matrix(u: &[f64], grad: &[f64], nmd_value: f64) -> Result<Tensor2> {
    check_same_len(u, grad)?;
    if !(nmd_value > 0.0) {
        return usage("projection needs a positive diversity value");
    }
    let n = u.len();
    let mut p = Tensor2::identity(n);
    for i in 0..n {
        for j in 0..n {
            let v = p.get(i, j) - u[i] * grad[j] / nmd_value;
            p.set(i, j, v);
        }
    }
    Ok(p)
}

/// Idempotency diagnostics for one projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionDefect {
    /// `k = uᵀ grad / N̂`; the projection is idempotent exactly when `k = 1`.
    pub k: f64,
    /// `‖P² − P‖_F`.
    pub idempotency_gap: f64,
    /// `‖P² − P − (k − 1) u gradᵀ / N̂‖_F`, zero up to round-off.
    pub identity_residual: f64,
}

pub fn projection_defect(u: &[f64], grad: &[f64], nmd_value: f64) -> Result<ProjectionDefect> {
    let p = projection_matrix(u, grad, nmd_value)?;
    let k = dot(u, grad) / nmd_value;
    let gap = p.matmul(&p).sub(&p);
    let n = u.len();
    let mut predicted = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            predicted.set(i, j, (k - 1.0) * u[i] * grad[j] / nmd_value);
        }
    }
    Ok(ProjectionDefect {
        k,
        idempotency_gap: gap.frobenius_norm(),
        identity_residual: gap.sub(&predicted).frobenius_norm(),
    })
}

/// `(u_mᵀ ∇_{u_m} N̂ − N̂) / N̂` at a single observation.
pub fn euler_residual(devs: &DeviationSet, obs_count: usize, m: usize) -> Result<f64> {
    let n_hat = nmd_hat_deviations(devs, obs_count);
    if !(n_hat > 0.0) {
        return Err(Error::Degenerate("diversity is zero".into()));
    }
    let grad = nmd_grad(devs, obs_count, m)?;
    Ok((dot(devs.get(m), &grad) - n_hat) / n_hat)
}

/// One row of the limiting-regime diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LimitRow {
    pub scale: f64,
    pub k: f64,
    /// `‖P(t) − I‖_F`.
    pub dist_identity: f64,
    /// `‖P(t) − (I − û ûᵀ)‖_F`.
    pub dist_orthogonal_projector: f64,
}

/// Scales `u_m` by each `t` (others fixed) and reports how close the
/// projection is to the identity and to the projector onto `û_m^⊥`.
pub fn projection_limits_report(devs: &DeviationSet, m: usize, scales: &[f64]) -> Result<Vec<LimitRow>> {
    let base = devs.get(m);
    let norm = l2_norm(base);
    if norm == 0.0 {
        return usage("the probed deviation must be nonzero");
    }
    let unit: Vec<f64> = base.iter().map(|v| v / norm).collect();
    let n = unit.len();
    let mut orth = Tensor2::identity(n);
    for i in 0..n {
        for j in 0..n {
            orth.set(i, j, orth.get(i, j) - unit[i] * unit[j]);
        }
    }
    let identity = Tensor2::identity(n);
    scales
        .iter()
        .map(|&t| {
            let scaled = devs.with_scaled_member(m, t);
            let n_hat = nmd_hat_deviations(&scaled, 1);
            let grad = nmd_grad(&scaled, 1, m)?;
            let p = projection_matrix(scaled.get(m), &grad, n_hat)?;
            Ok(LimitRow {
                scale: t,
                k: dot(scaled.get(m), &grad) / n_hat,
                dist_identity: p.sub(&identity).frobenius_norm(),
                dist_orthogonal_projector: p.sub(&orth).frobenius_norm(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_policy(mean: Vec<f64>) -> impl Fn(&[f64]) -> GaussianPolicyOutput {
        move |_| GaussianPolicyOutput {
            mean: mean.clone(),
            log_std: vec![0.0; mean.len()],
        }
    }

    #[test]
    fn w2_shared_examples() {
        assert_eq!(w2_shared_cov(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(w2_shared_cov(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(w2_shared_cov(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn bures_reduces_to_shared() {
        let a = [0.3, -1.2];
        let b = [1.0, 0.4];
        let s = [0.7, 1.3];
        assert_eq!(w2_bures_diag(&a, &s, &b, &s).unwrap(), w2_shared_cov(&a, &b).unwrap());
        assert_eq!(w2_bures_diag(&[0.0], &[1.0], &[0.0], &[2.0]).unwrap(), 1.0);
        assert!(w2_bures_diag(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn distance_of_offset_policies() {
        let obs = vec![vec![0.0], vec![1.0], vec![-2.0]];
        let a = |o: &[f64]| GaussianPolicyOutput {
            mean: vec![o[0], 2.0 * o[0]],
            log_std: vec![-0.5, -0.5],
        };
        let b = |o: &[f64]| GaussianPolicyOutput {
            mean: vec![o[0] + 0.6, 2.0 * o[0] + 0.8],
            log_std: vec![-0.5, -0.5],
        };
        assert!((behavior_distance(a, b, &obs).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(behavior_distance(a, a, &obs).unwrap(), 0.0);
    }

    #[test]
    fn distance_rejects_unshared_covariance() {
        let a = |_: &[f64]| GaussianPolicyOutput {
            mean: vec![0.0],
            log_std: vec![0.0],
        };
        let b = |_: &[f64]| GaussianPolicyOutput {
            mean: vec![0.0],
            log_std: vec![0.1],
        };
        let r = behavior_distance(a, b, &[vec![0.0]]);
        assert!(matches!(r, Err(Error::Assumption(_))));
    }

    #[test]
    fn nmd_hat_examples() {
        let obs = vec![vec![0.0], vec![1.0]];
        let p0 = constant_policy(vec![0.0, 0.0]);
        let p1 = constant_policy(vec![0.6, 0.8]);
        assert_eq!(nmd_hat(&[&p0, &p0, &p0], &obs).unwrap(), 0.0);
        assert!((nmd_hat(&[&p0, &p1], &obs).unwrap() - 1.0).abs() < 1e-12);
        let q0 = constant_policy(vec![0.0, 0.0]);
        let q1 = constant_policy(vec![1.0, 0.0]);
        let q2 = constant_policy(vec![2.0, 0.0]);
        assert!((nmd_hat(&[&q0, &q1, &q2], &obs).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        assert!(matches!(nmd_hat(&[&q0], &obs), Err(Error::Usage(_))));
    }

    #[test]
    fn deviation_estimator_examples() {
        let same = DeviationSet::new(vec![vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(nmd_hat_deviations(&same, 1), 0.0);
        let d = DeviationSet::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(nmd_hat_deviations(&d, 1), 2.0);
        assert_eq!(nmd_hat_deviations(&d.scaled(3.0), 1), 6.0);
        assert!(DeviationSet::new(vec![vec![1.0]]).is_err());
    }

    #[test]
    fn grad_examples() {
        let d = DeviationSet::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(nmd_grad(&d, 1, 0).unwrap(), vec![1.0, 0.0]);
        let g_scaled = nmd_grad(&d.scaled(7.5), 1, 0).unwrap();
        assert_eq!(g_scaled, vec![1.0, 0.0]);
        let coincident = DeviationSet::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(nmd_grad(&coincident, 1, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(compute_alpha(0.5, 2.0, 1e-6, 1e3).unwrap(), 0.25);
        assert_eq!(compute_alpha(0.7, 0.7, 1e-6, 1e3).unwrap(), 1.0);
        assert_eq!(compute_alpha(0.5, 0.0, 1e-6, 1e3).unwrap(), 1e3);
        assert!(compute_alpha(-0.1, 1.0, 1e-6, 1e3).is_err());
        assert!(compute_alpha(0.1, -1.0, 1e-6, 1e3).is_err());
    }

    #[test]
    fn projection_examples() {
        let p = projection_matrix(&[0.0, 0.0], &[0.3, 0.1], 0.5).unwrap();
        assert_eq!(p, Tensor2::identity(2));
        let d = DeviationSet::new(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let g = nmd_grad(&d, 1, 0).unwrap();
        let n = nmd_hat_deviations(&d, 1);
        assert_eq!((g.clone(), n), (vec![1.0, 0.0], 1.0));
        let defect = projection_defect(d.get(0), &g, n).unwrap();
        assert_eq!(defect.k, 1.0);
        assert_eq!(defect.idempotency_gap, 0.0);
        assert!(projection_matrix(&[1.0], &[1.0], 0.0).is_err());
    }
}
