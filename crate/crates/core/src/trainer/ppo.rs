//! Advantage estimation, gradient clipping and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::numeric::{Params, Tensor2};

/// Generalized advantage estimates and returns for one trajectory segment.
///
/// `last_value` bootstraps the step after the final one unless that step is
/// marked done.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert!(
        rewards.len() == values.len() && values.len() == dones.len(),
        "aligned rewards, values and dones"
    );
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts to mean 0 and scales to standard deviation 1 in place.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-8 {
            *a /= std;
        }
    }
}

pub fn global_norm(grads: &[Tensor2]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor2], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new<P: Params>(config: AdamConfig, params: &P) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(Tensor2::zeros(t.rows(), t.cols())));
        let v = m.clone();
        Self { config, steps: 0, m, v }
    }

    /// Applies one update; `grads` follow the parameters' visit order.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &[Tensor2]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter tensor");
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            let g = &grads[k];
            let m = ms[k].data_mut();
            let v = vs[k].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *w -= c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
            k += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_advantage() {
        let (a, r) = compute_gae(&[1.0], &[0.5], &[false], 2.0, 0.9, 0.95);
        assert!((a[0] - (1.0 + 0.9 * 2.0 - 0.5)).abs() < 1e-12);
        assert!((r[0] - (a[0] + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_td_error() {
        let rewards = [1.0, -0.5, 2.0, 0.3];
        let values = [0.2, 0.4, -0.1, 0.7];
        let dones = [false, false, false, true];
        let (a, _) = compute_gae(&rewards, &values, &dones, 9.0, 0.99, 0.0);
        for t in 0..4 {
            let next = if t + 1 < 4 { values[t + 1] } else { 0.0 };
            let live = if dones[t] { 0.0 } else { 1.0 };
            assert!((a[t] - (rewards[t] + 0.99 * next * live - values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_is_discounted_return() {
        let rewards = [1.0, 0.5, -2.0, 3.0, 0.25];
        let values = [0.3, -0.2, 0.8, 0.1, 0.5];
        let dones = [false, false, false, false, true];
        let g: f64 = 0.97;
        let (a, _) = compute_gae(&rewards, &values, &dones, 0.0, g, 1.0);
        for t in 0..5 {
            let brute: f64 = (t..5).map(|k| g.powi((k - t) as i32) * rewards[k]).sum();
            assert!((a[t] - (brute - values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn clamps_to_max_norm() {
        let mut g = vec![Tensor2::from_vec(1, 2, vec![6.0, 8.0])];
        let before = clip_grad_norm(&mut g, 0.5);
        assert_eq!(before, 10.0);
        assert!((global_norm(&g) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalization_moments() {
        let mut a = vec![3.0, -1.0, 4.0, 1.5, 9.0, -2.6];
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-12 && (std - 1.0).abs() <= 1e-12);
    }
}
