//! Trainable parameter bundle: policy backbone, hypernetwork and critic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::hypernet::{HypernetParams, HypernetShape, HypernetVars};
use crate::numeric::{Activation, MlpParams, MlpVars, Params, Tape, Tensor2, Var};
use crate::policy::{PolicyBackbone, PolicyVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden widths of the feature net; the last one is the feature width `d`.
    pub feature_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub embed: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff: usize,
    pub rank: usize,
    pub action_dim: usize,
    pub init_log_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_hidden: vec![128, 128],
            critic_hidden: vec![128, 128],
            embed: 64,
            heads: 2,
            blocks: 2,
            ff: 256,
            rank: 8,
            action_dim: 2,
            init_log_std: 0.5f64.ln(),
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.feature_hidden.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_hidden.is_empty() || self.feature_hidden.contains(&0) {
            return config("feature_hidden needs at least one positive width");
        }
        if self.critic_hidden.contains(&0) {
            return config("critic widths must be positive");
        }
        if self.rank == 0 || self.rank > self.feature_dim() {
            return config(format!(
                "LoRA rank {} must lie in 1..={}",
                self.rank,
                self.feature_dim()
            ));
        }
        if self.heads == 0 || self.embed % self.heads != 0 {
            return config(format!(
                "embedding width {} not divisible by {} heads",
                self.embed, self.heads
            ));
        }
        if self.action_dim == 0 || self.ff == 0 {
            return config("action and feed-forward widths must be positive");
        }
        Ok(())
    }
}

/// Width of the centralized critic input for `agents` slots.
pub fn critic_input_width(agents: usize, obs_dim: usize) -> usize {
    agents * (obs_dim + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: PolicyBackbone,
    pub hypernet: HypernetParams,
    pub critic: MlpParams,
}

impl Model {
    /// `agents` sets the number of critic slots.
    pub fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig, obs_dim: usize, agents: usize) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![obs_dim];
        widths.extend(&cfg.feature_hidden);
        let feature_net = MlpParams::init(rng, &widths, Activation::Tanh, Activation::Tanh);
        let d = cfg.feature_dim();
        let limit = (6.0 / (d + cfg.action_dim) as f64).sqrt() * 0.1;
        let w_shared = Tensor2::from_vec(
            cfg.action_dim,
            d,
            (0..cfg.action_dim * d).map(|_| rng.gen_range(-limit..limit)).collect(),
        );
        let backbone = PolicyBackbone::new(
            feature_net,
            w_shared,
            Tensor2::filled(1, cfg.action_dim, cfg.init_log_std),
        )?;
        let hypernet = HypernetParams::init(
            rng,
            HypernetShape {
                obs_dim,
                embed: cfg.embed,
                heads: cfg.heads,
                blocks: cfg.blocks,
                ff: cfg.ff,
                rank: cfg.rank,
                feature_dim: d,
                action_dim: cfg.action_dim,
            },
        )?;
        let mut cw = vec![critic_input_width(agents, obs_dim)];
        cw.extend(&cfg.critic_hidden);
        cw.push(1);
        let critic = MlpParams::init(rng, &cw, Activation::Tanh, Activation::Identity);
        Ok(Self {
            backbone,
            hypernet,
            critic,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.backbone.obs_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            policy: self.backbone.bind(tape, trainable),
            hypernet: self.hypernet.bind(tape, trainable),
            critic: self.critic.bind(tape, trainable),
        }
    }

    pub fn tensors(&self) -> Vec<(String, Tensor2)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Overwrites every tensor from `(name, value)` pairs in visit order.
    pub fn load_tensors(&mut self, arrays: &[(String, Tensor2)]) -> Result<()> {
        let mut idx = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match arrays.get(idx) {
                Some((n, v)) if *n == name && v.shape() == t.shape() => *t = v.clone(),
                Some((n, v)) => {
                    err = Some(format!(
                        "array `{n}` {:?} does not match `{name}` {:?}",
                        v.shape(),
                        t.shape()
                    ))
                }
                None => err = Some(format!("missing array `{name}`")),
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(crate::Error::Format(e));
        }
        if idx != arrays.len() {
            return Err(crate::Error::Format(format!(
                "{} arrays supplied, model has {idx}",
                arrays.len()
            )));
        }
        Ok(())
    }
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.backbone.visit(&p("policy"), f);
        self.hypernet.visit(&p("hypernet"), f);
        self.critic.visit(&p("critic"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.backbone.visit_mut(&p("policy"), f);
        self.hypernet.visit_mut(&p("hypernet"), f);
        self.critic.visit_mut(&p("critic"), f);
    }
}

/// Tape handles for a [`Model`]; [`ModelVars::vars`] follows visit order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub policy: PolicyVars,
    pub hypernet: HypernetVars,
    pub critic: MlpVars,
}

impl ModelVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.policy.vars();
        v.extend(self.hypernet.vars());
        v.extend(self.critic.vars());
        v
    }
}
