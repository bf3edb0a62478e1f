//! Event-driven hypernetwork emitting one LoRA pair per live agent.
//!
//! The attention sequence holds one token per agent observation followed by
//! an event token and a diversity-target token. No positional encoding is
//! added, so permuting agents permutes the emitted pairs.

use std::rc::Rc;

use rand::Rng;

pub use crate::event::{encode_event, EventKind, EventRecord, Signal, EVENT_WIDTH};
use crate::error::{config, Result};
use crate::numeric::{Activation, AttentionBlockParams, AttentionBlockVars, Layer, Params, Tape, Tensor2, Var};
use crate::numeric::attention::LAYER_NORM_EPS;
use crate::policy::LoraPair;

/// Features of the diversity-target token.
pub const TARGET_FEATURES: usize = 2;
/// Half-width of the uniform output-head initialization.
pub const HEAD_INIT: f64 = 1e-2;

fn target_features(nmd_des: f64) -> [f64; TARGET_FEATURES] {
    [nmd_des, nmd_des.max(1e-3).ln()]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypernetShape {
    pub obs_dim: usize,
    pub embed: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff: usize,
    pub rank: usize,
    pub feature_dim: usize,
    pub action_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypernetParams {
    pub rank: usize,
    pub feature_dim: usize,
    pub action_dim: usize,
    pub obs_embed: Layer,
    pub event_embed: Layer,
    pub target_embed: Layer,
    pub blocks: Vec<AttentionBlockParams>,
    pub final_gain: Tensor2,
    pub final_bias: Tensor2,
    pub head: Layer,
}

impl HypernetParams {
    pub fn init<R: Rng>(rng: &mut R, shape: HypernetShape) -> Result<Self> {
        if shape.rank == 0 || shape.rank > shape.feature_dim {
            return config(format!(
                "LoRA rank {} must lie in 1..={}",
                shape.rank, shape.feature_dim
            ));
        }
        let e = shape.embed;
        let obs_embed = Layer::init(rng, shape.obs_dim, e, Activation::Identity);
        let event_embed = Layer::init(rng, EVENT_WIDTH, e, Activation::Identity);
        let target_embed = Layer::init(rng, TARGET_FEATURES, e, Activation::Identity);
        let blocks = (0..shape.blocks)
            .map(|_| AttentionBlockParams::init(rng, e, shape.heads, shape.ff))
            .collect::<Result<Vec<_>>>()?;
        let out = LoraPair::flat_width(shape.rank, shape.feature_dim, shape.action_dim);
        let head_w = (0..e * out).map(|_| rng.gen_range(-HEAD_INIT..HEAD_INIT)).collect();
        let head = Layer::new(Tensor2::from_vec(e, out, head_w), Tensor2::zeros(1, out), Activation::Identity)?;
        Ok(Self {
            rank: shape.rank,
            feature_dim: shape.feature_dim,
            action_dim: shape.action_dim,
            obs_embed,
            event_embed,
            target_embed,
            blocks,
            final_gain: Tensor2::filled(1, e, 1.0),
            final_bias: Tensor2::zeros(1, e),
            head,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_embed.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.head.output_width()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HypernetVars {
        let mut leaf = |t: &Tensor2, tape: &mut Tape| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layer = |l: &Layer, tape: &mut Tape, leaf: &mut dyn FnMut(&Tensor2, &mut Tape) -> Var| {
            (leaf(&l.weight, tape), leaf(&l.bias, tape))
        };
        let obs_embed = layer(&self.obs_embed, tape, &mut leaf);
        let event_embed = layer(&self.event_embed, tape, &mut leaf);
        let target_embed = layer(&self.target_embed, tape, &mut leaf);
        let blocks = self.blocks.iter().map(|b| b.bind(tape, trainable)).collect();
        let final_gain = leaf(&self.final_gain, tape);
        let final_bias = leaf(&self.final_bias, tape);
        let head = layer(&self.head, tape, &mut leaf);
        HypernetVars {
            obs_embed,
            event_embed,
            target_embed,
            blocks,
            final_gain,
            final_bias,
            head,
        }
    }
}

impl Params for HypernetParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        for (name, l) in [
            ("obs_embed", &self.obs_embed),
            ("event_embed", &self.event_embed),
            ("target_embed", &self.target_embed),
        ] {
            f(format!("{prefix}.{name}.weight"), &l.weight);
            f(format!("{prefix}.{name}.bias"), &l.bias);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        f(format!("{prefix}.final_gain"), &self.final_gain);
        f(format!("{prefix}.final_bias"), &self.final_bias);
        f(format!("{prefix}.head.weight"), &self.head.weight);
        f(format!("{prefix}.head.bias"), &self.head.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
        for (name, l) in [
            ("obs_embed", &mut self.obs_embed),
            ("event_embed", &mut self.event_embed),
            ("target_embed", &mut self.target_embed),
        ] {
            f(format!("{prefix}.{name}.weight"), &mut l.weight);
            f(format!("{prefix}.{name}.bias"), &mut l.bias);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        f(format!("{prefix}.final_gain"), &mut self.final_gain);
        f(format!("{prefix}.final_bias"), &mut self.final_bias);
        f(format!("{prefix}.head.weight"), &mut self.head.weight);
        f(format!("{prefix}.head.bias"), &mut self.head.bias);
    }
}

/// One hypernetwork query.
#[derive(Clone, Debug)]
pub struct HyperQuery {
    pub observations: Vec<Vec<f64>>,
    pub event: Vec<f64>,
    pub nmd_des: f64,
}

/// Tape handles for [`HypernetParams`], in visit order.
#[derive(Clone, Debug)]
pub struct HypernetVars {
    pub obs_embed: (Var, Var),
    pub event_embed: (Var, Var),
    pub target_embed: (Var, Var),
    pub blocks: Vec<AttentionBlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head: (Var, Var),
}

impl HypernetVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![
            self.obs_embed.0,
            self.obs_embed.1,
            self.event_embed.0,
            self.event_embed.1,
            self.target_embed.0,
            self.target_embed.1,
        ];
        for b in &self.blocks {
            v.extend(b.vars());
        }
        v.extend([self.final_gain, self.final_bias, self.head.0, self.head.1]);
        v
    }

    /// Flattened LoRA pairs for every agent of every query, query-major
    /// (`Σ N_q × (r·d + d_a·r)`).
    pub fn forward(&self, tape: &mut Tape, queries: &[HyperQuery]) -> Var {
        let obs_rows: Vec<Vec<f64>> = queries.iter().flat_map(|q| q.observations.iter().cloned()).collect();
        let agents = obs_rows.len();
        let q_count = queries.len();
        let affine = |tape: &mut Tape, x: Tensor2, (w, b): (Var, Var)| {
            let x = tape.constant(x);
            let y = tape.matmul(x, w);
            tape.add_row(y, b)
        };
        let obs = Tensor2::from_rows(&obs_rows).expect("uniform observation width");
        let events = Tensor2::from_rows(&queries.iter().map(|q| q.event.clone()).collect::<Vec<_>>())
            .expect("uniform event width");
        let targets = Tensor2::from_rows(
            &queries
                .iter()
                .map(|q| target_features(q.nmd_des).to_vec())
                .collect::<Vec<_>>(),
        )
        .expect("target features");
        let a = affine(tape, obs, self.obs_embed);
        let ev = affine(tape, events, self.event_embed);
        let tg = affine(tape, targets, self.target_embed);
        let all = tape.concat_rows(&[a, ev, tg]);

        let mut order = Vec::with_capacity(agents + 2 * q_count);
        let mut segments = Vec::with_capacity(q_count);
        let mut agent_pos = Vec::with_capacity(agents);
        let mut first_agent = 0;
        for (qi, q) in queries.iter().enumerate() {
            let start = order.len();
            for j in 0..q.observations.len() {
                agent_pos.push(order.len());
                order.push(first_agent + j);
            }
            order.push(agents + qi);
            order.push(agents + q_count + qi);
            segments.push((start, q.observations.len() + 2));
            first_agent += q.observations.len();
        }
        let mut x = tape.gather_rows(all, Rc::new(order));
        let segments = Rc::new(segments);
        for b in &self.blocks {
            x = b.forward(tape, x, &segments);
        }
        let x = tape.gather_rows(x, Rc::new(agent_pos));
        let x = tape.layer_norm(x, self.final_gain, self.final_bias, LAYER_NORM_EPS);
        let y = tape.matmul(x, self.head.0);
        tape.add_row(y, self.head.1)
    }
}

fn check_query(params: &HypernetParams, observations: &[Vec<f64>], event_vec: &[f64]) -> Result<()> {
    if observations.is_empty() {
        return config("hypernetwork query needs at least one agent");
    }
    if let Some(bad) = observations.iter().find(|o| o.len() != params.obs_dim()) {
        return config(format!(
            "observation width {} does not match hypernetwork input width {}",
            bad.len(),
            params.obs_dim()
        ));
    }
    if event_vec.len() != EVENT_WIDTH {
        return config(format!("event vector has width {}, expected {EVENT_WIDTH}", event_vec.len()));
    }
    Ok(())
}

/// Flattened output rows, one per agent.
pub fn generate_packed(
    params: &HypernetParams,
    observations: &[Vec<f64>],
    event_vec: &[f64],
    nmd_des: f64,
) -> Result<Tensor2> {
    check_query(params, observations, event_vec)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let out = vars.forward(
        &mut tape,
        &[HyperQuery {
            observations: observations.to_vec(),
            event: event_vec.to_vec(),
            nmd_des,
        }],
    );
    Ok(tape.value(out).clone())
}

pub fn generate(
    params: &HypernetParams,
    observations: &[Vec<f64>],
    event_vec: &[f64],
    nmd_des: f64,
) -> Result<Vec<LoraPair>> {
    let packed = generate_packed(params, observations, event_vec, nmd_des)?;
    (0..packed.rows())
        .map(|i| LoraPair::from_flat(packed.row(i), params.rank, params.feature_dim, params.action_dim))
        .collect()
}

/// LoRA pairs held by the live agents until the next query.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorAssignment {
    pub pairs: Vec<LoraPair>,
    /// Agent ids the pairs belong to, in order.
    pub agents: Vec<usize>,
    pub generated_at: usize,
    pub trigger: EventRecord,
}

impl BehaviorAssignment {
    /// Pairs flattened into rows.
    pub fn packed(&self) -> Tensor2 {
        let rows: Vec<Vec<f64>> = self.pairs.iter().map(LoraPair::flatten).collect();
        Tensor2::from_rows(&rows).expect("uniform pair width")
    }

    pub fn pair_for(&self, agent: usize) -> Option<&LoraPair> {
        self.agents.iter().position(|&a| a == agent).map(|i| &self.pairs[i])
    }
}

/// Current team context fed to a query.
#[derive(Clone, Copy, Debug)]
pub struct QueryContext<'a> {
    pub params: &'a HypernetParams,
    pub observations: &'a [Vec<f64>],
    pub agents: &'a [usize],
    pub nmd_des: f64,
}

pub fn query(ctx: &QueryContext<'_>, ev: &EventRecord, t: usize) -> Result<BehaviorAssignment> {
    let pairs = generate(ctx.params, ctx.observations, &encode_event(ev), ctx.nmd_des)?;
    Ok(BehaviorAssignment {
        pairs,
        agents: ctx.agents.to_vec(),
        generated_at: t,
        trigger: ev.clone(),
    })
}

/// Keeps `assignment` on a `Null` event after the first step; otherwise
/// queries afresh. The flag reports whether the hypernetwork ran.
pub fn maybe_requery(
    assignment: Option<&BehaviorAssignment>,
    ev: &EventRecord,
    t: usize,
    ctx: &QueryContext<'_>,
) -> Result<(BehaviorAssignment, bool)> {
    match assignment {
        Some(a) if ev.is_null() && t > 0 => Ok((a.clone(), false)),
        _ => Ok((query(ctx, ev, t)?, true)),
    }
}
