use std::rc::Rc;

use rand::Rng;

use super::mlp::{Activation, Layer};
use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use super::Params;
use crate::error::{config, Result};

/// Pre-norm transformer block: self-attention then a ReLU feed-forward,
/// each wrapped in a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockParams {
    pub heads: usize,
    pub ln1_gain: Tensor2,
    pub ln1_bias: Tensor2,
    pub w_query: Tensor2,
    pub w_key: Tensor2,
    pub w_value: Tensor2,
    pub w_out: Tensor2,
    pub ln2_gain: Tensor2,
    pub ln2_bias: Tensor2,
    pub ff_in: Layer,
    pub ff_out: Layer,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl AttentionBlockParams {
    pub fn init<R: Rng>(rng: &mut R, width: usize, heads: usize, ff_width: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return config(format!("embedding width {width} not divisible by {heads} heads"));
        }
        let square = |rng: &mut R| Layer::init(rng, width, width, Activation::Identity).weight;
        Ok(Self {
            heads,
            ln1_gain: Tensor2::filled(1, width, 1.0),
            ln1_bias: Tensor2::zeros(1, width),
            w_query: square(rng),
            w_key: square(rng),
            w_value: square(rng),
            w_out: square(rng),
            ln2_gain: Tensor2::filled(1, width, 1.0),
            ln2_bias: Tensor2::zeros(1, width),
            ff_in: Layer::init(rng, width, ff_width, Activation::Relu),
            ff_out: Layer::init(rng, ff_width, width, Activation::Identity),
        })
    }

    pub fn width(&self) -> usize {
        self.w_query.rows()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttentionBlockVars {
        let mut leaf = |t: &Tensor2| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AttentionBlockVars {
            heads: self.heads,
            ln1_gain: leaf(&self.ln1_gain),
            ln1_bias: leaf(&self.ln1_bias),
            w_query: leaf(&self.w_query),
            w_key: leaf(&self.w_key),
            w_value: leaf(&self.w_value),
            w_out: leaf(&self.w_out),
            ln2_gain: leaf(&self.ln2_gain),
            ln2_bias: leaf(&self.ln2_bias),
            ff_in_w: leaf(&self.ff_in.weight),
            ff_in_b: leaf(&self.ff_in.bias),
            ff_out_w: leaf(&self.ff_out.weight),
            ff_out_b: leaf(&self.ff_out.bias),
        }
    }
}

impl Params for AttentionBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        f(format!("{prefix}.ln1_gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &self.ln1_bias);
        f(format!("{prefix}.w_query"), &self.w_query);
        f(format!("{prefix}.w_key"), &self.w_key);
        f(format!("{prefix}.w_value"), &self.w_value);
        f(format!("{prefix}.w_out"), &self.w_out);
        f(format!("{prefix}.ln2_gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &self.ln2_bias);
        f(format!("{prefix}.ff_in.weight"), &self.ff_in.weight);
        f(format!("{prefix}.ff_in.bias"), &self.ff_in.bias);
        f(format!("{prefix}.ff_out.weight"), &self.ff_out.weight);
        f(format!("{prefix}.ff_out.bias"), &self.ff_out.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
        f(format!("{prefix}.ln1_gain"), &mut self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &mut self.ln1_bias);
        f(format!("{prefix}.w_query"), &mut self.w_query);
        f(format!("{prefix}.w_key"), &mut self.w_key);
        f(format!("{prefix}.w_value"), &mut self.w_value);
        f(format!("{prefix}.w_out"), &mut self.w_out);
        f(format!("{prefix}.ln2_gain"), &mut self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &mut self.ln2_bias);
        f(format!("{prefix}.ff_in.weight"), &mut self.ff_in.weight);
        f(format!("{prefix}.ff_in.bias"), &mut self.ff_in.bias);
        f(format!("{prefix}.ff_out.weight"), &mut self.ff_out.weight);
        f(format!("{prefix}.ff_out.bias"), &mut self.ff_out.bias);
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlockVars {
    pub heads: usize,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub w_out: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ff_in_w: Var,
    pub ff_in_b: Var,
    pub ff_out_w: Var,
    pub ff_out_b: Var,
}

impl AttentionBlockVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.ln1_gain,
            self.ln1_bias,
            self.w_query,
            self.w_key,
            self.w_value,
            self.w_out,
            self.ln2_gain,
            self.ln2_bias,
            self.ff_in_w,
            self.ff_in_b,
            self.ff_out_w,
            self.ff_out_b,
        ]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, segments: &Rc<Vec<(usize, usize)>>) -> Var {
        let h = tape.layer_norm(x, self.ln1_gain, self.ln1_bias, LAYER_NORM_EPS);
        let q = tape.matmul(h, self.w_query);
        let k = tape.matmul(h, self.w_key);
        let v = tape.matmul(h, self.w_value);
        let a = tape.attention(q, k, v, self.heads, Rc::clone(segments));
        let o = tape.matmul(a, self.w_out);
        let x = tape.add(x, o);
        let h2 = tape.layer_norm(x, self.ln2_gain, self.ln2_bias, LAYER_NORM_EPS);
        let f1 = tape.matmul(h2, self.ff_in_w);
        let f1 = tape.add_row(f1, self.ff_in_b);
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, self.ff_out_w);
        let f2 = tape.add_row(f2, self.ff_out_b);
        tape.add(x, f2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionBlockParams::init(&mut rng, 10, 3, 16).is_err());
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = AttentionBlockParams::init(&mut rng, 8, 2, 16).unwrap();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let perm = [2, 0, 3, 1];
        let run = |rows: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let vars = block.bind(&mut tape, false);
            let x = tape.constant(Tensor2::from_rows(rows).unwrap());
            let y = vars.forward(&mut tape, x, &Rc::new(vec![(0, rows.len())]));
            tape.value(y).clone()
        };
        let base = run(&rows);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let out = run(&permuted);
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((out.get(r, c) - base.get(src, c)).abs() < 1e-12);
            }
        }
    }
}
