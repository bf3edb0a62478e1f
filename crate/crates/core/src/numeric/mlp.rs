use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use super::Params;
use crate::error::{config, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// One affine layer, `y = act(x · W + b)` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor2,
    pub bias: Tensor2,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor2, bias: Tensor2, activation: Activation) -> Result<Self> {
        if bias.shape() != (1, weight.cols()) {
            return config(format!(
                "bias shape {:?} does not match layer width {}",
                bias.shape(),
                weight.cols()
            ));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(rng: &mut R, input: usize, output: usize, activation: Activation) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            weight: Tensor2::from_vec(input, output, data),
            bias: Tensor2::zeros(1, output),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return config("an MLP needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].output_width() != pair[1].input_width() {
                return config(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].output_width(),
                    pair[1].input_width()
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Builds `widths[0] -> widths[1] -> ...` with `hidden` activations and
    /// `last` on the final layer.
    pub fn init<R: Rng>(rng: &mut R, widths: &[usize], hidden: Activation, last: Activation) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                Layer::init(rng, widths[i], widths[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_width)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                };
                (w, b, l.activation)
            })
            .collect();
        MlpVars { layers }
    }
}

impl Params for MlpParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("{prefix}.{i}.weight"), &l.weight);
            f(format!("{prefix}.{i}.bias"), &l.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.weight"), &mut l.weight);
            f(format!("{prefix}.{i}.bias"), &mut l.bias);
        }
    }
}

/// Tape handles for an [`MlpParams`], in visit order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var, Activation)>,
}

impl MlpVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }

    /// Row-batched forward pass recorded on the tape.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            let lin = tape.matmul(h, w);
            let pre = tape.add_row(lin, b);
            h = match act {
                Activation::Tanh => tape.tanh(pre),
                Activation::Relu => tape.relu(pre),
                Activation::Identity => pre,
            };
        }
        h
    }
}

/// Plain forward pass for a single input vector.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != params.input_width() {
        return config(format!(
            "input length {} does not match MLP input width {}",
            input.len(),
            params.input_width()
        ));
    }
    let mut h = input.to_vec();
    for layer in &params.layers {
        let out_w = layer.output_width();
        let mut next = layer.bias.data().to_vec();
        for (i, &x) in h.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, w) in next.iter_mut().zip(&layer.weight.data()[i * out_w..(i + 1) * out_w]) {
                *o += x * w;
            }
        }
        for v in &mut next {
            *v = layer.activation.apply(*v);
        }
        h = next;
    }
    Ok(h)
}
