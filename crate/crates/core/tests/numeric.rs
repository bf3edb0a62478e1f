use std::rc::Rc;

use mmrl_core::numeric::{
    finite_diff_grad, mlp_forward, relative_error, Activation, AttentionBlockParams, MlpParams, Params, Tape,
    Tensor2, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-8;
const FD_STEP: f64 = 1e-6;

fn flatten<P: Params>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

fn unflatten<P: Params + Clone>(p: &P, flat: &[f64]) -> P {
    let mut q = p.clone();
    let mut at = 0;
    q.visit_mut("", &mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    });
    q
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Scalar loss `Σ (f(x) ⊙ C)` so every output coordinate carries a distinct weight.
fn weighted_loss(tape: &mut Tape, y: Var, weights: &Tensor2) -> Var {
    let c = tape.constant(weights.clone());
    let prod = tape.mul(y, c);
    tape.sum(prod)
}

/// Compares tape gradients with central differences over every parameter
/// coordinate whose analytic gradient is not negligible; returns the worst
/// relative error and the number of coordinates compared.
fn compare<P, F>(params: &P, grad_of: impl Fn(&P) -> Vec<f64>, loss_of: F) -> (f64, usize)
where
    P: Params + Clone,
    F: Fn(&P) -> f64,
{
    let flat = flatten(params);
    let analytic = grad_of(params);
    let numeric = finite_diff_grad(|x| loss_of(&unflatten(params, x)), &flat, FD_STEP).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (a, n) in analytic.iter().zip(&numeric) {
        if a.abs() < GRAD_FLOOR {
            continue;
        }
        worst = worst.max(relative_error(*a, *n, GRAD_FLOOR));
        checked += 1;
    }
    (worst, checked)
}

fn mlp_case(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..4);
    let mut widths = vec![rng.gen_range(1..6)];
    for _ in 0..depth {
        widths.push(rng.gen_range(1..7));
    }
    let hidden = if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let last = if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Identity };
    let params = MlpParams::init(&mut rng, &widths, hidden, last);
    let batch = rng.gen_range(1..5);
    let x = random_matrix(&mut rng, batch, widths[0]);
    let w = random_matrix(&mut rng, batch, *widths.last().unwrap());

    let run = |p: &MlpParams, grads: bool| {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, grads);
        let xv = tape.constant(x.clone());
        let y = vars.forward(&mut tape, xv);
        let loss = weighted_loss(&mut tape, y, &w);
        if !grads {
            return (tape.value(loss).item(), Vec::new());
        }
        let g = tape.backward(loss).unwrap();
        let flat = vars.vars().into_iter().flat_map(|v| g.wrt(v).into_vec()).collect();
        (tape.value(loss).item(), flat)
    };
    compare(&params, |p| run(p, true).1, |p| run(p, false).0)
}

fn attention_case(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.gen_range(1..3);
    let width = heads * rng.gen_range(1..4);
    let ff = rng.gen_range(2..7);
    let mut params = AttentionBlockParams::init(&mut rng, width, heads, ff).unwrap();
    // Move the layer-norm affine terms off their identity initialization so
    // their gradients are exercised in general position.
    for t in [&mut params.ln1_gain, &mut params.ln1_bias, &mut params.ln2_gain, &mut params.ln2_bias] {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let mut segments = Vec::new();
    let mut rows = 0;
    for _ in 0..rng.gen_range(1..4) {
        let len = rng.gen_range(1..5);
        segments.push((rows, len));
        rows += len;
    }
    let segments = Rc::new(segments);
    let x = random_matrix(&mut rng, rows, width);
    let w = random_matrix(&mut rng, rows, width);

    let run = |p: &AttentionBlockParams, grads: bool| {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, grads);
        let xv = tape.constant(x.clone());
        let y = vars.forward(&mut tape, xv, &segments);
        let loss = weighted_loss(&mut tape, y, &w);
        if !grads {
            return (tape.value(loss).item(), Vec::new());
        }
        let g = tape.backward(loss).unwrap();
        let flat = vars.vars().into_iter().flat_map(|v| g.wrt(v).into_vec()).collect();
        (tape.value(loss).item(), flat)
    };
    compare(&params, |p| run(p, true).1, |p| run(p, false).0)
}

#[test]
fn tape_matches_finite_differences_on_fifty_configurations() {
    let mut failures = Vec::new();
    let mut total = 0;
    for seed in 0..25 {
        for (kind, (worst, checked)) in [("mlp", mlp_case(seed)), ("attention", attention_case(1000 + seed))] {
            total += checked;
            if worst > REL_TOL {
                failures.push(format!("{kind} seed {seed}: worst relative error {worst:.3e}"));
            }
        }
    }
    assert!(total > 1000, "too few coordinates compared: {total}");
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a0 = random_matrix(&mut rng, 3, 4).map(|v| v + 2.5);
    let b0 = random_matrix(&mut rng, 3, 4).map(|v| v + 2.5);
    let row = random_matrix(&mut rng, 1, 4);
    let col = random_matrix(&mut rng, 3, 1);
    let w = random_matrix(&mut rng, 3, 4);
    let loss = |a: &Tensor2, b: &Tensor2, grads: bool| -> (f64, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let (av, bv) = if grads {
            (tape.param(a.clone()), tape.param(b.clone()))
        } else {
            (tape.constant(a.clone()), tape.constant(b.clone()))
        };
        let r = tape.constant(row.clone());
        let c = tape.constant(col.clone());
        let q = tape.div(av, bv);
        let l = tape.log(bv);
        let e = tape.exp(q);
        let m = tape.min(e, l);
        let s = tape.softmax_rows(m);
        let s = tape.mul_row(s, r);
        let s = tape.mul_col(s, c);
        let n = tape.row_norm(av);
        let n = tape.mul_col(bv, n);
        let t = tape.add(s, n);
        let t = tape.square(t);
        let t = tape.scale(t, 0.3);
        let t = tape.add_const(t, 1.0);
        let loss = weighted_loss(&mut tape, t, &w);
        let v = tape.value(loss).item();
        if !grads {
            return (v, Vec::new(), Vec::new());
        }
        let g = tape.backward(loss).unwrap();
        (v, g.wrt(av).into_vec(), g.wrt(bv).into_vec())
    };
    let (_, ga, gb) = loss(&a0, &b0, true);
    let fa = finite_diff_grad(|x| loss(&Tensor2::from_vec(3, 4, x.to_vec()), &b0, false).0, a0.data(), FD_STEP).unwrap();
    let fb = finite_diff_grad(|x| loss(&a0, &Tensor2::from_vec(3, 4, x.to_vec()), false).0, b0.data(), FD_STEP).unwrap();
    for (a, n) in ga.iter().chain(&gb).zip(fa.iter().chain(&fb)) {
        if a.abs() >= GRAD_FLOOR {
            assert!(relative_error(*a, *n, GRAD_FLOOR) < REL_TOL, "analytic {a} vs numeric {n}");
        }
    }
}

#[test]
fn detached_values_carry_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor2::row_vector(vec![1.0, 2.0]));
    let d = tape.detach(a);
    let y = tape.mul(a, d);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(a).data(), &[1.0, 2.0]);
}

proptest! {
    #[test]
    fn mlp_forward_is_deterministic_and_matches_tape(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(1..5)];
        let params = MlpParams::init(&mut rng, &widths, Activation::Tanh, Activation::Identity);
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = mlp_forward(&params, &x).unwrap();
        let b = mlp_forward(&params, &x).unwrap();
        prop_assert_eq!(&a, &b);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let xv = tape.constant(Tensor2::row_vector(x));
        let y = vars.forward(&mut tape, xv);
        for (p, q) in a.iter().zip(tape.value(y).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
