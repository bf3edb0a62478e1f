//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Values are [`Tensor2`] matrices. Each operation appends a node holding its
//! forward value; [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints into every node that depends on a tracked leaf.
//! The op set covers what the policy, hypernetwork and critic need and
//! nothing more.

use std::rc::Rc;

use super::tensor::{dot, Tensor2};
use crate::error::{usage, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    RowNorm(usize),
    RowSum(usize),
    Sum(usize),
    SegmentSum(usize, Rc<Vec<usize>>),
    GatherRows(usize, Rc<Vec<usize>>),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        segments: Rc<Vec<(usize, usize)>>,
    },
    PackedMatVec {
        packed: usize,
        vecs: usize,
        rows: Rc<Vec<usize>>,
        offset: usize,
        out_dim: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    tracked: bool,
}

/// Single-owner recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor2 {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor2::zeros(r, c)
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor2>], idx: usize, g: Tensor2) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tracked)
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into an untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let t = self.tracked(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), t)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let t = self.tracked(&[a.0, b.0]);
        self.push(value, Op::MatMulBt(a.0, b.0), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let t = self.tracked(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let t = self.tracked(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let t = self.tracked(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), t)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let t = self.tracked(&[a.0, b.0]);
        self.push(value, Op::Div(a.0, b.0), t)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), f64::min);
        let t = self.tracked(&[a.0, b.0]);
        self.push(value, Op::Min(a.0, b.0), t)
    }

    /// `a + row` with `row` (1×m) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let t = self.tracked(&[a.0, row.0]);
        self.push(out, Op::AddRow(a.0, row.0), t)
    }

    /// `a ⊙ row` with `row` (1×m) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let t = self.tracked(&[a.0, row.0]);
        self.push(out, Op::MulRow(a.0, row.0), t)
    }

    /// `a ⊙ col` with `col` (n×1) broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let t = self.tracked(&[a.0, col.0]);
        self.push(out, Op::MulCol(a.0, col.0), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let t = self.tracked(&[a.0]);
        self.push(value, Op::Scale(a.0, s), t)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let t = self.tracked(&[a.0]);
        self.push(value, Op::AddConst(a.0), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let t = self.tracked(&[a.0]);
        self.push(value, Op::Tanh(a.0), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let t = self.tracked(&[a.0]);
        self.push(value, Op::Relu(a.0), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let t = self.tracked(&[a.0]);
        self.push(value, Op::Exp(a.0), t)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let t = self.tracked(&[a.0]);
        self.push(value, Op::Log(a.0), t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let t = self.tracked(&[a.0]);
        self.push(value, Op::Square(a.0), t)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let t = self.tracked(&[a.0]);
        self.push(value, Op::Clamp(a.0, lo, hi), t)
    }

    /// Euclidean norm of each row, shape n×1.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows()).map(|r| dot(av.row(r), av.row(r)).sqrt()).collect();
        let t = self.tracked(&[a.0]);
        self.push(Tensor2::col_vector(out), Op::RowNorm(a.0), t)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let t = self.tracked(&[a.0]);
        self.push(Tensor2::col_vector(out), Op::RowSum(a.0), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        let t = self.tracked(&[a.0]);
        self.push(value, Op::Sum(a.0), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums rows into `segments` buckets; `segment_of[r]` names the bucket of row `r`.
    pub fn segment_sum(&mut self, a: Var, segment_of: Rc<Vec<usize>>, segments: usize) -> Var {
        let av = self.value(a);
        assert_eq!(segment_of.len(), av.rows(), "segment_sum ids");
        let mut out = Tensor2::zeros(segments, av.cols());
        for (r, &s) in segment_of.iter().enumerate() {
            for (o, v) in out.row_mut(s).iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let t = self.tracked(&[a.0]);
        self.push(out, Op::SegmentSum(a.0, segment_of), t)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let value = self.value(a).gather_rows(&idx);
        let t = self.tracked(&[a.0]);
        self.push(value, Op::GatherRows(a.0, idx), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols range");
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let value = Tensor2::from_vec(av.rows(), len, out);
        let t = self.tracked(&[a.0]);
        self.push(value, Op::SliceCols(a.0, start), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = self.tracked(&ids);
        self.push(Tensor2::from_vec(rows, cols, data), Op::ConcatRows(ids), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let t = self.tracked(&[a.0]);
        self.push(out, Op::SoftmaxRows(a.0), t)
    }

    /// Row-wise layer normalization with gain and offset (both 1×m).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            normalize_in_place(row, eps);
            for ((o, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let t = self.tracked(&[x.0, gain.0, bias.0]);
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            t,
        )
    }

    /// Multi-head scaled dot-product attention restricted to row segments.
    ///
    /// `segments` lists `(start, len)` row ranges; tokens attend only within
    /// their own segment. No positional information enters.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Rc<Vec<(usize, usize)>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        assert!(heads > 0 && width % heads == 0, "attention head split");
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Tensor2::zeros(qv.rows(), width);
        for &(start, len) in segments.iter() {
            for h in 0..heads {
                let c0 = h * hd;
                for i in 0..len {
                    let qi = &qv.row(start + i)[c0..c0 + hd];
                    let mut w: Vec<f64> = (0..len)
                        .map(|j| dot(qi, &kv.row(start + j)[c0..c0 + hd]) * scale)
                        .collect();
                    softmax_in_place(&mut w);
                    let orow = &mut out.row_mut(start + i)[c0..c0 + hd];
                    for (j, wj) in w.iter().enumerate() {
                        for (o, x) in orow.iter_mut().zip(&vv.row(start + j)[c0..c0 + hd]) {
                            *o += wj * x;
                        }
                    }
                }
            }
        }
        let t = self.tracked(&[q.0, k.0, v.0]);
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                segments,
            },
            t,
        )
    }

    /// Row `i` of the output is `M_i · vecs[i]`, where `M_i` is the
    /// `out_dim × in_dim` block stored row-major in `packed[rows[i]]`
    /// starting at column `offset`.
    pub fn packed_matvec(
        &mut self,
        packed: Var,
        vecs: Var,
        rows: Rc<Vec<usize>>,
        offset: usize,
        out_dim: usize,
    ) -> Var {
        let (pv, vv) = (self.value(packed), self.value(vecs));
        let in_dim = vv.cols();
        assert_eq!(rows.len(), vv.rows(), "packed_matvec rows");
        assert!(offset + out_dim * in_dim <= pv.cols(), "packed_matvec block");
        let mut out = Tensor2::zeros(vv.rows(), out_dim);
        for (i, &pr) in rows.iter().enumerate() {
            let block = &pv.row(pr)[offset..offset + out_dim * in_dim];
            let x = vv.row(i);
            for (o, slot) in out.row_mut(i).iter_mut().enumerate() {
                *slot = dot(&block[o * in_dim..(o + 1) * in_dim], x);
            }
        }
        let t = self.tracked(&[packed.0, vecs.0]);
        self.push(
            out,
            Op::PackedMatVec {
                packed: packed.0,
                vecs: vecs.0,
                rows,
                offset,
                out_dim,
            },
            t,
        )
    }

    /// Propagates adjoints from a 1×1 output back through the tape.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.shape() != (1, 1) {
            return usage(format!(
                "backward needs a scalar output, got {}x{}",
                out.rows(),
                out.cols()
            ));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor2::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let val = |i: usize| &self.nodes[i].value;
        let want = |i: usize| self.nodes[i].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.matmul_bt(val(*b)));
                }
                if want(*b) {
                    acc(grads, *b, val(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.matmul(val(*b)));
                }
                if want(*b) {
                    acc(grads, *b, g.matmul_at(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*b) {
                    acc(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if want(*b) {
                    acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.zip_map(val(*b), |x, y| x / y));
                }
                if want(*b) {
                    let q = val(*a).zip_map(val(*b), |x, y| -x / (y * y));
                    acc(grads, *b, g.zip_map(&q, |x, y| x * y));
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mask = av.zip_map(bv, |x, y| if x <= y { 1.0 } else { 0.0 });
                if want(*a) {
                    acc(grads, *a, g.zip_map(&mask, |x, m| x * m));
                }
                if want(*b) {
                    acc(grads, *b, g.zip_map(&mask, |x, m| x * (1.0 - m)));
                }
            }
            Op::AddRow(a, r) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*r) {
                    acc(grads, *r, column_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                let rv = val(*r);
                if want(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, y) in ga.row_mut(i).iter_mut().zip(rv.data()) {
                            *x *= y;
                        }
                    }
                    acc(grads, *a, ga);
                }
                if want(*r) {
                    acc(grads, *r, column_sums(&g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Op::MulCol(a, c) => {
                let cv = val(*c);
                if want(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = cv.data()[i];
                        for x in ga.row_mut(i) {
                            *x *= s;
                        }
                    }
                    acc(grads, *a, ga);
                }
                if want(*c) {
                    let av = val(*a);
                    let gc: Vec<f64> = (0..g.rows()).map(|i| dot(g.row(i), av.row(i))).collect();
                    acc(grads, *c, Tensor2::col_vector(gc));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::AddConst(a) => acc(grads, *a, g.clone()),
            Op::Tanh(a) => acc(grads, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Exp(a) => acc(grads, *a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => acc(grads, *a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Square(a) => acc(grads, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    grads,
                    *a,
                    g.zip_map(val(*a), |x, y| if y >= lo && y <= hi { x } else { 0.0 }),
                );
            }
            Op::RowNorm(a) => {
                let av = val(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let n = node.value.data()[r];
                    if n > 0.0 {
                        let s = g.data()[r] / n;
                        for (o, x) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = s * x;
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let s = g.data()[r];
                    ga.row_mut(r).fill(s);
                }
                acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Tensor2::filled(r, c, g.item()));
            }
            Op::SegmentSum(a, seg) => {
                let ga = g.gather_rows(seg);
                acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                let len = g.cols();
                for r in 0..av.rows() {
                    ga.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                acc(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let n = val(p).rows();
                    if want(p) {
                        let idx: Vec<usize> = (row..row + n).collect();
                        acc(grads, p, g.gather_rows(&idx));
                    }
                    row += n;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for ((o, gy), yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yy * (gy - s);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(*x);
                let gv = val(*gain);
                let m = xv.cols();
                let mut gx = Tensor2::zeros(xv.rows(), m);
                let mut ggain = vec![0.0; m];
                let mut gbias = vec![0.0; m];
                let mut xhat = vec![0.0; m];
                let mut dxhat = vec![0.0; m];
                for r in 0..xv.rows() {
                    xhat.copy_from_slice(xv.row(r));
                    let (_, inv) = normalize_in_place(&mut xhat, *eps);
                    let gr = g.row(r);
                    for c in 0..m {
                        ggain[c] += gr[c] * xhat[c];
                        gbias[c] += gr[c];
                        dxhat[c] = gr[c] * gv.data()[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                    let mean_dx = dot(&dxhat, &xhat) / m as f64;
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                    }
                }
                if want(*x) {
                    acc(grads, *x, gx);
                }
                if want(*gain) {
                    acc(grads, *gain, Tensor2::row_vector(ggain));
                }
                if want(*bias) {
                    acc(grads, *bias, Tensor2::row_vector(gbias));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let width = qv.cols();
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut gq = Tensor2::zeros(qv.rows(), width);
                let mut gk = Tensor2::zeros(kv.rows(), width);
                let mut gv = Tensor2::zeros(vv.rows(), width);
                for &(start, len) in segments.iter() {
                    for h in 0..*heads {
                        let c0 = h * hd;
                        for i in 0..len {
                            let qi = &qv.row(start + i)[c0..c0 + hd];
                            let mut w: Vec<f64> = (0..len)
                                .map(|j| dot(qi, &kv.row(start + j)[c0..c0 + hd]) * scale)
                                .collect();
                            softmax_in_place(&mut w);
                            let go = &g.row(start + i)[c0..c0 + hd];
                            // dA_ij = go · v_j ; dV_j += A_ij go
                            let da: Vec<f64> = (0..len)
                                .map(|j| dot(go, &vv.row(start + j)[c0..c0 + hd]))
                                .collect();
                            for (j, wj) in w.iter().enumerate() {
                                for (o, x) in gv.row_mut(start + j)[c0..c0 + hd].iter_mut().zip(go) {
                                    *o += wj * x;
                                }
                            }
                            let s = dot(&da, &w);
                            for j in 0..len {
                                let ds = w[j] * (da[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj: Vec<f64> = kv.row(start + j)[c0..c0 + hd].to_vec();
                                for (o, x) in gq.row_mut(start + i)[c0..c0 + hd].iter_mut().zip(&kj) {
                                    *o += ds * x;
                                }
                                for (o, x) in gk.row_mut(start + j)[c0..c0 + hd].iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                if want(*q) {
                    acc(grads, *q, gq);
                }
                if want(*k) {
                    acc(grads, *k, gk);
                }
                if want(*v) {
                    acc(grads, *v, gv);
                }
            }
            Op::PackedMatVec {
                packed,
                vecs,
                rows,
                offset,
                out_dim,
            } => {
                let (pv, vv) = (val(*packed), val(*vecs));
                let in_dim = vv.cols();
                if want(*packed) {
                    let mut gp = Tensor2::zeros(pv.rows(), pv.cols());
                    for (i, &pr) in rows.iter().enumerate() {
                        let x = vv.row(i);
                        let gi = g.row(i);
                        let block = &mut gp.row_mut(pr)[*offset..*offset + out_dim * in_dim];
                        for o in 0..*out_dim {
                            let go = gi[o];
                            if go == 0.0 {
                                continue;
                            }
                            for (b, xv) in block[o * in_dim..(o + 1) * in_dim].iter_mut().zip(x) {
                                *b += go * xv;
                            }
                        }
                    }
                    acc(grads, *packed, gp);
                }
                if want(*vecs) {
                    let mut gvv = Tensor2::zeros(vv.rows(), in_dim);
                    for (i, &pr) in rows.iter().enumerate() {
                        let block = &pv.row(pr)[*offset..*offset + out_dim * in_dim];
                        let gi = g.row(i);
                        let orow = gvv.row_mut(i);
                        for o in 0..*out_dim {
                            let go = gi[o];
                            for (x, b) in orow.iter_mut().zip(&block[o * in_dim..(o + 1) * in_dim]) {
                                *x += go * b;
                            }
                        }
                    }
                    acc(grads, *vecs, gvv);
                }
            }
        }
    }
}

fn column_sums(g: &Tensor2) -> Tensor2 {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    Tensor2::row_vector(out)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

/// Normalizes to zero mean and unit variance, returning `(mean, 1/std)`.
pub(crate) fn normalize_in_place(x: &mut [f64], eps: f64) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let inv = 1.0 / (var + eps).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) * inv;
    }
    (mean, inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2::row_vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2::row_vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor2::scalar(3.5));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2::row_vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(crate::Error::Usage(_))));
    }
}
