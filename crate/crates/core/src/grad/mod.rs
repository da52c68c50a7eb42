//! Reverse-mode differentiation over row-major 2-D tensors.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks the record
//! once in reverse and returns gradients for every leaf.

pub mod gaussian;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::grid::GatherPlan;
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive with hand-written forward and backward rules.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// Gradient with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// `x · wᵀ` with `x: [B×in]`, `w: [out×in]`.
    MatMulT(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SumRows(Var),
    Sum(Var),
    Broadcast(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Relu(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Phi(Var),
    Pdf(Var),
    ClampMin(Var, f64),
    Gather {
        store: Var,
        coords: Option<Var>,
        plan: Arc<GatherPlan>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMulT(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::SumRows(..) => "sum_rows",
            Op::Sum(..) => "sum",
            Op::Broadcast(..) => "broadcast",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Phi(..) => "phi",
            Op::Pdf(..) => "pdf",
            Op::ClampMin(..) => "clamp_min",
            Op::Gather { .. } => "gather",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of operations and their outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub loss: f64,
    leaves: Vec<(Var, Tensor)>,
}

impl GradientReport {
    /// Gradient for a leaf; `None` if `v` is not a leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves
            .binary_search_by_key(&v, |(id, _)| *id)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.leaves.iter().map(|(v, t)| (*v, t))
    }

    /// Element-wise sum of two reports over the same leaves.
    pub fn accumulate(&mut self, other: &GradientReport) {
        self.loss += other.loss;
        for ((a, ta), (b, tb)) in self.leaves.iter_mut().zip(&other.leaves) {
            assert_eq!(a, b, "reports from different tapes");
            ta.add_assign(tb);
        }
    }
}

fn assert_same(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn row_broadcast(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(row.rows(), 1, "row operand must have one row");
    assert_eq!(a.cols(), row.cols(), "row operand width mismatch");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (v, &b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *v = f(*v, b);
        }
    }
    out
}

fn eval(op: &Op, nodes: &[Node]) -> Tensor {
    let v = |x: &Var| &nodes[x.0].value;
    match op {
        Op::Leaf | Op::Constant => unreachable!("leaves carry their own values"),
        Op::Add(a, b) => {
            assert_same(v(a), v(b), "add");
            v(a).zip_map(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            assert_same(v(a), v(b), "sub");
            v(a).zip_map(v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            assert_same(v(a), v(b), "mul");
            v(a).zip_map(v(b), |x, y| x * y)
        }
        Op::Div(a, b) => {
            assert_same(v(a), v(b), "div");
            v(a).zip_map(v(b), |x, y| x / y)
        }
        Op::Neg(a) => v(a).map(|x| -x),
        Op::Scale(a, s) => v(a).map(|x| x * s),
        Op::AddScalar(a, s) => v(a).map(|x| x + s),
        Op::MatMulT(x, w) => matmul_bt(v(x), v(w)),
        Op::AddRow(a, r) => row_broadcast(v(a), v(r), |x, y| x + y),
        Op::MulRow(a, r) => row_broadcast(v(a), v(r), |x, y| x * y),
        Op::SumRows(a) => col_sums(v(a)),
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Broadcast(a, rows, cols) => {
            let s = v(a);
            assert_eq!(s.shape(), (1, 1), "broadcast expects a scalar");
            Tensor::from_vec(*rows, *cols, vec![s.item(); rows * cols])
        }
        Op::ConcatCols(parts) => {
            let rows = v(&parts[0]).rows();
            let cols: usize = parts.iter().map(|p| v(p).cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut at = 0;
                for p in parts {
                    let t = v(p);
                    assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                    out.row_mut(r)[at..at + t.cols()].copy_from_slice(t.row(r));
                    at += t.cols();
                }
            }
            out
        }
        Op::ConcatRows(parts) => {
            let cols = v(&parts[0]).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = v(p);
                assert_eq!(t.cols(), cols, "concat_rows column mismatch");
                data.extend_from_slice(t.data());
                rows += t.rows();
            }
            Tensor::from_vec(rows, cols, data)
        }
        Op::SliceRows(a, start, len) => {
            let t = v(a);
            let c = t.cols();
            Tensor::from_vec(*len, c, t.data()[start * c..(start + len) * c].to_vec())
        }
        Op::SliceCols(a, start, len) => {
            let t = v(a);
            let mut out = Tensor::zeros(t.rows(), *len);
            for r in 0..t.rows() {
                out.row_mut(r).copy_from_slice(&t.row(r)[*start..start + len]);
            }
            out
        }
        Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Sqrt(a) => v(a).map(f64::sqrt),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::Phi(a) => v(a).map(gaussian::phi),
        Op::Pdf(a) => v(a).map(gaussian::pdf),
        Op::ClampMin(a, c) => v(a).map(|x| x.max(*c)),
        Op::Gather { store, coords, plan } => {
            let s = v(store);
            assert_eq!(s.shape(), (plan.vertex_count, plan.channels), "gather store shape");
            if let Some(c) = coords {
                assert_eq!(v(c).shape(), (plan.rows, plan.ndim), "gather coordinate shape");
            }
            let mut out = Tensor::zeros(plan.rows, plan.channels);
            for r in 0..plan.rows {
                let row = out.row_mut(r);
                for k in 0..plan.corners {
                    let i = r * plan.corners + k;
                    let w = plan.weight[i];
                    if w == 0.0 {
                        continue;
                    }
                    for (o, f) in row.iter_mut().zip(s.row(plan.vertex[i])) {
                        *o += w * f;
                    }
                }
            }
            out
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(v).collect();
            op.forward(&ins)
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op) -> Var {
        let value = eval(&op, &self.nodes);
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Constant, value });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b))
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::Scale(a, s))
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::AddScalar(a, s))
    }
    /// `x · wᵀ`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        self.push(Op::MatMulT(x, w))
    }
    /// Adds a `[1×cols]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.push(Op::AddRow(a, row))
    }
    /// Multiplies every row of `a` element-wise by a `[1×cols]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.push(Op::MulRow(a, row))
    }
    /// Column sums as a `[1×cols]` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.push(Op::SumRows(a))
    }
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        self.push(Op::Broadcast(a, rows, cols))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        self.push(Op::ConcatRows(parts.to_vec()))
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.value(a).rows(), "slice_rows out of bounds");
        self.push(Op::SliceRows(a, start, len))
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.value(a).cols(), "slice_cols out of bounds");
        self.push(Op::SliceCols(a, start, len))
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }
    /// Square root; its derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a))
    }
    /// Standard normal CDF.
    pub fn phi(&mut self, a: Var) -> Var {
        self.push(Op::Phi(a))
    }
    /// Standard normal density.
    pub fn pdf(&mut self, a: Var) -> Var {
        self.push(Op::Pdf(a))
    }
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::ClampMin(a, c))
    }

    /// Multilinear interpolation of a `[vertices × channels]` store at the
    /// planned coordinates. When `coords` is given, gradients also flow to it.
    pub fn gather(&mut self, store: Var, coords: Option<Var>, plan: Arc<GatherPlan>) -> Var {
        self.push(Op::Gather { store, coords, plan })
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Var {
        self.push(Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut fresh: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let value = match n.op {
                Op::Leaf | Op::Constant => n.value.clone(),
                _ => eval(&n.op, &fresh),
            };
            fresh.push(Node { op: n.op.clone(), value });
        }
        fresh.into_iter().map(|n| n.value).collect()
    }

    /// Gradients of the scalar at `loss` with respect to all leaves.
    pub fn backward(&self, loss: Var) -> Result<GradientReport> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss { slot: loss.0, rows: lv.rows(), cols: lv.cols() });
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFiniteGradient { node: loss.0, op: self.nodes[loss.0].op.name() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.local_grads(node, &g);
            for (v, t) in contributions {
                if !t.all_finite() {
                    return Err(Error::NonFiniteGradient { node: i, op: node.op.name() });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let t = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.rows(), n.value.cols()));
                (Var(i), t)
            })
            .collect();
        Ok(GradientReport { loss: lv.item(), leaves })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let v = |x: &Var| &self.nodes[x.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(v(b), |x, y| x * y)),
                (*b, g.zip_map(v(a), |x, y| x * y)),
            ],
            Op::Div(a, b) => {
                let bv = v(b);
                let ga = g.zip_map(bv, |x, y| x / y);
                let gb = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(v(a).data())
                        .zip(bv.data())
                        .map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi))
                        .collect(),
                );
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::AddScalar(a, _) => vec![(*a, g.clone())],
            Op::MatMulT(x, w) => vec![(*x, matmul(g, v(w))), (*w, matmul_at(g, v(x)))],
            Op::AddRow(a, r) => vec![(*a, g.clone()), (*r, col_sums(g))],
            Op::MulRow(a, r) => {
                let ga = row_broadcast(g, v(r), |x, y| x * y);
                let gr = col_sums(&g.zip_map(v(a), |x, y| x * y));
                vec![(*a, ga), (*r, gr)]
            }
            Op::SumRows(a) => {
                let rows = v(a).rows();
                let mut out = Tensor::zeros(rows, g.cols());
                for r in 0..rows {
                    out.row_mut(r).copy_from_slice(g.data());
                }
                vec![(*a, out)]
            }
            Op::Sum(a) => {
                let (r, c) = v(a).shape();
                vec![(*a, Tensor::from_vec(r, c, vec![g.item(); r * c]))]
            }
            Op::Broadcast(a, ..) => vec![(*a, Tensor::scalar(g.sum()))],
            Op::ConcatCols(parts) => {
                let mut at = 0;
                parts
                    .iter()
                    .map(|p| {
                        let w = v(p).cols();
                        let mut out = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            out.row_mut(r).copy_from_slice(&g.row(r)[at..at + w]);
                        }
                        at += w;
                        (*p, out)
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut at = 0;
                parts
                    .iter()
                    .map(|p| {
                        let r = v(p).rows();
                        let out = Tensor::from_vec(r, c, g.data()[at * c..(at + r) * c].to_vec());
                        at += r;
                        (*p, out)
                    })
                    .collect()
            }
            Op::SliceRows(a, start, len) => {
                let src = v(a);
                let c = src.cols();
                let mut out = Tensor::zeros(src.rows(), c);
                out.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![(*a, out)]
            }
            Op::SliceCols(a, start, len) => {
                let src = v(a);
                let mut out = Tensor::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    out.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                vec![(*a, out)]
            }
            Op::Relu(a) => vec![(*a, g.zip_map(v(a), |gi, x| if x > 0.0 { gi } else { 0.0 }))],
            Op::Tanh(a) => vec![(*a, g.zip_map(y, |gi, t| gi * (1.0 - t * t)))],
            Op::Log(a) => vec![(*a, g.zip_map(v(a), |gi, x| gi / x))],
            Op::Exp(a) => vec![(*a, g.zip_map(y, |gi, e| gi * e))],
            Op::Sqrt(a) => vec![(*a, g.zip_map(y, |gi, s| if s > 0.0 { gi * 0.5 / s } else { 0.0 }))],
            Op::Square(a) => vec![(*a, g.zip_map(v(a), |gi, x| 2.0 * gi * x))],
            Op::Phi(a) => vec![(*a, g.zip_map(v(a), |gi, x| gi * gaussian::pdf(x)))],
            Op::Pdf(a) => vec![(*a, g.zip_map(v(a), |gi, x| -gi * x * gaussian::pdf(x)))],
            Op::ClampMin(a, c) => vec![(*a, g.zip_map(v(a), |gi, x| if x > *c { gi } else { 0.0 }))],
            Op::Gather { store, coords, plan } => {
                let s = v(store);
                let mut gs = Tensor::zeros(s.rows(), s.cols());
                let mut gc = coords.map(|_| Tensor::zeros(plan.rows, plan.ndim));
                for r in 0..plan.rows {
                    let gr = g.row(r);
                    for k in 0..plan.corners {
                        let i = r * plan.corners + k;
                        let vert = plan.vertex[i];
                        let w = plan.weight[i];
                        if w != 0.0 {
                            for (o, gi) in gs.row_mut(vert).iter_mut().zip(gr) {
                                *o += w * gi;
                            }
                        }
                        if let Some(gc) = gc.as_mut() {
                            let dot: f64 = gr.iter().zip(s.row(vert)).map(|(a, b)| a * b).sum();
                            let dw = &plan.dweight[i * plan.ndim..(i + 1) * plan.ndim];
                            for (o, d) in gc.row_mut(r).iter_mut().zip(dw) {
                                *o += d * dot;
                            }
                        }
                    }
                }
                let mut out = vec![(*store, gs)];
                if let (Some(c), Some(t)) = (coords, gc) {
                    out.push((*c, t));
                }
                out
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(v).collect();
                let gs = op.backward(&ins, y, g);
                assert_eq!(gs.len(), inputs.len(), "{} returned wrong gradient count", op.name());
                inputs.iter().copied().zip(gs).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests;
