//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `n x m` times an `n x 1` column, broadcast over columns.
    MulColumn(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    HStack(Vec<NodeId>),
    /// Mean softmax cross-entropy; stores the softmax probabilities.
    SoftmaxXent(NodeId, Vec<usize>, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulColumn(..) => "mul_column",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Transpose(..) => "transpose",
            Op::GatherRows(..) => "gather_rows",
            Op::HStack(..) => "hstack",
            Op::SoftmaxXent(..) => "softmax_xent",
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::AddBias(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MulColumn(a, b) => vec![*a, *b],
        Op::MulConst(a, _)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Tanh(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumCols(a)
        | Op::Transpose(a)
        | Op::GatherRows(a, _)
        | Op::SoftmaxXent(a, _, _) => vec![*a],
        Op::HStack(parts) => parts.clone(),
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records tensor operations so that gradients can be propagated back.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `id`. Nodes that do not
    /// influence the output get an all-zero tensor.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Like [`get`](Self::get) but returns `None` when no gradient reached the node.
    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value.as_matrix(), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value.as_matrix(), false)
    }

    /// Reports the node indices of every input, in order. Used by tests to
    /// check the topological-order invariant.
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        op_inputs(&self.nodes[id.0].op)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("graph op `{}` (node {})", op.name(), self.nodes.len()),
            });
        }
        let requires_grad = op_inputs(&op)
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_raw(op, value, requires_grad))
    }

    fn check_same(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::dim(
                what,
                format!("{}x{}", va.rows(), va.cols()),
                format!("{}x{}", vb.rows(), vb.cols()),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::dim(
                "add_bias",
                format!("1x{}", va.cols()),
                format!("{}x{}", vb.rows(), vb.cols()),
            ));
        }
        let m = va.cols();
        let mut out = va.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % m];
        }
        self.push(Op::AddBias(a, bias), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    /// Multiplies every row `i` of `a` by the scalar `col[i]`.
    pub fn mul_column(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(Error::dim(
                "mul_column",
                format!("{}x1", va.rows()),
                format!("{}x{}", vc.rows(), vc.cols()),
            ));
        }
        let m = va.cols();
        let mut out = va.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= vc.data()[i / m];
        }
        self.push(Op::MulColumn(a, col), out)
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> Result<NodeId> {
        let va = self.value(a);
        if !va.same_shape(&c) {
            return Err(Error::dim(
                "mul_const",
                format!("{}x{}", va.rows(), va.cols()),
                format!("{}x{}", c.rows(), c.cols()),
            ));
        }
        let v = va.zip_map(&c, |x, y| x * y);
        self.push(Op::MulConst(a, c.as_matrix()), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Numeric(format!("sqrt of negative value {bad}")));
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v)
    }

    /// Row sums, `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).sum_cols();
        self.push(Op::SumCols(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let rows = self.value(a).rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows index", format!("< {rows}"), bad));
        }
        let v = self.value(a).gather_rows(&indices);
        self.push(Op::GatherRows(a, indices), v)
    }

    pub fn hstack(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Tensor::hstack(&values)?;
        self.push(Op::HStack(parts), v)
    }

    /// Mean cross-entropy of softmax(`logits`) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let v = self.value(logits);
        let (n, c) = (v.rows(), v.cols());
        if labels.len() != n {
            return Err(Error::dim("softmax_cross_entropy labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::dim("softmax_cross_entropy label", format!("< {c}"), bad));
        }
        let mut probs = Tensor::zeros(n, c);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = v.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..c {
                probs.set(i, j, (row[j] - max).exp() / denom);
            }
            loss -= row[label] - max - denom.ln();
        }
        let out = Tensor::scalar(loss / n as f64);
        self.push(Op::SoftmaxXent(logits, labels, probs), out)
    }

    /// Reverse sweep with a unit seed on a scalar output.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        let v = self.value(output);
        if v.len() != 1 {
            return Err(Error::dim("backward without seed", "scalar output", v.len()));
        }
        self.backward_with_seed(output, Tensor::scalar(1.0))
    }

    /// Propagates `seed` (shaped like `output`) back through the graph. A graph
    /// can only be differentiated once.
    pub fn backward_with_seed(&mut self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let out_val = self.value(output);
        let (rows, cols) = (out_val.rows(), out_val.cols());
        if !out_val.same_shape(&seed) {
            return Err(Error::dim(
                "backward seed",
                format!("{rows}x{cols}"),
                format!("{}x{}", seed.rows(), seed.cols()),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.reshape(rows, cols)?);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let acc = |id: NodeId, delta: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.matmul(&vb.transpose())?, &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, va.transpose().matmul(&g)?, &mut grads);
                    }
                }
                Op::AddBias(a, b) => {
                    acc(*b, g.sum_rows(), &mut grads);
                    acc(*a, g.clone(), &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0), &mut grads);
                    acc(*a, g.clone(), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, g.zip_map(vb, |x, y| x * y), &mut grads);
                    acc(*b, g.zip_map(va, |x, y| x * y), &mut grads);
                }
                Op::MulColumn(a, c) => {
                    let (va, vc) = (self.value(*a), self.value(*c));
                    let m = va.cols();
                    let mut ga = g.clone();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= vc.data()[i / m];
                    }
                    let gc = g.zip_map(va, |x, y| x * y).sum_cols();
                    acc(*a, ga, &mut grads);
                    acc(*c, gc, &mut grads);
                }
                Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y), &mut grads),
                Op::Scale(a, s) => acc(*a, g.scale(*s), &mut grads),
                Op::AddScalar(a) => acc(*a, g.clone(), &mut grads),
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |x, z| if z > 0.0 { x } else { 0.0 });
                    acc(*a, d, &mut grads);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let d = g.zip_map(self.value(*a), |x, z| if z > 0.0 { x } else { s * x });
                    acc(*a, d, &mut grads);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    acc(*a, d, &mut grads);
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(*a), |x, z| 2.0 * z * x);
                    acc(*a, d, &mut grads);
                }
                Op::Sqrt(a) => {
                    let d = g.zip_map(&node.value, |x, y| x / (2.0 * y));
                    d.ensure_finite("sqrt backward (zero input)")?;
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    acc(*a, Tensor::filled(va.rows(), va.cols(), g.item()), &mut grads);
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let s = g.item() / va.len() as f64;
                    acc(*a, Tensor::filled(va.rows(), va.cols(), s), &mut grads);
                }
                Op::SumCols(a) => {
                    let va = self.value(*a);
                    let m = va.cols();
                    let mut d = Tensor::zeros(va.rows(), m);
                    for (i, v) in d.data_mut().iter_mut().enumerate() {
                        *v = g.data()[i / m];
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::GatherRows(a, indices) => {
                    let va = self.value(*a);
                    let m = va.cols();
                    let mut d = Tensor::zeros(va.rows(), m);
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..m {
                            d.data_mut()[i * m + j] += g.data()[k * m + j];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::HStack(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(*p, g.columns(start, start + w), &mut grads);
                        start += w;
                    }
                }
                Op::SoftmaxXent(a, labels, probs) => {
                    let n = labels.len() as f64;
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        let v = d.get(i, l);
                        d.set(i, l, v - 1.0);
                    }
                    acc(*a, d.scale(g.item() / n), &mut grads);
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| (n.value.rows(), n.value.cols()))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_fn(f: impl Fn(&mut Graph, NodeId) -> Result<NodeId>, x: f64) -> (f64, f64) {
        let mut g = Graph::new();
        let xv = g.variable(Tensor::scalar(x));
        let y = f(&mut g, xv).unwrap();
        let val = g.value(y).item();
        let grads = g.backward(y).unwrap();
        (val, grads.get(xv).item())
    }

    #[test]
    fn identity_derivative() {
        let (v, d) = scalar_fn(|_, x| Ok(x), 3.0);
        assert_eq!((v, d), (3.0, 1.0));
    }

    #[test]
    fn inactive_relu_has_zero_derivative() {
        let (v, d) = scalar_fn(
            |g, x| {
                let y = g.scale(x, 2.0)?;
                let y = g.add_scalar(y, 1.0)?;
                g.relu(y)
            },
            -3.0,
        );
        assert_eq!((v, d), (0.0, 0.0));
    }

    #[test]
    fn tanh_derivative_closed_form() {
        let (_, d) = scalar_fn(|g, x| g.tanh(x), 0.5);
        let expected = 1.0 - 0.5f64.tanh().powi(2);
        assert!((d - expected).abs() < 1e-15);
        assert!((d - 0.786448).abs() < 1e-6);
    }

    #[test]
    fn reuse_is_an_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(1.0));
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn seed_shape_checked() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(2, 3));
        assert!(matches!(
            g.backward_with_seed(x, Tensor::zeros(3, 2)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn nodes_are_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::filled(2, 2, 0.5));
        let b = g.constant(Tensor::identity(2));
        let c = g.matmul(a, b).unwrap();
        let d = g.tanh(c).unwrap();
        let e = g.mul(d, a).unwrap();
        let _ = g.mean(e).unwrap();
        for i in 0..g.len() {
            for inp in g.inputs_of(NodeId(i)) {
                assert!(inp.0 < i);
            }
        }
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_gradient_matches_differences() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.5]]).unwrap();
        let labels = vec![2, 0];
        let mut g = Graph::new();
        let l = g.variable(logits.clone());
        let loss = g.softmax_cross_entropy(l, labels.clone()).unwrap();
        let an = g.backward(loss).unwrap().get(l);
        let eps = 1e-6;
        for k in 0..logits.len() {
            let eval = |delta: f64| {
                let mut t = logits.clone();
                t.data_mut()[k] += delta;
                let mut g = Graph::new();
                let l = g.constant(t);
                let loss = g.softmax_cross_entropy(l, labels.clone()).unwrap();
                g.value(loss).item()
            };
            let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((num - an.data()[k]).abs() < 1e-8);
        }
    }
}
