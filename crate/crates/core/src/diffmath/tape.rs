//! Tape-based reverse-mode differentiation over [`DenseMatrix`] values.
//!
//! Every operation appends a node holding its forward value, so node ids are
//! a topological order by construction. [`Tape::backward`] walks the nodes in
//! reverse once, accumulating adjoints only for nodes that depend on a
//! variable leaf.

use super::{DenseMatrix, MathError};

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
    Transpose(NodeId),
    RowSoftmax { input: NodeId, scale: f64 },
    MaxNorm { input: NodeId, argmax: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Broadcast(NodeId),
    Sum(NodeId),
    Square(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Maximum(NodeId, NodeId),
    Clamp { input: NodeId, lo: f64, hi: f64 },
    Column { input: NodeId, col: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoint of the loss with respect to one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub target: NodeId,
    pub data: DenseMatrix,
}

/// Result of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`; all zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Gradient {
        let data = match &self.adjoints[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                DenseMatrix::zeros(r, c)
            }
        };
        Gradient { target: id, data }
    }

    pub fn is_zero(&self, id: NodeId) -> bool {
        self.adjoints[id.0]
            .as_ref()
            .is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
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

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input.
    pub fn variable(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Copies the value of `id` into a constant node, cutting the gradient.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), v, rg)
    }

    /// Row-wise softmax of `m / scale`.
    pub fn row_softmax(&mut self, m: NodeId, scale: f64) -> Result<NodeId, MathError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(MathError::Contract(format!(
                "row_softmax scale must be positive, got {scale}"
            )));
        }
        let v = self.value(m).row_softmax(scale);
        let rg = self.rg(m);
        Ok(self.push(Op::RowSoftmax { input: m, scale }, v, rg))
    }

    /// Maximum entry as a 1x1 node. The gradient goes to the first maximal
    /// entry in row-major order.
    pub fn max_norm(&mut self, v: NodeId) -> Result<NodeId, MathError> {
        let (argmax, max) = self.value(v).argmax().ok_or(MathError::Shape {
            op: "max_norm",
            detail: "empty input".into(),
        })?;
        let rg = self.rg(v);
        Ok(self.push(
            Op::MaxNorm { input: v, argmax },
            DenseMatrix::scalar(max),
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        make: fn(NodeId, NodeId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, MathError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(MathError::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let v = va.zip_map(vb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(make(a, b), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        self.binary("maximum", a, b, Op::Maximum, f64::max)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    /// Add a constant.
    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(Op::Shift(a), v, rg)
    }

    /// `c - a`, a common enough pattern to spell out.
    pub fn rsub_scalar(&mut self, c: f64, a: NodeId) -> NodeId {
        let neg = self.scale(a, -1.0);
        self.shift(neg, c)
    }

    /// Expand a 1x1 node to `rows x cols`.
    pub fn broadcast(&mut self, s: NodeId, rows: usize, cols: usize) -> Result<NodeId, MathError> {
        let x = self.value(s).item().ok_or_else(|| MathError::Shape {
            op: "broadcast",
            detail: format!("expected 1x1, got {:?}", self.value(s).shape()),
        })?;
        let rg = self.rg(s);
        Ok(self.push(Op::Broadcast(s), DenseMatrix::filled(rows, cols, x), rg))
    }

    /// Divide every entry of `a` by the 1x1 node `s`.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, MathError> {
        let (r, c) = self.value(a).shape();
        let b = self.broadcast(s, r, c)?;
        self.div(a, b)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DenseMatrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(Op::Square(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(Op::Ln(a), v, rg)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(Op::Clamp { input: a, lo, hi }, v, rg)
    }

    /// Column `col` as an `rows x 1` node.
    pub fn column(&mut self, a: NodeId, col: usize) -> Result<NodeId, MathError> {
        let m = self.value(a);
        if col >= m.cols() {
            return Err(MathError::Shape {
                op: "column",
                detail: format!("column {col} of a {}-column matrix", m.cols()),
            });
        }
        let v = DenseMatrix::column_vector(m.column(col));
        let rg = self.rg(a);
        Ok(self.push(Op::Column { input: a, col }, v, rg))
    }

    /// Reverse accumulation from a 1x1 `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, MathError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(MathError::NotScalar(shape.0, shape.1));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; n];
        adj[loss.0] = Some(DenseMatrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            adj[id] = Some(g);
        }

        // Constants never hold an adjoint.
        for (a, node) in adj.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *a = None;
            }
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &DenseMatrix,
        adj: &mut [Option<DenseMatrix>],
    ) -> Result<(), MathError> {
        let mut acc = |id: NodeId, contrib: DenseMatrix| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    acc(a, g.matmul_nt(val(b))?);
                }
                if self.rg(b) {
                    acc(b, val(a).matmul_tn(g)?);
                }
            }
            Op::Transpose(a) => acc(a, g.transpose()),
            Op::RowSoftmax { input, scale } => {
                let y = &node.value;
                let mut dx = DenseMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (&yi, &gi)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yi * (gi - dot) / scale;
                    }
                }
                acc(input, dx);
            }
            Op::MaxNorm { input, argmax } => {
                let (r, c) = val(input).shape();
                let mut d = DenseMatrix::zeros(r, c);
                d.data_mut()[argmax] = g.data()[0];
                acc(input, d);
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    acc(a, g.zip_map(val(b), |x, y| x * y));
                }
                if self.rg(b) {
                    acc(b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    acc(a, g.zip_map(val(b), |x, y| x / y));
                }
                if self.rg(b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = node.value.zip_map(val(b), |q, y| q / y);
                    acc(b, g.zip_map(&q, |x, q| -x * q));
                }
            }
            Op::Scale(a, c) => acc(a, g.map(|x| x * c)),
            Op::Shift(a) => acc(a, g.clone()),
            Op::Broadcast(s) => acc(s, DenseMatrix::scalar(g.sum())),
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                acc(a, DenseMatrix::filled(r, c, g.data()[0]));
            }
            Op::Square(a) => acc(a, g.zip_map(val(a), |x, v| 2.0 * v * x)),
            Op::Sigmoid(a) => acc(a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
            Op::Ln(a) => acc(a, g.zip_map(val(a), |x, v| x / v)),
            Op::Maximum(a, b) => {
                let (va, vb) = (val(a), val(b));
                let take_a = va.zip_map(vb, |x, y| if x >= y { 1.0 } else { 0.0 });
                acc(a, g.zip_map(&take_a, |x, m| x * m));
                acc(b, g.zip_map(&take_a, |x, m| x * (1.0 - m)));
            }
            Op::Clamp { input, lo, hi } => {
                let d = g.zip_map(val(input), |x, v| if v >= lo && v <= hi { x } else { 0.0 });
                acc(input, d);
            }
            Op::Column { input, col } => {
                let (r, c) = val(input).shape();
                let mut d = DenseMatrix::zeros(r, c);
                for (row, &x) in g.data().iter().enumerate() {
                    d.set(row, col, x);
                }
                acc(input, d);
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
