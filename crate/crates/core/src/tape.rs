//! Minimal reverse-mode differentiation tape over `f64` matrices.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//! Only the operations needed by the sequence models live here; shapes are
//! checked eagerly and violations panic, since they are programming errors
//! rather than data errors.

use ndarray::{s, Array2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Sum(NodeId),
    SumSquares(NodeId),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "node is not a scalar");
        v[(0, 0)]
    }

    /// Gradient accumulated into `id` by the last `backward` call. Zero
    /// matrix for nodes the loss does not depend on.
    pub fn grad(&self, id: NodeId) -> Array2<f64> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[id.0].value.dim()),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.nodes[a.0].value.dim();
        let (rb, cb) = self.nodes[b.0].value.dim();
        assert_eq!(ca, rb, "matmul shape mismatch {ra}x{ca} . {rb}x{cb}");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::MatMul(a, b))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op: fn(NodeId, NodeId) -> Op, f: fn(f64, f64) -> f64) -> NodeId {
        assert_eq!(
            self.nodes[a.0].value.dim(),
            self.nodes[b.0].value.dim(),
            "elementwise shape mismatch"
        );
        let value = ndarray::Zip::from(&self.nodes[a.0].value)
            .and(&self.nodes[b.0].value)
            .map_collect(|&x, &y| f(x, y));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, op(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x * k);
        let needs = self.needs(a);
        self.push(value, needs, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x + k);
        let needs = self.needs(a);
        self.push(value, needs, Op::AddScalar(a, k))
    }

    fn unary(&mut self, a: NodeId, op: fn(NodeId) -> Op, f: fn(f64) -> f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(f);
        let needs = self.needs(a);
        self.push(value, needs, op(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp, f64::exp)
    }

    /// Elementwise square root; inputs must be strictly positive for the
    /// backward pass to stay finite.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    /// Concatenates row vectors (or equal-row matrices) along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut value = Array2::zeros((rows, total));
        let mut col = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.nrows(), rows, "concat row mismatch");
            value.slice_mut(s![.., col..col + v.ncols()]).assign(v);
            col += v.ncols();
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(value, needs, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.nodes[a.0].value.slice(s![.., start..start + len]).to_owned();
        let needs = self.needs(a);
        self.push(value, needs, Op::SliceCols(a, start, len))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let needs = self.needs(a);
        self.push(value, needs, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.iter().map(|x| x * x).sum());
        let needs = self.needs(a);
        self.push(value, needs, Op::SumSquares(a))
    }

    fn accumulate(&mut self, id: NodeId, delta: &Array2<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += delta,
            None => self.nodes[id.0].grad = Some(delta.clone()),
        }
    }

    /// Runs the reverse sweep from a scalar root, accumulating gradients
    /// into every node that (transitively) requires them.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.nodes[root.0].value.dim(), (1, 1), "backward root must be scalar");
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) if self.nodes[i].needs_grad => g.clone(),
                _ => continue,
            };
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    let neg = g.mapv(|x| -x);
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale(a, k) => {
                    let da = g.mapv(|x| x * k);
                    self.accumulate(a, &da);
                }
                Op::AddScalar(a, _) => self.accumulate(a, &g),
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = &g * &y.mapv(|v| v * (1.0 - v));
                    self.accumulate(a, &da);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = &g * &y.mapv(|v| 1.0 - v * v);
                    self.accumulate(a, &da);
                }
                Op::Exp(a) => {
                    let da = &g * &self.nodes[i].value;
                    self.accumulate(a, &da);
                }
                Op::Sqrt(a) => {
                    let da = &g * &self.nodes[i].value.mapv(|y| 0.5 / y);
                    self.accumulate(a, &da);
                }
                Op::Relu(a) => {
                    let da = &g * &self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, &da);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let dp = g.slice(s![.., col..col + w]).to_owned();
                        self.accumulate(p, &dp);
                        col += w;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    da.slice_mut(s![.., start..start + len]).assign(&g);
                    self.accumulate(a, &da);
                }
                Op::Sum(a) => {
                    let da = Array2::from_elem(self.nodes[a.0].value.dim(), g[(0, 0)]);
                    self.accumulate(a, &da);
                }
                Op::SumSquares(a) => {
                    let da = self.nodes[a.0].value.mapv(|v| 2.0 * v * g[(0, 0)]);
                    self.accumulate(a, &da);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Builds a small expression using every op and returns the scalar
    /// loss value; used both directly and through finite differences.
    fn build(theta: &Array2<f64>) -> (Tape, NodeId, NodeId) {
        let mut tape = Tape::new();
        let p = tape.param(theta.clone());
        let c = tape.constant(array![[0.3, -0.7, 1.1]]);
        let m = tape.constant(array![[0.5, -0.2], [0.1, 0.9], [-0.4, 0.3]]);

        let lin = tape.matmul(p, m); // 1x2
        let s = tape.sigmoid(lin);
        let t = tape.tanh(lin);
        let prod = tape.mul(s, t);
        let sc = tape.scale(prod, 1.7);
        let shifted = tape.add_scalar(sc, 0.25);
        let e = tape.exp(shifted);
        let root = tape.sqrt(e);
        let r = tape.relu(lin);
        let cat = tape.concat_cols(&[root, r, p]);
        let slice = tape.slice_cols(cat, 1, 3);
        let target = tape.constant(array![[0.1, 0.2, -0.3]]);
        let diff = tape.sub(slice, target);
        let sq = tape.sum_squares(diff);
        let extra = tape.sum(cat);
        let both = tape.add(sq, extra);
        (tape, p, both)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let theta = array![[0.4, -0.6, 0.9]];
        let (mut tape, p, loss) = build(&theta);
        tape.backward(loss);
        let analytic = tape.grad(p);

        let h = 1e-6;
        for i in 0..3 {
            let mut plus = theta.clone();
            plus[(0, i)] += h;
            let mut minus = theta.clone();
            minus[(0, i)] -= h;
            let (tp, _, lp) = build(&plus);
            let (tm, _, lm) = build(&minus);
            let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
            let rel = (analytic[(0, i)] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-6, "component {i}: analytic {} vs fd {fd}", analytic[(0, i)]);
        }
    }

    #[test]
    fn constants_collect_no_gradient() {
        let theta = array![[0.4, -0.6, 0.9]];
        let (mut tape, _, loss) = build(&theta);
        tape.backward(loss);
        let c = tape.constant(array![[1.0]]);
        assert_eq!(tape.grad(c), array![[0.0]]);
    }
}
