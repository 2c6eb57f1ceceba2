//! Reverse-mode differentiation over [`NumArray`] values.
//!
//! A [`Tape`] records each primitive as it is evaluated. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and the
//! backward pass is a single reverse sweep. Leaves are either parameters
//! (gradients wanted) or constants; gradient work is skipped for any node that
//! has no parameter upstream of it.

use crate::array::NumArray;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking their logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Relu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SoftCrossEntropy { pred: NodeId, targets: NumArray },
}

#[derive(Debug, Clone)]
struct Node {
    value: NumArray,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A leaf whose gradient may be requested.
    pub fn param(&mut self, value: NumArray) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: NumArray) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> Result<&NumArray> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id.0))
    }

    fn push(&mut self, value: NumArray, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    fn record(&mut self, value: NumArray, op: Op, inputs: &[NodeId], what: &str) -> Result<NodeId> {
        value.check_finite(what)?;
        let mut rg = false;
        for &i in inputs {
            rg |= self.node(i)?.requires_grad;
        }
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        self.record(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.add_row_bias(&self.node(bias)?.value)?;
        self.record(v, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.relu();
        self.record(v, Op::Relu(x), &[x], "relu")
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.softmax_rows()?;
        self.record(v, Op::Softmax(x), &[x], "softmax")
    }

    /// Natural log with inputs clamped below at [`LOG_CLAMP`].
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.map(|p| p.max(LOG_CLAMP).ln());
        self.record(v, Op::Log(x), &[x], "log")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.add(&self.node(b)?.value)?;
        self.record(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.sub(&self.node(b)?.value)?;
        self.record(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.mul(&self.node(b)?.value)?;
        self.record(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.node(a)?.value.scale(k);
        self.record(v, Op::Scale(a, k), &[a], "scale")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = NumArray::scalar(self.node(a)?.value.sum());
        self.record(v, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = NumArray::scalar(self.node(a)?.value.mean());
        self.record(v, Op::Mean(a), &[a], "mean")
    }

    /// Mean over rows of `−Σ_z target_z · ln(max(pred_z, 1e-12))`.
    ///
    /// `targets` is held as data, not as a node: soft labels are never
    /// differentiated.
    pub fn cross_entropy_soft(&mut self, pred: NodeId, targets: &NumArray) -> Result<NodeId> {
        let p = &self.node(pred)?.value;
        if p.shape() != targets.shape() || !p.is_matrix() {
            return Err(Error::Shape(format!(
                "cross_entropy_soft: predictions {:?} vs targets {:?}",
                p.shape(),
                targets.shape()
            )));
        }
        let loss = cross_entropy_value(p, targets);
        self.record(
            NumArray::scalar(loss),
            Op::SoftCrossEntropy {
                pred,
                targets: targets.clone(),
            },
            &[pred],
            "cross_entropy_soft",
        )
    }

    /// Gradients of a scalar `loss` with respect to each node in `wrt`.
    ///
    /// Constants and nodes the loss does not depend on get zero gradients.
    pub fn grad(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NumArray>> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "grad: loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        self.vjp(loss, NumArray::full(node.value.shape(), 1.0), wrt)
    }

    /// Vector-Jacobian product: back-propagates `seed` (shaped like
    /// `output`) and returns the resulting gradients for `wrt`.
    pub fn vjp(&self, output: NodeId, seed: NumArray, wrt: &[NodeId]) -> Result<Vec<NumArray>> {
        let out = self.node(output)?;
        for &w in wrt {
            self.node(w)?;
        }
        if seed.shape() != out.value.shape() {
            return Err(Error::Shape(format!(
                "vjp: seed {:?} for output {:?}",
                seed.shape(),
                out.value.shape()
            )));
        }

        let mut grads: Vec<Option<NumArray>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        wrt.iter()
            .map(|&w| {
                let g = grads.get(w.0).and_then(|g| g.clone());
                let g = g.unwrap_or_else(|| NumArray::zeros(self.nodes[w.0].value.shape()));
                g.check_finite("gradient")?;
                Ok(g)
            })
            .collect()
    }

    fn backprop_node(&self, node: &Node, g: &NumArray, grads: &mut [Option<NumArray>]) -> Result<()> {
        let mut send = |id: NodeId, contrib: NumArray| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.accumulate(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if needs(*a) {
                    send(*a, g.matmul_transpose_rhs(bv)?);
                }
                if needs(*b) {
                    send(*b, av.matmul_transpose_lhs(g)?);
                }
            }
            Op::AddBias(x, b) => {
                if needs(*b) {
                    let bshape = self.nodes[b.0].value.shape().to_vec();
                    send(*b, g.sum_rows()?.reshape(&bshape)?);
                }
                send(*x, g.clone());
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                send(*x, g.zip_with(xv, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?);
            }
            Op::Softmax(x) => {
                let s = &node.value;
                let c = s.cols();
                let mut out = vec![0.0; s.len()];
                for ((o, sr), gr) in out
                    .chunks_mut(c)
                    .zip(s.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((oi, si), gi) in o.iter_mut().zip(sr).zip(gr) {
                        *oi = si * (gi - dot);
                    }
                }
                send(*x, NumArray::from_parts(s.shape().to_vec(), out));
            }
            Op::Log(x) => {
                let xv = &self.nodes[x.0].value;
                send(
                    *x,
                    g.zip_with(xv, |gi, xi| if xi > LOG_CLAMP { gi / xi } else { 0.0 })?,
                );
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if needs(*a) {
                    send(*a, g.mul(bv)?);
                }
                if needs(*b) {
                    send(*b, g.mul(av)?);
                }
            }
            Op::Scale(a, k) => send(*a, g.scale(*k)),
            Op::Sum(a) => {
                let shape = self.nodes[a.0].value.shape();
                send(*a, NumArray::full(shape, g.item()));
            }
            Op::Mean(a) => {
                let v = &self.nodes[a.0].value;
                send(*a, NumArray::full(v.shape(), g.item() / v.len() as f64));
            }
            Op::SoftCrossEntropy { pred, targets } => {
                let p = &self.nodes[pred.0].value;
                let k = -g.item() / p.rows() as f64;
                let d = p.zip_with(targets, |pi, ti| {
                    if pi > LOG_CLAMP {
                        k * ti / pi
                    } else {
                        0.0
                    }
                })?;
                send(*pred, d);
            }
        }
        Ok(())
    }
}

/// Soft-label cross-entropy evaluated without a tape.
pub fn cross_entropy_value(pred: &NumArray, targets: &NumArray) -> f64 {
    let c = pred.cols();
    let n = pred.rows();
    let mut total = 0.0;
    for (pr, tr) in pred.data().chunks(c).zip(targets.data().chunks(c)) {
        let mut row = 0.0;
        for (p, t) in pr.iter().zip(tr) {
            row -= t * p.max(LOG_CLAMP).ln();
        }
        total += row;
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(NumArray::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.grad(loss, &[x]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(NumArray::scalar(2.0));
        let c = t.constant(NumArray::scalar(5.0));
        let loss = t.sum(c).unwrap();
        let g = t.grad(loss, &[x, c]).unwrap();
        assert_eq!(g[0].item(), 0.0);
        assert_eq!(g[1].item(), 0.0);
    }

    #[test]
    fn unknown_node_is_an_error() {
        let mut other = Tape::new();
        for _ in 0..5 {
            other.constant(NumArray::scalar(1.0));
        }
        let foreign = other.constant(NumArray::scalar(1.0));
        let mut t = Tape::new();
        let x = t.param(NumArray::scalar(1.0));
        let loss = t.sum(x).unwrap();
        assert!(matches!(t.grad(loss, &[foreign]), Err(Error::UnknownNode(5))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(NumArray::vector(vec![1.0, 2.0]).unwrap());
        assert!(t.grad(x, &[x]).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut t = Tape::new();
        let p = t.constant(NumArray::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let hard = NumArray::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let soft = NumArray::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let l1 = t.cross_entropy_soft(p, &hard).unwrap();
        let l2 = t.cross_entropy_soft(p, &soft).unwrap();
        assert!((t.value(l1).unwrap().item() - 2f64.ln()).abs() < 1e-15);
        assert!((t.value(l2).unwrap().item() - 2f64.ln()).abs() < 1e-15);

        let one_hot = NumArray::matrix(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let p = t.constant(one_hot.clone());
        let l = t.cross_entropy_soft(p, &one_hot).unwrap();
        assert_eq!(t.value(l).unwrap().item(), 0.0);
    }

    #[test]
    fn log_clamp_keeps_loss_finite() {
        let mut t = Tape::new();
        let p = t.param(NumArray::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let target = NumArray::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let l = t.cross_entropy_soft(p, &target).unwrap();
        let v = t.value(l).unwrap().item();
        assert!((v - 0.5 * -(LOG_CLAMP.ln())).abs() < 1e-9);
        let g = t.grad(l, &[p]).unwrap();
        assert_eq!(g[0].data(), &[-0.5, 0.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_t() {
        let mut t = Tape::new();
        let z = t.param(NumArray::matrix(2, 3, vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3]).unwrap());
        let p = t.softmax(z).unwrap();
        let target = NumArray::matrix(2, 3, vec![0.1, 0.8, 0.1, 0.6, 0.2, 0.2]).unwrap();
        let l = t.cross_entropy_soft(p, &target).unwrap();
        let g = t.grad(l, &[z]).unwrap();
        let pv = t.value(p).unwrap();
        for i in 0..6 {
            let expected = (pv.data()[i] - target.data()[i]) / 2.0;
            assert!((g[0].data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.param(NumArray::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.4]).unwrap());
            let w = t.param(NumArray::matrix(2, 2, vec![0.9, 0.1, -0.5, 0.2]).unwrap());
            let h = t.matmul(x, w).unwrap();
            let s = t.softmax(h).unwrap();
            let lg = t.log(s).unwrap();
            let l = t.mean(lg).unwrap();
            let g = t.grad(l, &[x, w]).unwrap();
            (t.value(l).unwrap().item().to_bits(), g)
        };
        assert_eq!(run(), run());
    }
}
