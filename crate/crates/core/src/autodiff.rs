//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every node caches its forward
//! value at creation time, and parents always precede children, so a single
//! reverse sweep over the node list is a valid topological order for
//! [`Graph::backward`]. Graphs are meant to be rebuilt per minibatch.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Caller-chosen key identifying a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Operation recorded on the tape, with its parent node ids.
///
/// Elementwise binary ops accept equal shapes, or one single-element operand
/// which is broadcast against the other.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a * b^T`, used for `x W^T` with weights stored as `out x in`.
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Matrix plus a row vector added to every row.
    AddRow(NodeId, NodeId),
    /// Elementwise clamp; gradient passes only where the input is in range.
    Clamp(NodeId, f64, f64),
}

impl Op {
    fn parents(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Input | Param(_) => [None, None],
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => {
                [Some(a), Some(b)]
            }
            Scale(a, _) | Tanh(a) | Exp(a) | Log(a) | Square(a) | Sum(a) | Mean(a)
            | Clamp(a, _, _) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, NodeId>,
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

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.input(Tensor::scalar(value))
    }

    /// Registers a trainable leaf. Each id may be registered once per graph.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("parameter {id:?} registered twice")));
        }
        let node = self.push(Op::Param(id), value, true);
        self.params.insert(id, node);
        Ok(node)
    }

    /// Evaluates `op` on cached parent values and appends the result.
    pub fn apply(&mut self, op: Op) -> Result<NodeId> {
        for p in op.parents().into_iter().flatten() {
            if p.0 >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!("unknown node {p:?}")));
            }
        }
        let value = self.eval(&op)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("forward value of {op:?}")));
        }
        let requires_grad =
            op.parents().into_iter().flatten().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul(a, b))
    }
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMulBt(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(a, c))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh(a))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log(a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Square(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean(a))
    }
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Op::AddRow(m, row))
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::Clamp(a, lo, hi))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        use Op::*;
        let v = |id: NodeId| &self.nodes[id.0].value;
        match *op {
            Input | Param(_) => Err(Error::InvalidArgument("leaves are created with input/param".into())),
            MatMul(a, b) => {
                dims2(v(a))?;
                dims2(v(b))?;
                v(a).matmul(v(b))
            }
            MatMulBt(a, b) => {
                let (a, b) = (v(a), v(b));
                let (m, k) = dims2(a)?;
                let (n, k2) = dims2(b)?;
                if k != k2 {
                    return Err(Error::Shape(format!(
                        "matmul_bt inner dimensions differ: {m}x{k} * ({n}x{k2})^T"
                    )));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k), &mut out, 0.0);
                Ok(Tensor::from_parts(vec![m, n], out))
            }
            Add(a, b) => broadcast_zip(v(a), v(b), |x, y| x + y),
            Sub(a, b) => broadcast_zip(v(a), v(b), |x, y| x - y),
            Mul(a, b) => broadcast_zip(v(a), v(b), |x, y| x * y),
            Scale(a, c) => Ok(v(a).map(|x| c * x)),
            Tanh(a) => Ok(v(a).map(f64::tanh)),
            Exp(a) => Ok(v(a).map(f64::exp)),
            Log(a) => {
                if let Some(bad) = v(a).data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                Ok(v(a).map(f64::ln))
            }
            Square(a) => Ok(v(a).map(|x| x * x)),
            Sum(a) => Ok(Tensor::scalar(v(a).sum())),
            Mean(a) => Ok(Tensor::scalar(v(a).mean())),
            AddRow(m, row) => {
                let (m, row) = (v(m), v(row));
                let (r, c) = dims2(m)?;
                if row.numel() != c || (row.shape().len() == 2 && row.shape()[0] != 1) {
                    return Err(Error::Shape(format!(
                        "row vector {:?} cannot be added to {r}x{c} matrix",
                        row.shape()
                    )));
                }
                let mut out = m.data().to_vec();
                for chunk in out.chunks_exact_mut(c) {
                    chunk.iter_mut().zip(row.data()).for_each(|(o, b)| *o += b);
                }
                Ok(Tensor::from_parts(vec![r, c], out))
            }
            Clamp(a, lo, hi) => {
                if !(lo <= hi) {
                    return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
                }
                Ok(v(a).map(|x| x.clamp(lo, hi)))
            }
        }
    }

    /// Reverse sweep from a scalar root. Every registered parameter gets an
    /// entry, zero when the root does not depend on it.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar_like() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut out = GradientMap::default();
        for (&pid, &nid) in &self.params {
            let grad = grads
                .get_mut(nid.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.nodes[nid.0].value.shape()));
            out.insert(pid, grad);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        use Op::*;
        let v = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match node.op {
            Input | Param(_) => {}
            MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                if wants(a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), &mut da, 0.0);
                    accumulate(grads, a, Tensor::from_parts(vec![m, k], da));
                }
                if wants(b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
                    accumulate(grads, b, Tensor::from_parts(vec![k, n], db));
                }
            }
            MatMulBt(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k) = av.dims2();
                let n = bv.rows();
                if wants(a) {
                    // dA = G B
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), bv.data(), (k, 1), &mut da, 0.0);
                    accumulate(grads, a, Tensor::from_parts(vec![m, k], da));
                }
                if wants(b) {
                    // dB = G^T A
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (1, n), av.data(), (k, 1), &mut db, 0.0);
                    accumulate(grads, b, Tensor::from_parts(vec![n, k], db));
                }
            }
            Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, reduce_to(g.clone(), v(a)));
                }
                if wants(b) {
                    accumulate(grads, b, reduce_to(g.clone(), v(b)));
                }
            }
            Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, reduce_to(g.clone(), v(a)));
                }
                if wants(b) {
                    accumulate(grads, b, reduce_to(g.map(|x| -x), v(b)));
                }
            }
            Mul(a, b) => {
                if wants(a) {
                    let ga = broadcast_zip(g, v(b), |x, y| x * y)?;
                    accumulate(grads, a, reduce_to(ga, v(a)));
                }
                if wants(b) {
                    let gb = broadcast_zip(g, v(a), |x, y| x * y)?;
                    accumulate(grads, b, reduce_to(gb, v(b)));
                }
            }
            Scale(a, c) => accumulate(grads, a, g.map(|x| c * x)),
            Tanh(a) => accumulate(grads, a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?),
            Exp(a) => accumulate(grads, a, g.zip_map(&node.value, |gi, y| gi * y)?),
            Log(a) => accumulate(grads, a, g.zip_map(v(a), |gi, x| gi / x)?),
            Square(a) => accumulate(grads, a, g.zip_map(v(a), |gi, x| 2.0 * x * gi)?),
            Sum(a) => {
                let gi = g.item();
                accumulate(grads, a, Tensor::full(v(a).shape(), gi));
            }
            Mean(a) => {
                let av = v(a);
                let gi = g.item() / av.numel() as f64;
                accumulate(grads, a, Tensor::full(av.shape(), gi));
            }
            AddRow(m, row) => {
                if wants(m) {
                    accumulate(grads, m, g.clone());
                }
                if wants(row) {
                    let sums: Vec<f64> =
                        g.col_means().into_iter().map(|c| c * g.rows() as f64).collect();
                    accumulate(grads, row, Tensor::from_parts(v(row).shape().to_vec(), sums));
                }
            }
            Clamp(a, lo, hi) => accumulate(
                grads,
                a,
                g.zip_map(v(a), |gi, x| if (lo..=hi).contains(&x) { gi } else { 0.0 })?,
            ),
        }
        Ok(())
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    if b.is_scalar_like() {
        let s = b.item();
        return Ok(a.map(|x| f(x, s)));
    }
    if a.is_scalar_like() {
        let s = a.item();
        return Ok(b.map(|y| f(s, y)));
    }
    Err(Error::Shape(format!(
        "elementwise op on {:?} and {:?}",
        a.shape(),
        b.shape()
    )))
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Central-difference gradient of a black-box scalar loss.
///
/// Parameter `i` of `params` is reported under `ParamId(i)`.
pub fn finite_difference_grad<F>(mut loss: F, params: &[Tensor], h: f64) -> Result<GradientMap>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let mut probe = params.to_vec();
    let mut out = GradientMap::default();
    for (pi, p) in params.iter().enumerate() {
        let mut grad = vec![0.0; p.numel()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = orig + h;
            let plus = loss(&probe)?;
            probe[pi].data_mut()[j] = orig - h;
            let minus = loss(&probe)?;
            probe[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at probe of parameter {pi}, coordinate {j}"
                )));
            }
            *slot = (plus - minus) / (2.0 * h);
        }
        out.insert(ParamId(pi), Tensor::from_parts(p.shape().to_vec(), grad));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_of_ones_forward() {
        let mut g = Graph::new();
        let a = g.input(Tensor::ones(&[2, 3]));
        let b = g.input(Tensor::ones(&[3, 1]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn log_of_zero_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::new(vec![4], vec![1., -2., 3., 0.5]).unwrap()).unwrap();
        let m = g.mean(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::ones(&[2, 2])).unwrap();
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.input(Tensor::ones(&[2, 3]));
        let b = g.input(Tensor::ones(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let c = g.input(Tensor::ones(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
        let row = g.input(Tensor::ones(&[2]));
        assert!(matches!(g.add_row(a, row), Err(Error::Shape(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient_and_inputs_get_none() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::scalar(2.0)).unwrap();
        g.param(ParamId(7), Tensor::ones(&[2, 2])).unwrap();
        let c = g.input(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(ParamId(0)).unwrap().item(), 5.0);
        assert_eq!(grads.get(ParamId(7)).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut g = Graph::new();
        g.param(ParamId(1), Tensor::scalar(1.0)).unwrap();
        assert!(g.param(ParamId(1), Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::new(vec![3], vec![-30.0, 0.0, 9.0]).unwrap()).unwrap();
        let c = g.clamp(x, -20.0, 5.0).unwrap();
        assert_eq!(g.value(c).data(), &[-20.0, 0.0, 5.0]);
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let p = [Tensor::scalar(3.0)];
        let grads = finite_difference_grad(|p| Ok(p[0].item().powi(2)), &p, 1e-5).unwrap();
        assert!((grads.get(ParamId(0)).unwrap().item() - 6.0).abs() < 1e-7);
    }

    #[test]
    fn finite_difference_of_constant_is_zero() {
        let p = [Tensor::ones(&[2, 3]), Tensor::scalar(1.0)];
        let grads = finite_difference_grad(|_| Ok(4.2), &p, 1e-5).unwrap();
        for (_, g) in grads.iter() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn finite_difference_rejects_bad_inputs() {
        let p = [Tensor::scalar(1.0)];
        assert!(finite_difference_grad(|_| Ok(0.0), &p, 0.0).is_err());
        assert!(finite_difference_grad(|_| Ok(f64::NAN), &p, 1e-5).is_err());
    }
}
