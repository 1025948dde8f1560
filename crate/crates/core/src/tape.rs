//! Reverse-mode differentiation over a small fixed set of primitives.
//!
//! A [`Tape`] records every primitive in execution order, so node ids are a
//! topological order by construction. Values are computed eagerly while
//! recording; [`Tape::gradient`] walks the tape backwards.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    Leaf,
    /// `w · x (+ b)` with `w: [m, n]`, `x: [n]`, `b: [m]`.
    Affine {
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Abs(NodeId),
    Concat(NodeId, NodeId),
    Sum(NodeId),
}

impl<T> Op<T> {
    fn inputs(&self) -> impl Iterator<Item = NodeId> {
        let (a, b, c) = match *self {
            Op::Leaf => (None, None, None),
            Op::Affine { w, x, b } => (Some(w), Some(x), b),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Concat(a, b) => (Some(a), Some(b), None),
            Op::Scale(a, _) | Op::Relu(a) | Op::Abs(a) | Op::Sum(a) => (Some(a), None, None),
        };
        a.into_iter().chain(b).chain(c)
    }
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
}

/// Recorded computation. Leaves may borrow tensors for the lifetime `'a`.
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op<T>, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn push_op(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        let requires_grad = op.inputs().any(|i| self.nodes[i.0].requires_grad);
        self.push(op, Cow::Owned(value), requires_grad)
    }

    /// Differentiable leaf (an input or trainable parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Cow::Owned(value), true)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Cow::Borrowed(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Cow::Borrowed(value), false)
    }

    pub fn affine(&mut self, w: NodeId, x: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let op = Op::Affine { w, x, b };
        let value = self.compute(&op)?;
        Ok(self.push_op(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let op = Op::Add(a, b);
        let value = self.compute(&op)?;
        Ok(self.push_op(op, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let op = Op::Sub(a, b);
        let value = self.compute(&op)?;
        Ok(self.push_op(op, value))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let op = Op::Concat(a, b);
        let value = self.compute(&op)?;
        Ok(self.push_op(op, value))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        self.unary(Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Abs(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sum(a))
    }

    fn unary(&mut self, op: Op<T>) -> NodeId {
        let value = self
            .compute(&op)
            .expect("unary primitives accept any shape");
        self.push_op(op, value)
    }

    fn compute(&self, op: &Op<T>) -> Result<Tensor<T>> {
        compute_op(op, |id| &self.nodes[id.0].value)
    }

    /// Recomputes every non-leaf value from the leaves in recorded order.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.as_ref().clone(),
                ref op => compute_op(op, |id| &values[id.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Sign of every ReLU/abs argument, in tape order: -1, 0 or +1.
    ///
    /// Two evaluations with equal patterns lie in the same linear piece.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|v| {
                    if *v > T::zero() {
                        1
                    } else if *v < T::zero() {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }

    /// Reverse-mode gradient of the scalar node `output`, seeded with `seed`.
    pub fn gradient(&self, output: NodeId, seed: T) -> Result<Gradients<T>> {
        self.gradient_multi(&[(output, seed)])
    }

    /// Gradient of `Σ seed_k · output_k` over several scalar outputs.
    pub fn gradient_multi(&self, seeds: &[(NodeId, T)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for &(out, seed) in seeds {
            let node = self
                .nodes
                .get(out.0)
                .ok_or_else(|| Error::Contract(format!("node {} is not on this tape", out.0)))?;
            if !node.value.is_scalar() {
                return Err(Error::Contract(format!(
                    "gradient requires a scalar output, node {} has shape {:?}",
                    out.0,
                    node.value.shape()
                )));
            }
            let g = grads[out.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
            g.data_mut()[0] = g.data()[0] + seed;
            last = last.max(out.0);
        }

        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(&node.op, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        op: &Op<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| -> &Tensor<T> { &self.nodes[id.0].value };
        match *op {
            Op::Leaf => {}
            Op::Affine { w, x, b } => {
                let wv = val(w);
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                let gd = g.data();
                if wants(x) {
                    let gx = slot(grads, x, &[n]).data_mut();
                    for (i, row) in wv.data().chunks_exact(n).enumerate() {
                        let gi = gd[i];
                        if gi == T::zero() {
                            continue;
                        }
                        for (acc, &wij) in gx.iter_mut().zip(row) {
                            *acc = *acc + wij * gi;
                        }
                    }
                }
                if wants(w) {
                    let xd = val(x).data();
                    let gw = slot(grads, w, &[m, n]).data_mut();
                    for (row, &gi) in gw.chunks_exact_mut(n).zip(gd) {
                        if gi == T::zero() {
                            continue;
                        }
                        for (acc, &xj) in row.iter_mut().zip(xd) {
                            *acc = *acc + gi * xj;
                        }
                    }
                }
                if let Some(b) = b {
                    if wants(b) {
                        slot(grads, b, &[m]).add_assign(g);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    slot(grads, a, g.shape()).add_assign(g);
                }
                if wants(b) {
                    slot(grads, b, g.shape()).add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    slot(grads, a, g.shape()).add_assign(g);
                }
                if wants(b) {
                    let gb = slot(grads, b, g.shape()).data_mut();
                    for (acc, &v) in gb.iter_mut().zip(g.data()) {
                        *acc = *acc - v;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    let ga = slot(grads, a, g.shape()).data_mut();
                    for (acc, &v) in ga.iter_mut().zip(g.data()) {
                        *acc = *acc + v * c;
                    }
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    let input = val(a).data();
                    let ga = slot(grads, a, g.shape()).data_mut();
                    for ((acc, &v), &x) in ga.iter_mut().zip(g.data()).zip(input) {
                        // subgradient 0 at the kink
                        if x > T::zero() {
                            *acc = *acc + v;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                if wants(a) {
                    let input = val(a).data();
                    let ga = slot(grads, a, g.shape()).data_mut();
                    for ((acc, &v), &x) in ga.iter_mut().zip(g.data()).zip(input) {
                        if x > T::zero() {
                            *acc = *acc + v;
                        } else if x < T::zero() {
                            *acc = *acc - v;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let na = val(a).len();
                let (left, right) = g.data().split_at(na);
                if wants(a) {
                    let ga = slot(grads, a, &[na]).data_mut();
                    for (acc, &v) in ga.iter_mut().zip(left) {
                        *acc = *acc + v;
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, &[right.len()]).data_mut();
                    for (acc, &v) in gb.iter_mut().zip(right) {
                        *acc = *acc + v;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let s = g.data()[0];
                    let shape = val(a).shape().to_vec();
                    for acc in slot(grads, a, &shape).data_mut() {
                        *acc = *acc + s;
                    }
                }
            }
        }
    }
}

fn slot<'g, T: Scalar>(
    grads: &'g mut [Option<Tensor<T>>],
    id: NodeId,
    shape: &[usize],
) -> &'g mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, context: &'static str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        })
    }
}

fn compute_op<'v, T: Scalar>(
    op: &Op<T>,
    value: impl Fn(NodeId) -> &'v Tensor<T>,
) -> Result<Tensor<T>> {
    let out = match *op {
        Op::Leaf => return Err(Error::Contract("leaves have no forward rule".into())),
        Op::Affine { w, x, b } => {
            let (wv, xv) = (value(w), value(x));
            if wv.rank() != 2 {
                return Err(Error::Shape {
                    context: "affine weight",
                    expected: vec![0, 0],
                    actual: wv.shape().to_vec(),
                });
            }
            let (m, n) = (wv.shape()[0], wv.shape()[1]);
            xv.expect_vector(n, "affine input")?;
            let xd = xv.data();
            let mut out: Vec<T> = wv
                .data()
                .chunks_exact(n.max(1))
                .take(m)
                .map(|row| {
                    row.iter()
                        .zip(xd)
                        .fold(T::zero(), |acc, (&wij, &xj)| acc + wij * xj)
                })
                .collect();
            out.resize(m, T::zero());
            if let Some(b) = b {
                let bv = value(b);
                bv.expect_vector(m, "affine bias")?;
                for (o, &bi) in out.iter_mut().zip(bv.data()) {
                    *o = *o + bi;
                }
            }
            Tensor::from_parts(vec![m], out)
        }
        Op::Add(a, b) => {
            let (av, bv) = (value(a), value(b));
            same_shape(av, bv, "add")?;
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        }
        Op::Sub(a, b) => {
            let (av, bv) = (value(a), value(b));
            same_shape(av, bv, "sub")?;
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        }
        Op::Scale(a, c) => value(a).map(|v| v * c),
        Op::Relu(a) => value(a).map(|v| if v > T::zero() { v } else { T::zero() }),
        Op::Abs(a) => value(a).map(|v| v.abs()),
        Op::Concat(a, b) => {
            let (av, bv) = (value(a), value(b));
            if av.rank() != 1 || bv.rank() != 1 {
                return Err(Error::Shape {
                    context: "concat expects vectors",
                    expected: vec![av.len(), bv.len()],
                    actual: [av.shape(), bv.shape()].concat(),
                });
            }
            let mut data = Vec::with_capacity(av.len() + bv.len());
            data.extend_from_slice(av.data());
            data.extend_from_slice(bv.data());
            Tensor::from_parts(vec![data.len()], data)
        }
        Op::Sum(a) => {
            let s = value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
            Tensor::from_parts(vec![], vec![s])
        }
    };
    Ok(out)
}

/// Result of a backward pass; one optional gradient per tape node.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`, or `None` when no differentiable path reaches it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Gradient for `id`, materialising zeros when unreached.
    pub fn wrt_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.wrt(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f32]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn affine_forward_and_backward() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let b = tape.leaf(v(&[1.0, 1.0]));
        let x = tape.leaf(v(&[1.0, 1.0]));
        let y = tape.affine(w, x, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);

        let s = tape.sum(y);
        let g = tape.gradient(s, 1.0).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_is_zero_at_kink() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(v(&[-1.0, 0.0, 3.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = tape.sum(r);
        let g = tape.gradient(s, 1.0).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn abs_and_concat() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(v(&[1.0, -2.0]));
        let a = tape.abs(x);
        let c = tape.concat(x, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, -2.0, 1.0, 2.0]);
        let s = tape.sum(c);
        let g = tape.gradient(s, 1.0).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_contract_violation() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(v(&[1.0, 2.0]));
        let err = tape.gradient(x, 1.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let x = tape.leaf(v(&[1.0, 2.0]));
        assert!(matches!(tape.affine(w, x, None), Err(Error::Shape { .. })));
        let y = tape.leaf(v(&[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(x, y), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(Tensor::matrix(1, 2, vec![3.0, 2.0]).unwrap());
        let x = tape.leaf(v(&[5.0, 7.0]));
        let y = tape.affine(w, x, None).unwrap();
        let g = tape.gradient(y, 1.0).unwrap();
        assert!(g.wrt(w).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn seeded_multi_output_gradient_is_linear() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(v(&[1.5, -0.5]));
        let f = tape.sum(x);
        let sx = tape.scale(x, 3.0);
        let r = tape.relu(sx);
        let h = tape.sum(r);
        let g = tape.gradient_multi(&[(f, 2.0), (h, -1.0)]).unwrap();
        // 2·(1,1) − (3,0)
        assert_eq!(g.wrt(x).unwrap().data(), &[-1.0, 2.0]);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::matrix(2, 3, vec![0.1, -0.7, 0.3, 1.1, 0.25, -2.0]).unwrap());
        let x = tape.leaf(v(&[0.3, 0.9, -1.7]));
        let y = tape.affine(w, x, None).unwrap();
        let r = tape.relu(y);
        let a = tape.abs(y);
        let c = tape.concat(r, a).unwrap();
        let _ = tape.sum(c);
        let replayed = tape.replay().unwrap();
        for (i, val) in replayed.iter().enumerate() {
            assert_eq!(val, tape.value(NodeId(i)));
        }
    }
}
