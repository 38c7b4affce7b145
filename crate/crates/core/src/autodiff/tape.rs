//! Tape-based reverse-mode differentiation.
//!
//! Forward code pushes one node per operation onto a [`Tape`]. Each node
//! keeps its output value, its input node ids and an optional [`Backward`]
//! implementation that owns whatever context the gradient needs (for example
//! the exact noise draw of a stochastic activation). Because nodes can only
//! reference earlier nodes, the tape is topologically ordered by construction
//! and [`Tape::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Gradient rule of one recorded operation.
pub trait Backward<T>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input. `needs[i]` is false when
    /// input `i` does not lead to a trainable parameter; returning `None`
    /// for it is allowed.
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

#[derive(Clone)]
struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    op: Option<Arc<dyn Backward<T>>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, usize>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            param: None,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter. Repeated calls for the same parameter
    /// return the same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_leaves.get(&id) {
            return NodeId(n);
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            inputs: Vec::new(),
            op: None,
            param: Some(id),
            requires_grad: p.trainable,
        });
        let n = self.nodes.len() - 1;
        self.param_leaves.insert(id, n);
        NodeId(n)
    }

    pub fn push(&mut self, op: impl Backward<T> + 'static, inputs: &[NodeId], value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|i| i.0).collect(),
            op: Some(Arc::new(op)),
            param: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Propagates `seed` from `root` back to every parameter leaf and adds
    /// the results into `store`. A tape can be consumed only once.
    pub fn backward(&mut self, root: NodeId, seed: &Tensor<T>, store: &mut ParamStore<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::usage("tape has already been consumed by backward"));
        }
        let root_shape = self.nodes[root.0].value.shape();
        if seed.shape() != root_shape {
            return Err(Error::shape(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.shape(),
                root_shape
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.clone());
        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                store.accumulate(pid, &grad)?;
                continue;
            }
            let Some(op) = &node.op else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = op.backward(&grad, &inputs, &node.value, &needs)?;
            for ((&j, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                if g.shape() != self.nodes[j].value.shape() {
                    return Err(Error::shape(format!(
                        "{} produced gradient {:?} for input {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[j].value.shape()
                    )));
                }
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Element-wise and algebraic operations recorded on a tape.
pub mod ops {
    use super::*;

    macro_rules! same_shape {
        ($a:expr, $b:expr, $what:expr) => {
            if $a.shape() != $b.shape() {
                return Err(Error::shape(format!(
                    "{}: shapes {:?} and {:?} differ",
                    $what,
                    $a.shape(),
                    $b.shape()
                )));
            }
        };
    }

    #[derive(Clone, Copy)]
    enum BinKind {
        Add,
        Sub,
        Mul,
        Div,
    }

    struct Binary(BinKind);

    impl<T: Scalar> Backward<T> for Binary {
        fn name(&self) -> &'static str {
            "binary"
        }

        fn backward(
            &self,
            grad: &Tensor<T>,
            inputs: &[&Tensor<T>],
            _output: &Tensor<T>,
            needs: &[bool],
        ) -> Result<Vec<Option<Tensor<T>>>> {
            let (a, b) = (inputs[0], inputs[1]);
            let zip = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
                let d = grad.data().iter().zip(x.data()).map(|(&g, &v)| f(g, v)).collect();
                Tensor::from_parts(grad.shape().to_vec(), d)
            };
            let (ga, gb) = match self.0 {
                BinKind::Add => (grad.clone(), grad.clone()),
                BinKind::Sub => (grad.clone(), grad.map(|g| -g)),
                BinKind::Mul => (zip(b, &|g, v| g * v), zip(a, &|g, v| g * v)),
                BinKind::Div => {
                    let ga = zip(b, &|g, v| g / v);
                    let gb = Tensor::from_parts(
                        grad.shape().to_vec(),
                        grad.data()
                            .iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect(),
                    );
                    (ga, gb)
                }
            };
            Ok(vec![needs[0].then_some(ga), needs[1].then_some(gb)])
        }
    }

    fn binary<T: Scalar>(tape: &mut Tape<T>, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (tape.value(a), tape.value(b));
        same_shape!(va, vb, "binary op");
        let value = match kind {
            BinKind::Add => va.add(vb)?,
            BinKind::Sub => va.sub(vb)?,
            BinKind::Mul => va.mul(vb)?,
            BinKind::Div => va.div(vb)?,
        };
        Ok(tape.push(Binary(kind), &[a, b], value))
    }

    pub fn add<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        binary(tape, BinKind::Add, a, b)
    }

    pub fn sub<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        binary(tape, BinKind::Sub, a, b)
    }

    pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        binary(tape, BinKind::Mul, a, b)
    }

    pub fn div<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        binary(tape, BinKind::Div, a, b)
    }

    struct Unary {
        name: &'static str,
        deriv: fn(x: f64, y: f64) -> f64,
    }

    impl<T: Scalar> Backward<T> for Unary {
        fn name(&self) -> &'static str {
            self.name
        }

        fn backward(
            &self,
            grad: &Tensor<T>,
            inputs: &[&Tensor<T>],
            output: &Tensor<T>,
            _needs: &[bool],
        ) -> Result<Vec<Option<Tensor<T>>>> {
            let d = grad
                .data()
                .iter()
                .zip(inputs[0].data().iter().zip(output.data()))
                .map(|(&g, (&x, &y))| g * T::of((self.deriv)(x.f64(), y.f64())))
                .collect();
            Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), d))])
        }
    }

    pub fn exp<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> Result<NodeId> {
        let v = Tensor::elementwise(crate::tensor::Elementwise::Exp, tape.value(a), None)?;
        Ok(tape.push(
            Unary {
                name: "exp",
                deriv: |_, y| y,
            },
            &[a],
            v,
        ))
    }

    pub fn neg<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> Result<NodeId> {
        let v = tape.value(a).map(|x| -x);
        Ok(tape.push(
            Unary {
                name: "neg",
                deriv: |_, _| -1.0,
            },
            &[a],
            v,
        ))
    }

    pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> Result<NodeId> {
        let v = tape.value(a).map(crate::tensor::sigmoid);
        Ok(tape.push(
            Unary {
                name: "sigmoid",
                deriv: |_, y| y * (1.0 - y),
            },
            &[a],
            v,
        ))
    }

    struct SumAll;

    impl<T: Scalar> Backward<T> for SumAll {
        fn name(&self) -> &'static str {
            "sum"
        }

        fn backward(
            &self,
            grad: &Tensor<T>,
            inputs: &[&Tensor<T>],
            _output: &Tensor<T>,
            _needs: &[bool],
        ) -> Result<Vec<Option<Tensor<T>>>> {
            Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.item()))])
        }
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> NodeId {
        let v = Tensor::scalar(tape.value(a).sum_all());
        tape.push(SumAll, &[a], v)
    }

    struct Weighted(Tensor<f64>);

    impl<T: Scalar> Backward<T> for Weighted {
        fn name(&self) -> &'static str {
            "weighted_sum"
        }

        fn backward(
            &self,
            grad: &Tensor<T>,
            inputs: &[&Tensor<T>],
            _output: &Tensor<T>,
            _needs: &[bool],
        ) -> Result<Vec<Option<Tensor<T>>>> {
            let g = grad.item();
            let d = self.0.data().iter().map(|&w| g * T::of(w)).collect();
            Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))])
        }
    }

    /// `sum(a * weights)` with constant weights; a generic scalar probe for
    /// gradient checks.
    pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, a: NodeId, weights: &Tensor<f64>) -> Result<NodeId> {
        let va = tape.value(a);
        same_shape!(va, weights, "weighted_sum");
        let s = va
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&x, &w)| acc + x * T::of(w));
        Ok(tape.push(Weighted(weights.clone()), &[a], Tensor::scalar(s)))
    }

    struct MatMul;

    impl<T: Scalar> Backward<T> for MatMul {
        fn name(&self) -> &'static str {
            "matmul"
        }

        fn backward(
            &self,
            grad: &Tensor<T>,
            inputs: &[&Tensor<T>],
            _output: &Tensor<T>,
            needs: &[bool],
        ) -> Result<Vec<Option<Tensor<T>>>> {
            let ga = if needs[0] {
                Some(grad.matmul(&inputs[1].t()?)?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(inputs[0].t()?.matmul(grad)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
    }

    pub fn matmul<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tape.value(a).matmul(tape.value(b))?;
        Ok(tape.push(MatMul, &[a, b], v))
    }

    struct Reshape;

    impl<T: Scalar> Backward<T> for Reshape {
        fn name(&self) -> &'static str {
            "reshape"
        }

        fn backward(
            &self,
            grad: &Tensor<T>,
            inputs: &[&Tensor<T>],
            _output: &Tensor<T>,
            _needs: &[bool],
        ) -> Result<Vec<Option<Tensor<T>>>> {
            Ok(vec![Some(grad.clone().reshape(inputs[0].shape())?)])
        }
    }

    pub fn reshape<T: Scalar>(tape: &mut Tape<T>, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = tape.value(a).clone().reshape(shape)?;
        Ok(tape.push(Reshape, &[a], v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_two_w() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(vec![3.0]), true);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let y = ops::mul(&mut tape, wn, wn).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
        tape.backward(y, &Tensor::from_vec(vec![1.0]), &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[6.0]);
    }

    #[test]
    fn second_backward_is_usage_error() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(2.0), true);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let y = ops::exp(&mut tape, wn).unwrap();
        let seed = Tensor::scalar(1.0);
        tape.backward(y, &seed, &mut store).unwrap();
        assert!(matches!(tape.backward(y, &seed, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn seed_shape_must_match() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]), true);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let err = tape.backward(wn, &Tensor::scalar(1.0), &mut store).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn gradients_accumulate_until_cleared() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(vec![1.5, -2.0]), true);
        for round in 1..=2 {
            let mut tape = Tape::new();
            let wn = tape.param(&store, w);
            let s = ops::sum(&mut tape, wn);
            tape.backward(s, &Tensor::scalar(1.0), &mut store).unwrap();
            assert_eq!(store.grad(w).data(), &[round as f64, round as f64]);
        }
        store.zero_grad();
        assert_eq!(store.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_params_receive_nothing() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_vec(vec![2.0]), false);
        let b = store.add("b", Tensor::from_vec(vec![5.0]), true);
        let mut tape = Tape::new();
        let (an, bn) = (tape.param(&store, a), tape.param(&store, b));
        let y = ops::mul(&mut tape, an, bn).unwrap();
        tape.backward(y, &Tensor::from_vec(vec![1.0]), &mut store).unwrap();
        assert_eq!(store.grad(a).data(), &[0.0]);
        assert_eq!(store.grad(b).data(), &[2.0]);
    }
}
