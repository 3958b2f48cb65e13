use std::collections::BTreeMap;

use super::ops::{self, Saved};
use super::Primitive;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Identifier of a learnable parameter in a model's parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Origin {
    Constant,
    Param(ParamId),
    Apply {
        prim: Primitive,
        inputs: Vec<Var>,
        saved: Saved,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    origin: Origin,
}

/// Ordered record of primitive applications. Nodes can only reference
/// earlier nodes, so insertion order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Reverse-mode gradients keyed by parameter. A parameter registered more
/// than once accumulates the contributions of every registration.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor4>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor4> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor4)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Sum of squares over every gradient entry.
    pub fn squared_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.by_param.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
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

    fn push(&mut self, value: Tensor4, origin: Origin) -> Var {
        self.nodes.push(Node { value, origin });
        Var(self.nodes.len() - 1)
    }

    /// Record a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Origin::Constant)
    }

    /// Record a learnable parameter value.
    pub fn param(&mut self, id: ParamId, value: Tensor4) -> Var {
        self.push(value, Origin::Param(id))
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    /// Saved forward statistics of a node, e.g. batch-norm batch mean/var.
    pub fn saved(&self, v: Var) -> Option<&Saved> {
        match &self.nodes.get(v.0)?.origin {
            Origin::Apply { saved, .. } => Some(saved),
            _ => None,
        }
    }

    /// Evaluate `prim` on recorded inputs and record the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(v.0));
            }
        }
        let (value, saved) = {
            let vals: Vec<&Tensor4> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            ops::forward(&prim, &vals)?
        };
        Ok(self.push(
            value,
            Origin::Apply {
                prim,
                inputs: inputs.to_vec(),
                saved,
            },
        ))
    }

    /// Re-run every recorded primitive and check the outputs match bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if let Origin::Apply { prim, inputs, .. } = &node.origin {
                let vals: Vec<&Tensor4> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let (again, _) = ops::forward(prim, &vals)?;
                if again.shape() != node.value.shape()
                    || again
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every parameter that reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or(Error::UnknownNode(loss.0))?;
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape()));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::filled(node.value.shape(), 1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.origin {
                Origin::Constant => {}
                Origin::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => acc.axpy(1.0, &g),
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Origin::Apply {
                    prim,
                    inputs,
                    saved,
                } => {
                    let vals: Vec<&Tensor4> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let input_grads = ops::backward(prim, &vals, &node.value, saved, &g)?;
                    for (v, gi) in inputs.iter().zip(input_grads) {
                        let Some(gi) = gi else { continue };
                        if !self.needs_grad(*v) {
                            continue;
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.axpy(1.0, &gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].origin, Origin::Constant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor4::row(&[-1.0, 2.0]));
        let r = tape.apply(Primitive::Relu, &[x]).unwrap();
        let s = tape.apply(Primitive::Sum, &[r]).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(3), Tensor4::scalar(0.0));
        let s = tape.apply(Primitive::Sigmoid, &[x]).unwrap();
        let l = tape.apply(Primitive::Sum, &[s]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(ParamId(3)).unwrap().data(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor4::row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        assert!(matches!(tape.backward(Var(99)), Err(Error::UnknownNode(99))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), Tensor4::scalar(3.0));
        let b = tape.param(ParamId(0), Tensor4::scalar(3.0));
        let p = tape.apply(Primitive::Multiply, &[a, b]).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn replay_reproduces_outputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor4::from_fn([1, 2, 4, 4], |[_, c, y, x]| (c as f64 - 0.5) * (y as f64 - x as f64)));
        let d = tape
            .apply(
                Primitive::Dropout {
                    rate: 0.5,
                    mode: super::super::Mode::Train,
                    seed: 4,
                },
                &[x],
            )
            .unwrap();
        let s = tape.apply(Primitive::Sigmoid, &[d]).unwrap();
        tape.apply(Primitive::Sum, &[s]).unwrap();
        assert!(tape.replay_matches().unwrap());
    }
}
