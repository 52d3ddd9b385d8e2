//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Ops are
//! appended in execution order, so the node list is already topologically
//! sorted and [`Graph::backward`] simply walks it in reverse.

use crate::error::{Error, Result};
use crate::losses;
use crate::ops::{self, ConvParams};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        params: ConvParams,
    },
    Relu {
        input: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Sum {
        inputs: Vec<Var>,
    },
    Scale {
        input: Var,
        factor: T,
    },
    SumAll {
        input: Var,
    },
    MultilabelNll {
        logits: Var,
        targets: Tensor<T>,
    },
    SoftmaxNll {
        logits: Var,
        labels: Vec<u8>,
        valid: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Sum { .. } => "elementwise_sum",
            Op::Scale { .. } => "scale",
            Op::SumAll { .. } => "sum_all",
            Op::MultilabelNll { .. } => "multilabel_nll",
            Op::SoftmaxNll { .. } => "softmax_nll",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Single-owner tape of one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "{} produced a non-finite value (output shape {})",
                op.name(),
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        params: ConvParams,
    ) -> Result<Var> {
        let out = ops::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            params,
        )?;
        self.push(
            out,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu_forward(self.value(input));
        self.push(out, &[input], Op::Relu { input })
    }

    pub fn maxpool2d(
        &mut self,
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(input), kernel, stride, padding)?;
        self.push(out, &[input], Op::MaxPool2d { input, argmax })
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_nearest_forward(self.value(input), factor)?;
        self.push(out, &[input], Op::Upsample { input, factor })
    }

    pub fn elementwise_sum(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::sum_forward(&values)?;
        self.push(
            out,
            inputs,
            Op::Sum {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::from_vec(src.shape(), data)?;
        self.push(out, &[input], Op::Scale { input, factor })
    }

    /// Reduces to a scalar by summing every element.
    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.value(input).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), &[input], Op::SumAll { input })
    }

    /// Mean binary logistic loss of `logits` against 0/1 `targets` of the same shape.
    pub fn multilabel_nll(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let loss = losses::multilabel_nll_value(self.value(logits), &targets)?;
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::MultilabelNll { logits, targets },
        )
    }

    /// Mean softmax cross-entropy over non-ignore pixels.
    ///
    /// `labels` holds one class index per `(n, h, w)` position of `logits`,
    /// with [`crate::gt::IGNORE`] marking unsupervised pixels.
    pub fn softmax_nll(&mut self, logits: Var, labels: Vec<u8>) -> Result<Var> {
        let (loss, valid) = losses::softmax_nll_value(self.value(logits), &labels)?;
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxNll {
                logits,
                labels,
                valid,
            },
        )
    }

    /// Number of supervised pixels seen by a `softmax_nll` node.
    pub fn softmax_valid_count(&self, v: Var) -> Option<usize> {
        match &self.nodes[v.0].op {
            Op::SoftmaxNll { valid, .. } => Some(*valid),
            _ => None,
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Back-propagates from a scalar `loss`, filling `grad` on every node
    /// that requires it and is reachable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {shape}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(&op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<T>, grad: &Tensor<T>) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            } => {
                let (gi, gw, gb) =
                    ops::conv2d_backward(self.value(*input), self.value(*weight), *params, grad);
                let gb = Tensor::from_vec(self.shape(*bias), gb.into_data()).expect("bias numel");
                self.accumulate(*input, gi);
                self.accumulate(*weight, gw);
                self.accumulate(*bias, gb);
            }
            Op::Relu { input } => {
                let g = ops::relu_backward(self.value(*input), grad);
                self.accumulate(*input, g);
            }
            Op::MaxPool2d { input, argmax } => {
                let g = ops::maxpool2d_backward(self.shape(*input), argmax, grad);
                self.accumulate(*input, g);
            }
            Op::Upsample { input, factor } => {
                let g = ops::upsample_nearest_backward(self.shape(*input), *factor, grad);
                self.accumulate(*input, g);
            }
            Op::Sum { inputs } => {
                for &v in inputs {
                    self.accumulate(v, grad.clone());
                }
            }
            Op::Scale { input, factor } => {
                let data = grad.data().iter().map(|&g| g * *factor).collect();
                let g = Tensor::from_vec(grad.shape(), data).expect("same shape");
                self.accumulate(*input, g);
            }
            Op::SumAll { input } => {
                let g = Tensor::full(self.shape(*input), grad.data()[0]);
                self.accumulate(*input, g);
            }
            Op::MultilabelNll { logits, targets } => {
                let g = losses::multilabel_nll_grad(self.value(*logits), targets, grad.data()[0]);
                self.accumulate(*logits, g);
            }
            Op::SoftmaxNll {
                logits,
                labels,
                valid,
            } => {
                let g =
                    losses::softmax_nll_grad(self.value(*logits), labels, *valid, grad.data()[0]);
                self.accumulate(*logits, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_tensor(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, data.len()).unwrap(), data.to_vec()).unwrap()
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(vec_tensor(&[1.0, 2.0]), true);
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn sum_of_scaled_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(Shape::new(2, 3, 2, 1).unwrap(), 0.7), true);
        let y = g.scale(x, 2.0).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(vec_tensor(&[-1.0, 3.0]), true);
        let y = g.relu(x).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(vec_tensor(&[1.0]), true);
        let unused = g.leaf(vec_tensor(&[1.0]), true);
        let l = g.sum_all(x).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(vec_tensor(&[1.0, -2.0]), true);
        let s = g.elementwise_sum(&[x, x]).unwrap();
        let l = g.sum_all(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(vec_tensor(&[f64::MAX]), true);
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut g = Graph::new();
        let c = g.leaf(vec_tensor(&[1.0]), false);
        let y = g.scale(c, 3.0).unwrap();
        assert!(!g.requires_grad(y));
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
    }
}
