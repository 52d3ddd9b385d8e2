//! Named trainable parameters and the momentum SGD update.

use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub momentum: Tensor<T>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad: None,
            momentum,
        }
    }
}

/// Ordered parameter collection with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<usize> {
        if self.index.contains_key(&param.name) {
            return Err(Error::config(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        let i = self.params.len();
        self.index.insert(param.name.clone(), i);
        self.params.push(param);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn as_slice(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a gradient-tracking leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), true))
            .collect()
    }

    /// Copies gradients out of `graph`; parameters the loss never reached get zeros.
    pub fn absorb_grads(&mut self, graph: &Graph<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::usage(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad = Some(match graph.grad(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.shape()),
            });
        }
        Ok(())
    }
}

/// Momentum SGD with L2 weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`. Gradients are cleared afterwards.
pub fn sgd_step<T: Element>(
    params: &mut [Parameter<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::config(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::config(format!(
            "weight decay must be non-negative, got {weight_decay}"
        )));
    }
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::usage(format!(
            "parameter `{}` has no gradient",
            p.name
        )));
    }
    let (lr, mu, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(weight_decay),
    );
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let theta = p.value.data_mut();
        let v = p.momentum.data_mut();
        for ((t, v), &g) in theta.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            *v = mu * *v + g + wd * *t;
            *t -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_param(theta: f64, grad: f64) -> Parameter<f64> {
        let mut p = Parameter::new("w", Tensor::scalar(theta));
        p.grad = Some(Tensor::scalar(grad));
        p
    }

    #[test]
    fn plain_step() {
        let mut ps = vec![scalar_param(1.0, 1.0)];
        sgd_step(&mut ps, 0.1, 0.0, 0.0).unwrap();
        assert!((ps[0].value.data()[0] - 0.9).abs() < 1e-15);
        assert!(ps[0].grad.is_none());
    }

    #[test]
    fn momentum_recursion() {
        let mut ps = vec![scalar_param(0.0, 1.0)];
        sgd_step(&mut ps, 0.1, 0.9, 0.0).unwrap();
        assert!((ps[0].value.data()[0] + 0.1).abs() < 1e-15);
        ps[0].grad = Some(Tensor::scalar(1.0));
        sgd_step(&mut ps, 0.1, 0.9, 0.0).unwrap();
        assert!((ps[0].value.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let mut ps = vec![scalar_param(2.0, 0.0)];
        sgd_step(&mut ps, 1.0, 0.0, 0.0005).unwrap();
        assert!((ps[0].value.data()[0] - 1.999).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_bits() {
        let mut p = Parameter::new(
            "w",
            Tensor::from_vec(Shape::new(1, 1, 1, 3).unwrap(), vec![0.1f32, -3.7, 1e-3]).unwrap(),
        );
        let before = p.value.clone();
        p.grad = Some(Tensor::full(p.value.shape(), 0.25));
        let mut ps = vec![p];
        sgd_step(&mut ps, 0.0, 0.9, 0.0005).unwrap();
        assert_eq!(ps[0].value, before);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut ps = vec![Parameter::new("w", Tensor::<f64>::scalar(1.0))];
        assert!(matches!(
            sgd_step(&mut ps, 0.1, 0.9, 0.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::new();
        set.insert(Parameter::new("a", Tensor::<f32>::scalar(0.0)))
            .unwrap();
        assert!(set
            .insert(Parameter::new("a", Tensor::<f32>::scalar(1.0)))
            .is_err());
    }
}
