//! Named trainable parameters.

use crate::error::{MagnetError, Result};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor with a unique dotted-path name.
///
/// `grad` always has the value's shape; backward passes accumulate into it
/// additively until [`ParamSet::zero_grads`] is called.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub lr_multiplier: f64,
}

/// Ordered collection of parameters; registration order is the traversal
/// order everywhere (optimizer, checkpoints, gradient checks), which keeps
/// training bit-reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.register_with_lr(name, value, 1.0)
    }

    pub fn register_with_lr(
        &mut self,
        name: &str,
        value: Tensor,
        lr_multiplier: f64,
    ) -> Result<ParamId> {
        if lr_multiplier <= 0.0 {
            return Err(MagnetError::Parameter(format!(
                "lr_multiplier must be > 0, got {lr_multiplier} for {name}"
            )));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(MagnetError::Config(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            lr_multiplier,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let g = self.params[id.0].grad.data_mut();
        debug_assert_eq!(g.len(), grad.len());
        for (dst, src) in g.iter_mut().zip(grad) {
            *dst += src;
        }
    }
}
