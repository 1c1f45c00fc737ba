use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense matrix with an optional accumulated gradient.
///
/// Every learnable weight in the crate is a `Tensor`. Gradients produced by a
/// [`Tape`](super::Tape) are added into `grad` with [`Tensor::accumulate_grad`]
/// and consumed by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    value: Array2<T>,
    requires_grad: bool,
    grad: Option<Array2<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// A constant (non-trainable) tensor.
    pub fn constant(value: Array2<T>) -> Self {
        Self {
            value,
            requires_grad: false,
            grad: None,
        }
    }

    /// A trainable tensor.
    pub fn param(value: Array2<T>) -> Self {
        Self {
            value,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize, requires_grad: bool) -> Self {
        Self {
            value: Array2::zeros((rows, cols)),
            requires_grad,
            grad: None,
        }
    }

    pub fn value(&self) -> &Array2<T> {
        &self.value
    }

    /// Mutable access to the values. Clears any stale gradient.
    pub fn value_mut(&mut self) -> &mut Array2<T> {
        self.grad = None;
        &mut self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&Array2<T>> {
        self.grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &Array2<T>) -> Result<()> {
        if g.dim() != self.value.dim() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match tensor shape {:?}",
                g.dim(),
                self.value.dim()
            )));
        }
        match &mut self.grad {
            Some(acc) => *acc += g,
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    /// Parameter update used by optimizers; keeps the gradient.
    pub(crate) fn update(&mut self, f: impl FnMut(&mut Array2<T>, &Array2<T>)) -> Result<()> {
        let mut f = f;
        let grad = self
            .grad
            .as_ref()
            .ok_or_else(|| Error::Contract("parameter has no gradient".into()))?;
        f(&mut self.value, grad);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}
