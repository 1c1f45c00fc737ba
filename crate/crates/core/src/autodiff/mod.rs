//! Reverse-mode automatic differentiation and optimization.

mod optim;
mod tape;
mod tensor;

pub mod gradcheck;

pub use optim::{cosine_lr, Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var, GUARD_EPS};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A model whose learnable tensors can be enumerated in a stable order.
pub trait Parameters<T: Scalar> {
    /// Named tensors in a fixed order. Names are unique within the model.
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;

    /// The same tensors, same order, mutably.
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(trainable);
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.value().len()).sum()
    }
}

/// Adds the gradients of bound `leaves` into the trainable tensors of
/// `model`. `leaves` must follow [`Parameters::params_mut`] order.
pub fn accumulate_grads<T: Scalar, P: Parameters<T> + ?Sized>(
    model: &mut P,
    leaves: &[Var],
    grads: &Gradients<T>,
) -> Result<()> {
    let params = model.params_mut();
    if params.len() != leaves.len() {
        return Err(Error::Contract(format!(
            "{} leaves bound for {} parameters",
            leaves.len(),
            params.len()
        )));
    }
    for (p, &v) in params.into_iter().zip(leaves) {
        if p.requires_grad() {
            grads.accumulate_into(v, p)?;
        }
    }
    Ok(())
}
