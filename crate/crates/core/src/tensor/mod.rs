//! Dense tensors and the reverse-mode autodiff tape.

mod adam;
mod conv;
mod gradcheck;
mod tape;

pub use adam::{Adam, AdamHyper};
pub use gradcheck::{grad_check, GradCheckFn};
pub use tape::{Tape, Var};

use crate::error::{IonError, Result};
use crate::scalar::Scalar;

/// Shape + flat row-major storage. The value payload of tape nodes and the
/// persistent state of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(IonError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} holds {} elements, data has {}", shape, n, data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(IonError::InvalidArg {
                op: "tensor",
                detail: format!("zero-sized dimension in {:?}", shape),
            });
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        TensorData { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        TensorData { shape: vec![1], data: vec![value] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the shape as [B, C, H, W].
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(IonError::ShapeMismatch {
                op,
                detail: format!("expected a 4-d tensor, got shape {:?}", self.shape),
            }),
        }
    }
}

/// A named leaf tensor that persists across training steps: a model
/// parameter or a pinned input. While a forward pass is recorded it is
/// bound to a tape node; after `Tape::backward` the accumulated gradient
/// can be pulled back into `grad`. Binding is cached per tape, so a model
/// forwarded twice on one tape shares a single leaf and its gradient
/// contributions accumulate.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub name: String,
    pub value: TensorData<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
    pub node: Option<(u64, Var)>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(name: impl Into<String>, value: TensorData<T>, requires_grad: bool) -> Self {
        Tensor { name: name.into(), value, requires_grad, grad: None, node: None }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Tensor::new(name, TensorData::zeros(shape), true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Records this tensor as a leaf on `tape`, or returns the node it is
    /// already bound to on this tape.
    pub fn bind(&mut self, tape: &mut Tape<T>) -> Var {
        if let Some((tape_id, v)) = self.node {
            if tape_id == tape.id() {
                return v;
            }
        }
        let v = tape.leaf(self.value.clone(), self.requires_grad);
        self.node = Some((tape.id(), v));
        v
    }

    /// Accumulates the gradient of the bound node into `grad`. A tensor with
    /// `requires_grad = false` never receives a grad buffer. A bound node the
    /// backward pass never reached contributes zeros.
    pub fn pull_grad(&mut self, tape: &Tape<T>) {
        if !self.requires_grad {
            return;
        }
        let Some((tape_id, node)) = self.node else { return };
        if tape_id != tape.id() {
            return;
        }
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); self.value.len()]);
        if let Some(g) = tape.grad_of(node) {
            for (dst, &src) in grad.iter_mut().zip(g) {
                *dst = *dst + src;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn unbind(&mut self) {
        self.node = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_data_validates_shape() {
        assert!(TensorData::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
        let err = TensorData::new(vec![2, 3], vec![0.0f32; 5]).unwrap_err();
        assert!(matches!(err, IonError::ShapeMismatch { .. }));
        assert!(TensorData::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn frozen_tensor_never_gets_grad_buffer() {
        let mut tape = Tape::<f64>::new();
        let mut t = Tensor::new("w", TensorData::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let v = t.bind(&mut tape);
        let loss = tape.sum(v);
        tape.backward(loss).unwrap();
        t.pull_grad(&tape);
        assert!(t.grad.is_none());
    }
}
