//! Dense `f32` tensors and the reverse-mode autodiff graph built over them.
//!
//! A [`Tensor`] is a plain value: shape, row-major data, and an optional
//! gradient buffer. Differentiable computation happens on a [`Graph`], which
//! records every operation applied to [`Var`] handles so that
//! [`Graph::backward`] can replay them in reverse.
//!
//! Model parameters stay outside the graph. Binding one with
//! [`Graph::param`] copies its value in as a leaf tagged with the
//! parameter's [`ParamId`]; after `backward` the accumulated leaf gradient
//! is pulled back out with [`Graph::param_grad`].

mod conv;
mod gradcheck;
mod graph;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use gradcheck::{
    analytic_gradients, gradcheck, gradcheck_sampled, gradcheck_with, relative_error, GradcheckReport, Projection,
};
pub use graph::{BatchStats, Graph, Var};

/// Forward-pass behavior of the stochastic and statistics-bearing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization, dropout active.
    Train,
    /// Running statistics, dropout disabled.
    Eval,
    /// Running statistics, dropout still active (sampling at inference).
    StochasticEval,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Mode::Train)
    }

    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::StochasticEval)
    }
}

/// Identity of a trainable tensor, preserved across clones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    id: Option<ParamId>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one dimension"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            id: None,
        })
    }

    /// A trainable tensor with a fresh [`ParamId`].
    pub fn parameter(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        t.id = Some(ParamId::fresh());
        Ok(t)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Tensor::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
            id: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Tensor::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks a tensor as a differentiable leaf. Gives it a [`ParamId`] if it
    /// has none yet.
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.id.is_none() {
            self.id = Some(ParamId::fresh());
        }
        self
    }

    pub fn id(&self) -> Option<ParamId> {
        self.id
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Sets the gradient buffer to zeros of the tensor's shape.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of {} elements for tensor of shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        grad.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        Ok(())
    }

    /// Returns a tensor with the same data and a new shape of equal size.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Value copy without gradient state or identity.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
            id: None,
        }
    }

    /// Selects item `index` along the leading dimension.
    pub fn index_first(&self, index: usize) -> Result<Tensor> {
        let n = self.shape[0];
        if index >= n {
            return Err(Error::shape(format!("index {index} out of range for {:?}", self.shape)));
        }
        let inner = if self.shape.len() > 1 { &self.shape[1..] } else { &[1][..] };
        let stride = self.numel() / n;
        Tensor::new(inner, self.data[index * stride..(index + 1) * stride].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(&shape, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// Returns the four dimensions of an NCHW tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::shape(format!("expected a 4-d tensor, got {:?}", self.shape))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(&[2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn clones_keep_parameter_identity() {
        let p = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let q = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(p.clone().id(), p.id());
        assert_ne!(p.id(), q.id());
        assert_eq!(p.detached().id(), None);
    }

    #[test]
    fn gradient_accumulates_until_zeroed() {
        let mut p = Tensor::parameter(&[2], vec![0.0; 2]).unwrap();
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(p.grad().unwrap(), &[2.0, 4.0]);
        p.zero_grad();
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
        assert!(p.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn stack_and_index_round_trip() {
        let a = Tensor::from_fn(&[2, 2], |i| i as f32).unwrap();
        let b = Tensor::from_fn(&[2, 2], |i| 10.0 + i as f32).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.index_first(1).unwrap(), b);
        assert_eq!(s.index_first(0).unwrap(), a);
    }
}
