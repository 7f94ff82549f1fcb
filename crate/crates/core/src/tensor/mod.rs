//! Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//!
//! Training runs in `f32`. Every kernel is generic over [`Element`] so the
//! gradient checks can run the exact same code in `f64`.

mod checkpoint;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::{binarize, round_half_up};
pub use params::{sgd_step, ParamId, ParamStore, Sgd};

/// Scalar type a tensor can hold.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Copy + Send + Sync + Debug + Default + AddAssign + Sum + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| E::from_f64_lossy(v)).collect())
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                E::from_f64_lossy(z * std)
            })
            .collect();
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [E]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[E]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("grad has {} elements, tensor {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Single-element value; errors on anything else.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Converts element type (used to lift f32 parameters into f64 checks).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64_lossy(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Copies rows `[start, start+count)` along the leading axis.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("slice_outer", "scalar tensor"))?;
        if start + count > outer {
            return Err(Error::shape(
                "slice_outer",
                format!("{start}+{count} > {outer}"),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self::new(
            shape,
            self.data[start * inner..(start + count) * inner].to_vec(),
        )
    }
}
