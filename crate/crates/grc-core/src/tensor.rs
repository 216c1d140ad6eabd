//! Dense row-major tensors.
//!
//! `Tensor` is a plain value type: shape, data, and an optional gradient
//! buffer filled in by `Tape::backward`. All autodiff bookkeeping lives in
//! `tape`; nothing here records operations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SeededRng;

/// Renders a shape as `[2, 3]` for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    let mut s = String::from("[");
    for (i, d) in shape.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(&format!("{d}"));
    }
    s.push(']');
    s
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    /// Populated by the tape after a backward pass; same length as `data`.
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {} holds {} elements but {} were provided",
                fmt_shape(shape),
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel_of(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// I.i.d. uniform draws from [lo, hi), taken in f64 and converted.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| T::from_f64(rng.uniform(lo, hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on tensor {}", fmt_shape(&self.shape));
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape.iter()).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of range for axis {i} of {}", fmt_shape(&self.shape));
            flat = flat * dim + ix;
        }
        flat
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element, zero for empty tensors.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (a, b)| acc.max((*a - *b).abs()))
    }

    /// True when both tensors hold exactly the same bit patterns.
    pub fn bits_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Mean of all elements, computed in f64.
    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().map(|v| v.as_f64()).sum();
        sum / self.data.len() as f64
    }
}
