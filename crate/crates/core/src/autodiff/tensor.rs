//! Dense row-major tensor with explicit dimensions.

use crate::num::Real;
use crate::rng::StreamRng;

/// Dense tensor: a shape vector plus a flat row-major value buffer.
///
/// No broadcasting semantics live here; operations that broadcast (bias adds)
/// say so explicitly in the graph layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    /// Builds a tensor from a shape and matching flat data.
    pub fn new(dims: Vec<usize>, data: Vec<F>) -> Self {
        let numel: usize = dims.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Self { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Self {
            dims,
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(dims: Vec<usize>, value: F) -> Self {
        let numel = dims.iter().product();
        Self {
            dims,
            data: vec![value; numel],
        }
    }

    /// Scalar (single-element) tensor.
    pub fn scalar(value: F) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[F]) -> Self {
        Self {
            dims: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(dims: Vec<usize>, lo: f64, hi: f64, rng: &mut StreamRng) -> Self {
        let numel: usize = dims.iter().product();
        let data = (0..numel).map(|_| F::of(rng.uniform_in(lo, hi))).collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> F {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor with dims {:?}",
            self.dims
        );
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(
            self.dims.len(),
            2,
            "expected rank-2 tensor, got dims {:?}",
            self.dims
        );
        (self.dims[0], self.dims[1])
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data viewed under new dims (must preserve element count).
    pub fn reshaped(&self, dims: Vec<usize>) -> Self {
        let numel: usize = dims.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape from {:?} to {:?} changes element count",
            self.dims,
            dims
        );
        Self {
            dims,
            data: self.data.clone(),
        }
    }

    /// Widening copy to `f64` (used by oracles and diagnostics).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Elementwise map, preserving shape.
    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
