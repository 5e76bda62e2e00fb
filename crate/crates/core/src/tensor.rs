//! Dense tensors and coordinate-list delta events.
//!
//! Tensors are row-major. Parameters, frames and anything written to disk
//! use `f32`; the inference engine carries its internal signals (neuron
//! states, quantized outputs, deltas) as `f64` so that the integrated and
//! the direct path round identically at every quantizer boundary.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

/// Scalar element of a [`Tensor`].
pub trait Element: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    const ZERO: Self;

    fn to_f64(self) -> f64;

    fn from_f64(v: f64) -> Self;

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }
}

impl Element for f32 {
    const ZERO: Self = 0.0;

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

pub fn num_elements(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("tensor dimensions must be positive, got {shape:?}"));
        }
        if num_elements(&shape) != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {} elements but {} values were given",
                num_elements(&shape),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::ZERO)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; num_elements(shape)] }
    }

    pub fn from_vec(data: Vec<E>) -> Self {
        Self { shape: vec![data.len()], data }
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

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map<F: Element>(&self, f: impl Fn(E) -> F) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        self.map(|v| F::from_f64(v.to_f64()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != E::ZERO).count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> Result<f64> {
        if self.shape != other.shape {
            return dim_err(format!("cannot compare shapes {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max))
    }
}

/// Nonzero entries of a tensor, keyed by row-major flat index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseEvents<E = f32> {
    shape: Vec<usize>,
    entries: Vec<(usize, E)>,
}

impl<E: Element> SparseEvents<E> {
    pub fn empty(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), entries: Vec::new() }
    }

    /// Builds events from explicit entries, checking ordering, bounds and
    /// that no entry is zero.
    pub fn new(shape: Vec<usize>, entries: Vec<(usize, E)>) -> Result<Self> {
        let n = num_elements(&shape);
        let mut last = None;
        for &(idx, v) in &entries {
            if idx >= n {
                return dim_err(format!("event index {idx} out of range for {shape:?}"));
            }
            if last.is_some_and(|l| idx <= l) {
                return dim_err("event indices must be strictly increasing");
            }
            if v == E::ZERO {
                return dim_err(format!("event at index {idx} has value zero"));
            }
            last = Some(idx);
        }
        Ok(Self { shape, entries })
    }

    pub(crate) fn from_sorted_unchecked(shape: Vec<usize>, entries: Vec<(usize, E)>) -> Self {
        Self { shape, entries }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn entries(&self) -> &[(usize, E)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dense_len(&self) -> usize {
        num_elements(&self.shape)
    }
}

/// Drops exact zeros only.
pub fn sparsify<E: Element>(x: &Tensor<E>) -> SparseEvents<E> {
    let entries = x.data().iter().enumerate().filter(|(_, &v)| v != E::ZERO).map(|(i, &v)| (i, v)).collect();
    SparseEvents::from_sorted_unchecked(x.shape().to_vec(), entries)
}

pub fn densify<E: Element>(e: &SparseEvents<E>) -> Tensor<E> {
    let mut data = vec![E::ZERO; e.dense_len()];
    for &(i, v) in e.entries() {
        data[i] = v;
    }
    Tensor { shape: e.shape().to_vec(), data }
}

/// Events of `current - previous`, elementwise.
pub fn difference<E: Element>(current: &Tensor<E>, previous: &Tensor<E>) -> Result<SparseEvents<E>> {
    if current.shape() != previous.shape() {
        return dim_err(format!("cannot difference {:?} against {:?}", current.shape(), previous.shape()));
    }
    let entries = current
        .data()
        .iter()
        .zip(previous.data())
        .enumerate()
        .filter_map(|(i, (&c, &p))| {
            let d = E::from_f64(c.to_f64() - p.to_f64());
            (d != E::ZERO).then_some((i, d))
        })
        .collect();
    Ok(SparseEvents::from_sorted_unchecked(current.shape().to_vec(), entries))
}

/// A layer's emitted signal: full activations or deltas.
#[derive(Clone, Debug, PartialEq)]
pub enum Signal<E = f64> {
    Dense(Tensor<E>),
    Delta(SparseEvents<E>),
}

impl<E: Element> Signal<E> {
    pub fn is_delta(&self) -> bool {
        matches!(self, Signal::Delta(_))
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Signal::Dense(t) => t.shape(),
            Signal::Delta(e) => e.shape(),
        }
    }

    pub fn nonzeros(&self) -> usize {
        match self {
            Signal::Dense(t) => t.count_nonzero(),
            Signal::Delta(e) => e.nnz(),
        }
    }

    pub fn dense_len(&self) -> usize {
        num_elements(self.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], Vec::<f32>::new()).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
    }

    #[test]
    fn sparsify_drops_exact_zeros() {
        assert!(sparsify(&Tensor::from_vec(vec![0.0f32, 0.0, 0.0])).is_empty());
        let e = sparsify(&Tensor::from_vec(vec![0.0f32, 1.5, 0.0, -2.0]));
        assert_eq!(e.entries(), &[(1, 1.5), (3, -2.0)]);
        let tiny = sparsify(&Tensor::from_vec(vec![1e-30f32]));
        assert_eq!(tiny.nnz(), 1);
    }

    #[test]
    fn event_construction_checks_invariants() {
        assert!(SparseEvents::new(vec![4], vec![(1, 1.0f32), (1, 2.0)]).is_err());
        assert!(SparseEvents::new(vec![4], vec![(2, 1.0f32), (1, 2.0)]).is_err());
        assert!(SparseEvents::new(vec![4], vec![(4, 1.0f32)]).is_err());
        assert!(SparseEvents::new(vec![4], vec![(0, 0.0f32)]).is_err());
        assert!(SparseEvents::new(vec![4], vec![(0, 1.0f32), (3, -1.0)]).is_ok());
    }

    #[test]
    fn difference_matches_dense_subtraction() {
        let a = Tensor::from_vec(vec![1.0f64, 2.0, 3.0]);
        let b = Tensor::from_vec(vec![1.0f64, 0.5, 4.0]);
        let d = difference(&a, &b).unwrap();
        assert_eq!(d.entries(), &[(1, 1.5), (2, -1.0)]);
    }

    proptest! {
        #[test]
        fn densify_sparsify_round_trip(values in prop::collection::vec(
            prop_oneof![Just(0.0f32), -10.0f32..10.0], 1..64)) {
            let x = Tensor::from_vec(values);
            let e = sparsify(&x);
            prop_assert_eq!(&densify(&e), &x);
            prop_assert_eq!(sparsify(&densify(&e)), e.clone());
            prop_assert!(e.entries().windows(2).all(|w| w[0].0 < w[1].0));
            prop_assert!(e.entries().iter().all(|&(_, v)| v != 0.0));
        }
    }
}
