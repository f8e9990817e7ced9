use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Rank 0 (empty shape) is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Clone> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} entries, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Same data, new shape with the same number of entries.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(&T, &T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a.clone() + b.clone())
    }

    pub fn inner(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (a, b)| acc + a.clone() * b.clone())
    }

    /// Lift an `f64` tensor into another scalar type.
    pub fn lift(t: &Tensor<f64>) -> Self {
        t.map(|&x| T::from_f64(x))
    }

    /// Real primal part of every entry.
    pub fn re(&self) -> Tensor<f64> {
        self.map(|x| x.re())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Tensor<f64> {
    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl fmt::Display for Tensor<f64> {
    /// Bracketed decimal list, e.g. `[1, 2.5]`; shape is not printed.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, x) in self.data.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, "]")
    }
}

/// Concatenate flat tensors into one vector.
pub fn flatten(ts: &[Tensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Split a flat vector back into tensors of the given shapes.
pub fn unflatten(flat: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f64>>> {
    let total: usize = shapes.iter().map(|s| numel(s)).sum();
    crate::error::check_len("flat parameter vector", flat.len(), total)?;
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in shapes {
        let n = numel(s);
        out.push(Tensor::new(s.clone(), flat[off..off + n].to_vec())?);
        off += n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let flat = flatten(&[a.clone(), b.clone()]);
        let back = unflatten(&flat, &[vec![2], vec![1, 2]]).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
