//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values are `f64` throughout. A [`Tape`] records every operation applied
//! to its [`Var`] handles; [`Tape::backward`] replays the record in exact
//! reverse order and accumulates parameter gradients on the leaves.

mod kernels;
mod optim;
mod tape;

pub use kernels::out_extent;
pub use optim::{lr_schedule, sgd_momentum_step, SgdMomentum};
pub(crate) use tape::sigmoid_scalar;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major array. Four-dimensional tensors are ordered
/// (batch, channels, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {expected} elements, data has {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank 4, got {:?}", self.shape),
            )),
        }
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    /// The `n`-th item of a rank-4 batch, keeping a batch extent of one.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let [batch, c, h, w] = self.dims4()?;
        if n >= batch {
            return Err(Error::shape(
                "batch_item",
                format!("index {n} out of batch {batch}"),
            ));
        }
        let len = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let [_, c, h, w] = first.dims4()?;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut batch = 0;
        for t in items {
            let [n, tc, th, tw] = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            batch += n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![batch, c, h, w], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn batch_item_and_stack_are_inverse() {
        let t = Tensor::new(vec![2, 1, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let a = t.batch_item(0).unwrap();
        let b = t.batch_item(1).unwrap();
        assert_eq!(b.data(), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(Tensor::stack(&[a, b]).unwrap(), t);
        assert!(t.batch_item(2).is_err());
    }
}
