//! Validated tensor wrappers for the values that cross module boundaries.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of RGB images `[batch, 3, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 || t.dim(0) == 0 || t.dim(1) != 3 {
            return Err(Error::Validation(format!(
                "image batch must be [batch >= 1, 3, H, W], got {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Validation("image batch has non-finite pixels".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn height(&self) -> usize {
        self.0.dim(2)
    }

    pub fn width(&self) -> usize {
        self.0.dim(3)
    }
}

/// A backbone feature map `[batch, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 || t.shape().contains(&0) {
            return Err(Error::Validation(format!(
                "feature map must be a non-empty rank-4 tensor, got {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Validation("feature map has non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dim(1)
    }

    pub fn height(&self) -> usize {
        self.0.dim(2)
    }

    pub fn width(&self) -> usize {
        self.0.dim(3)
    }
}

/// A batch of embeddings `[batch, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Tensor);

impl FeatureVector {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 || t.dim(0) == 0 {
            return Err(Error::Validation(format!(
                "feature vector must be [batch >= 1, dim], got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation("ragged feature rows".into()));
        }
        Self::new(Tensor::new(&[rows.len(), dim], rows.concat())?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.0.dim(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}
