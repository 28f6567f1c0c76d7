//! Dense row-major f64 tensors. The only value type flowing through the
//! library; all layout logic lives here, all math lives in `kernels`.

use serde::{Deserialize, Serialize};

use crate::{AntError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AntError::shape(
                "tensor-new",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Single stored value of a scalar (or 1-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(AntError::shape("item", format!("expected 1 element, got {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_slice(shape, &self.data)
    }

    /// View the tensor as a [rows, cols] matrix by splitting the shape after
    /// `lead` axes. `lead == 0` gives [1, len].
    pub fn as_matrix(&self, lead: usize) -> (usize, usize) {
        let rows: usize = self.shape[..lead].iter().product();
        let cols: usize = self.shape[lead..].iter().product();
        (rows, cols)
    }

    /// Row `i` of the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Stack samples of identical shape into one batched tensor [B, sample...].
    pub fn stack(samples: &[&Tensor]) -> Result<Tensor> {
        let first = samples.first().ok_or_else(|| AntError::shape("stack", "empty input"))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(samples.len() * first.len());
        for s in samples {
            if s.shape != first.shape {
                return Err(AntError::shape(
                    "stack",
                    format!("mixed sample shapes {:?} vs {:?}", first.shape, s.shape),
                ));
            }
            data.extend_from_slice(&s.data);
        }
        Tensor::new(shape, data)
    }

    /// Extract sample `i` from a batched tensor, dropping the batch axis.
    pub fn unstack_row(&self, i: usize) -> Tensor {
        let shape = self.shape[1..].to_vec();
        Tensor { shape, data: self.row(i).to_vec() }
    }
}
