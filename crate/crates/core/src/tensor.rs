use crate::error::{Error, Result};

/// Dense row-major `f32` tensor.
///
/// Activations use N,C,H,W order; convolution weights use O,I,Kh,Kw.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading (batch) extent; 0 for a scalar-shaped tensor.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements per leading index.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies the items `[start, end)` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let item = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * item..end * item].to_vec(),
        }
    }

    /// Gathers the given leading-axis indices into a new tensor.
    pub fn gather_batch(&self, indices: &[usize]) -> Tensor {
        let item = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend_from_slice(&self.data[i * item..(i + 1) * item]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}
