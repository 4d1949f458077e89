use crate::error::{Error, Result};

/// Dense row-major tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape(format!("invalid tensor dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    /// Dims as a (C, D, H, W) feature map.
    pub fn shape4(&self) -> Result<[usize; 4]> {
        match self.dims[..] {
            [c, d, h, w] => Ok([c, d, h, w]),
            _ => Err(Error::shape(format!(
                "expected a (C, D, H, W) tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
