//! Dense single-precision tensors.

/// A dense tensor with explicit dimensions. Images and sinograms use
/// `[channels, height, width]`, flat vectors `[len]`, conv kernels
/// `[out_ch, in_ch, kh, kw]`, scalars `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor shape/product mismatch"
        );
        Self { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn from_flat(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
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

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Interprets the tensor as `(channels, height, width)`.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.dims.len() {
            3 => (self.dims[0], self.dims[1], self.dims[2]),
            2 => (1, self.dims[0], self.dims[1]),
            1 => (1, 1, self.dims[0]),
            _ => panic!("tensor of rank {} has no chw view", self.dims.len()),
        }
    }

    pub fn reshaped(&self, dims: Vec<usize>) -> Tensor {
        Tensor::new(dims, self.data.clone())
    }
}
