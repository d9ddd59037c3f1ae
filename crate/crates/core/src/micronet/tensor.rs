use crate::error::{Error, Result};

/// Dense NCHW tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of spatial positions per channel.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Number of values per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let plane = self.plane();
        let start = n * self.sample_len() + c * plane;
        &self.data[start..start + plane]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let [n, _, h, w] = parts[0].shape;
        let total_c: usize = parts.iter().map(|t| t.channels()).sum();
        let mut out = Tensor::zeros([n, total_c, h, w]);
        let out_len = out.sample_len();
        for s in 0..n {
            let mut offset = s * out_len;
            for part in parts {
                let src = part.sample(s);
                out.data[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        out
    }

    /// Splits along the channel axis into chunks of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Vec<Tensor> {
        let [n, _, h, w] = self.shape;
        let plane = h * w;
        let mut parts: Vec<Tensor> = widths
            .iter()
            .map(|&c| Tensor::zeros([n, c, h, w]))
            .collect();
        for s in 0..n {
            let src = self.sample(s);
            let mut offset = 0;
            for part in parts.iter_mut() {
                let len = part.channels() * plane;
                part.sample_mut(s)
                    .copy_from_slice(&src[offset..offset + len]);
                offset += len;
            }
        }
        parts
    }
}

/// A learnable (or tracked) array with an accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: &'static str,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Running statistics are carried in checkpoints but never updated by SGD.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: &'static str, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            name,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: &'static str, value: Vec<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
