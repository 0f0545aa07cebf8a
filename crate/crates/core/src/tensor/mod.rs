//! Dense `f32` tensors, learnable parameters and the forward/gradient
//! kernels the network layers are assembled from.
//!
//! Every kernel comes as a pair: a forward function and a `*_backward`
//! function that takes the saved forward inputs plus the upstream gradient.
//! Image-like data is laid out `N×C×H×W`, row-major.

mod activation;
mod conv;
pub(crate) mod gemm;
mod grn;
mod linear;
mod loss;
mod norm;
mod optim;
mod pool;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

pub use activation::{gelu, gelu_backward, leaky_relu, leaky_relu_backward, LEAKY_RELU_SLOPE};
pub use conv::{conv2d, conv2d_backward, conv_padding, ConvGrads};
pub use grn::{grn, grn_backward, GrnGrads, GRN_EPS};
pub use linear::{linear, linear_backward, LinearGrads};
pub use loss::{l1_loss, masked_mse};
pub use norm::{
    batch_norm, batch_norm_backward, layer_norm, layer_norm_backward, BatchNormCache, NormAxis,
    NormGrads, RunningStats, BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use optim::{AdamW, AdamWConfig};
pub use pool::{global_avg_pool, global_avg_pool_backward};

/// Row-major `f32` array with up to four dimensions.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} must have 1..=4 positive dims"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    /// Normal(0, std) truncated to ±2·std by resampling.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| loop {
            let z: f32 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(N, C, H, W)` of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidArgument(format!(
                "expected a 4-D N×C×H×W tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape("add", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sample `n` of a batch as a `1×C×H×W` tensor.
    pub fn sample(&self, n: usize) -> Result<Tensor> {
        let (bn, c, h, w) = self.dims4()?;
        if n >= bn {
            return Err(Error::InvalidArgument(format!("sample {n} of batch {bn}")));
        }
        let len = c * h * w;
        Ok(Self {
            shape: vec![1, c, h, w],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        })
    }

    /// Samples at `indices` of a batch, in that order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        let len = self.numel() / n;
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidArgument(format!("sample {i} of batch {n}")));
            }
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(&shape, data)
    }

    /// Concatenate 4-D tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in parts {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(shape_err("stack_batch", first.shape(), t.shape()));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&[n, c, h, w], data)
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn debug_assert_finite(&self, op: &str) {
        debug_assert!(self.all_finite(), "{op} produced a non-finite value");
    }
}

/// A learnable (or buffered) tensor registered under a unique dotted name.
///
/// Buffers are model state that is never touched by the optimizer, such as
/// batch-norm running statistics. They follow the trainability of the
/// module that owns them, so a tunable module counts its buffers as tunable
/// state.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    pub buffer: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
            buffer: false,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            buffer: true,
            ..Self::new(name, value)
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.value.numel(), "{}", self.name);
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.grad = Some(Tensor {
                    shape: self.value.shape.clone(),
                    data: g.to_vec(),
                })
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
