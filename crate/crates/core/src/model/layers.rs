//! Parameterized layers wrapping the tensor kernels. Each layer's
//! `backward` accumulates into its own parameters' gradients (trainable
//! ones only) and returns the input gradient when asked for it.

use rand::Rng;

use super::Module;
use crate::error::Result;
use crate::tensor::{self, NormAxis, Parameter, Tensor};

/// Std of the truncated-normal initializer used for every weight.
pub const INIT_STD: f32 = 0.02;

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Parameter::new(
                join_name(prefix, "weight"),
                Tensor::trunc_normal(&[c_out, c_in / groups, kernel, kernel], INIT_STD, rng),
            ),
            bias: Parameter::new(join_name(prefix, "bias"), Tensor::zeros(&[c_out])),
            stride,
            groups,
        }
    }

    /// 1×1 convolution: a linear map over channels at every position.
    pub fn pointwise<R: Rng + ?Sized>(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(prefix, c_in, c_out, 1, 1, 1, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::conv2d(
            x,
            &self.weight.value,
            &self.bias.value,
            self.stride,
            self.groups,
        )
    }

    pub fn backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let need_params = self.weight.trainable || self.bias.trainable;
        if !need_input && !need_params {
            return Ok(None);
        }
        let g = tensor::conv2d_backward(
            x,
            &self.weight.value,
            dy,
            self.stride,
            self.groups,
            need_input,
            need_params,
        )?;
        if self.weight.trainable {
            self.weight
                .accumulate_grad(g.weight.as_ref().unwrap().data());
        }
        if self.bias.trainable {
            self.bias.accumulate_grad(g.bias.as_ref().unwrap().data());
        }
        Ok(g.input)
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Parameter,
    pub bias: Parameter,
    pub axis: NormAxis,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize, axis: NormAxis) -> Self {
        Self {
            weight: Parameter::new(join_name(prefix, "weight"), Tensor::full(&[dim], 1.0)),
            bias: Parameter::new(join_name(prefix, "bias"), Tensor::zeros(&[dim])),
            axis,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(x, &self.weight.value, &self.bias.value, self.axis)
    }

    pub fn backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let need_params = self.weight.trainable || self.bias.trainable;
        if !need_input && !need_params {
            return Ok(None);
        }
        let g = tensor::layer_norm_backward(
            x,
            &self.weight.value,
            dy,
            self.axis,
            need_input,
            need_params,
        )?;
        if self.weight.trainable {
            self.weight
                .accumulate_grad(g.gamma.as_ref().unwrap().data());
        }
        if self.bias.trainable {
            self.bias.accumulate_grad(g.beta.as_ref().unwrap().data());
        }
        Ok(g.input)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Fully connected layer over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::new(
                join_name(prefix, "weight"),
                Tensor::trunc_normal(&[d_out, d_in], INIT_STD, rng),
            ),
            bias: Parameter::new(join_name(prefix, "bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::linear(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let need_params = self.weight.trainable || self.bias.trainable;
        if !need_input && !need_params {
            return Ok(None);
        }
        let g = tensor::linear_backward(x, &self.weight.value, dy, need_input, need_params)?;
        if self.weight.trainable {
            self.weight
                .accumulate_grad(g.weight.as_ref().unwrap().data());
        }
        if self.bias.trainable {
            self.bias.accumulate_grad(g.bias.as_ref().unwrap().data());
        }
        Ok(g.input)
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Global response normalization with zero-initialized affine.
#[derive(Clone, Debug)]
pub struct Grn {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl Grn {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::new(join_name(prefix, "gamma"), Tensor::zeros(&[dim])),
            beta: Parameter::new(join_name(prefix, "beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::grn(x, &self.gamma.value, &self.beta.value)
    }

    pub fn backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let need_params = self.gamma.trainable || self.beta.trainable;
        if !need_input && !need_params {
            return Ok(None);
        }
        let g = tensor::grn_backward(x, &self.gamma.value, dy, need_input, need_params)?;
        if self.gamma.trainable {
            self.gamma.accumulate_grad(g.gamma.as_ref().unwrap().data());
        }
        if self.beta.trainable {
            self.beta.accumulate_grad(g.beta.as_ref().unwrap().data());
        }
        Ok(g.input)
    }
}

impl Module for Grn {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
