use super::Tensor;
use crate::error::Result;

pub const LEAKY_RELU_SLOPE: f32 = 0.01;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_C: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(input: &Tensor) -> Tensor {
    let out = input.map(|x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()));
    out.debug_assert_finite("gelu");
    out
}

pub fn gelu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.expect_same_shape("gelu_backward", grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
        })
        .collect();
    Tensor::new(input.shape(), data)
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    input.map(|x| if x >= 0.0 { x } else { slope * x })
}

pub fn leaky_relu_backward(input: &Tensor, grad_out: &Tensor, slope: f32) -> Result<Tensor> {
    input.expect_same_shape("leaky_relu_backward", grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
        .collect();
    Tensor::new(input.shape(), data)
}
