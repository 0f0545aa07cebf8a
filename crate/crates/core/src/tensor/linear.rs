use super::gemm::gemm;
use super::Tensor;
use crate::error::{shape_err, Result};

#[derive(Debug)]
pub struct LinearGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

fn dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let d_in = *input.shape().last().unwrap();
    match *weight.shape() {
        [d_out, wi] if wi == d_in => Ok((input.numel() / d_in, d_in, d_out)),
        _ => Err(shape_err("linear", input.shape(), weight.shape())),
    }
}

/// Affine map over the last dimension: `y = x·Wᵀ + b`, `W: (out, in)`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, d_in, d_out) = dims(input, weight)?;
    if bias.shape() != [d_out] {
        return Err(shape_err("linear bias", bias.shape(), &[d_out]));
    }
    let mut y = Vec::with_capacity(m * d_out);
    for _ in 0..m {
        y.extend_from_slice(bias.data());
    }
    gemm(
        m,
        d_in,
        d_out,
        input.data(),
        false,
        weight.data(),
        true,
        &mut y,
        1.0,
    );
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    let out = Tensor::new(&shape, y)?;
    out.debug_assert_finite("linear");
    Ok(out)
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
    need_params: bool,
) -> Result<LinearGrads> {
    let (m, d_in, d_out) = dims(input, weight)?;
    if grad_out.numel() != m * d_out {
        return Err(shape_err("linear_backward", grad_out.shape(), &[m, d_out]));
    }
    let dy = grad_out.data();
    let mut grads = LinearGrads {
        input: None,
        weight: None,
        bias: None,
    };
    if need_input {
        let mut dx = vec![0.0; m * d_in];
        gemm(
            m,
            d_out,
            d_in,
            dy,
            false,
            weight.data(),
            false,
            &mut dx,
            0.0,
        );
        grads.input = Some(Tensor::new(input.shape(), dx)?);
    }
    if need_params {
        let mut dw = vec![0.0; d_out * d_in];
        gemm(d_out, m, d_in, dy, true, input.data(), false, &mut dw, 0.0);
        let mut db = vec![0.0; d_out];
        for row in dy.chunks(d_out) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
        grads.weight = Some(Tensor::new(weight.shape(), dw)?);
        grads.bias = Some(Tensor::new(&[d_out], db)?);
    }
    Ok(grads)
}
