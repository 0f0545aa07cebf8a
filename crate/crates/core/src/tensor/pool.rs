use super::Tensor;
use crate::error::{shape_err, Result};

/// Spatial mean, `N×C×H×W → N×C`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let data = input
        .data()
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *input_shape else {
        return Err(shape_err(
            "global_avg_pool_backward",
            input_shape,
            grad_out.shape(),
        ));
    };
    if grad_out.shape() != [n, c] {
        return Err(shape_err(
            "global_avg_pool_backward",
            input_shape,
            grad_out.shape(),
        ));
    }
    let plane = h * w;
    let inv = 1.0 / plane as f32;
    let mut data = Vec::with_capacity(n * c * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::new(input_shape, data)
}
