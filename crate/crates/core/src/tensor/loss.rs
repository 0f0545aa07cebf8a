use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Mean absolute error and its subgradient (zero at exact ties).
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    pred.expect_same_shape("l1_loss", target)?;
    let n = pred.numel() as f32;
    let mut total = 0.0f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            total += d.abs() as f64;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(((total / n as f64) as f32, Tensor::new(pred.shape(), grad)?))
}

/// Maps a flat index of `shape` to the flat index of `mask_shape` under
/// broadcasting (mask dims are 1 or equal).
fn broadcast_strides(shape: &[usize], mask_shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() != mask_shape.len()
        || shape
            .iter()
            .zip(mask_shape)
            .any(|(&s, &m)| m != 1 && m != s)
    {
        return Err(shape_err("masked_mse mask", shape, mask_shape));
    }
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if mask_shape[d] == 1 { 0 } else { acc };
        acc *= mask_shape[d];
    }
    Ok(strides)
}

/// Mean squared error over masked elements only.
///
/// `mask` is binary and broadcast against `pred`; the sum of squared
/// differences at masked elements is divided by the number of masked
/// elements after broadcasting. Unmasked elements contribute neither value
/// nor gradient.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<(f32, Tensor)> {
    pred.expect_same_shape("masked_mse", target)?;
    let shape = pred.shape();
    let strides = broadcast_strides(shape, mask.shape())?;
    let m = mask.data();
    let mut idx = vec![0usize; shape.len()];
    let mut flags = Vec::with_capacity(pred.numel());
    for _ in 0..pred.numel() {
        let mi: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        flags.push(m[mi] != 0.0);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let count = flags.iter().filter(|&&f| f).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0f64;
    let inv = 2.0 / count as f32;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(&flags)
        .map(|((&p, &t), &f)| {
            if f {
                let d = p - t;
                total += (d as f64) * (d as f64);
                d * inv
            } else {
                0.0
            }
        })
        .collect();
    Ok(((total / count as f64) as f32, Tensor::new(shape, grad)?))
}
