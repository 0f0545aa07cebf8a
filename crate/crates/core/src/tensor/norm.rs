use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub const LN_EPS: f32 = 1e-6;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Axis a layer norm reduces over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Channel axis of an `N×C×H×W` tensor, per spatial position.
    Channel,
    /// Last axis of any tensor.
    Last,
}

#[derive(Debug)]
pub struct NormGrads {
    pub input: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

/// `(d, plane)`: reduction length and the stride between reduced values.
fn ln_layout(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    axis: NormAxis,
) -> Result<(usize, usize)> {
    let d = match axis {
        NormAxis::Channel => input.dims4()?.1,
        NormAxis::Last => *input.shape().last().unwrap(),
    };
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err("layer_norm", input.shape(), gamma.shape()));
    }
    let plane = match axis {
        NormAxis::Channel => {
            let (_, _, h, w) = input.dims4()?;
            h * w
        }
        NormAxis::Last => 1,
    };
    Ok((d, plane))
}

/// Per-position mean and reciprocal std over `d` values spaced `plane`
/// apart, for every position of one `d×plane` block.
fn block_stats(x: &[f32], d: usize, plane: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mean = vec![0.0f32; plane];
    for c in 0..d {
        for (m, v) in mean.iter_mut().zip(&x[c * plane..(c + 1) * plane]) {
            *m += v;
        }
    }
    let inv = 1.0 / d as f32;
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![0.0f32; plane];
    for c in 0..d {
        for ((s, v), m) in var
            .iter_mut()
            .zip(&x[c * plane..(c + 1) * plane])
            .zip(&mean)
        {
            let t = v - m;
            *s += t * t;
        }
    }
    let rstd = var
        .iter()
        .map(|s| 1.0 / (s * inv + LN_EPS).sqrt())
        .collect();
    (mean, rstd)
}

/// Layer normalization with epsilon `1e-6` and per-feature affine.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, axis: NormAxis) -> Result<Tensor> {
    let (d, plane) = ln_layout(input, gamma, beta, axis)?;
    let mut out = Tensor::zeros(input.shape());
    let block = d * plane;
    let (g, b) = (gamma.data(), beta.data());
    for (x, y) in input
        .data()
        .chunks(block)
        .zip(out.data_mut().chunks_mut(block))
    {
        let (mean, rstd) = block_stats(x, d, plane);
        for c in 0..d {
            let xs = &x[c * plane..(c + 1) * plane];
            let ys = &mut y[c * plane..(c + 1) * plane];
            for (((o, v), m), r) in ys.iter_mut().zip(xs).zip(&mean).zip(&rstd) {
                *o = (v - m) * r * g[c] + b[c];
            }
        }
    }
    out.debug_assert_finite("layer_norm");
    Ok(out)
}

pub fn layer_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    grad_out: &Tensor,
    axis: NormAxis,
    need_input: bool,
    need_params: bool,
) -> Result<NormGrads> {
    let (d, plane) = ln_layout(input, gamma, gamma, axis)?;
    input.expect_same_shape("layer_norm_backward", grad_out)?;
    let block = d * plane;
    let g = gamma.data();
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut dgamma = vec![0.0f32; d];
    let mut dbeta = vec![0.0f32; d];
    let inv = 1.0 / d as f32;
    for (bi, (x, dy)) in input
        .data()
        .chunks(block)
        .zip(grad_out.data().chunks(block))
        .enumerate()
    {
        let (mean, rstd) = block_stats(x, d, plane);
        let mut s1 = vec![0.0f32; plane];
        let mut s2 = vec![0.0f32; plane];
        for c in 0..d {
            let xs = &x[c * plane..(c + 1) * plane];
            let gs = &dy[c * plane..(c + 1) * plane];
            let mut dg = 0.0;
            let mut db = 0.0;
            for p in 0..plane {
                let xhat = (xs[p] - mean[p]) * rstd[p];
                let dxhat = gs[p] * g[c];
                s1[p] += dxhat;
                s2[p] += dxhat * xhat;
                dg += gs[p] * xhat;
                db += gs[p];
            }
            dgamma[c] += dg;
            dbeta[c] += db;
        }
        if let Some(dx) = dx.as_mut() {
            let out = &mut dx.data_mut()[bi * block..(bi + 1) * block];
            for c in 0..d {
                let xs = &x[c * plane..(c + 1) * plane];
                let gs = &dy[c * plane..(c + 1) * plane];
                let os = &mut out[c * plane..(c + 1) * plane];
                for p in 0..plane {
                    let xhat = (xs[p] - mean[p]) * rstd[p];
                    let dxhat = gs[p] * g[c];
                    os[p] = rstd[p] * (dxhat - s1[p] * inv - xhat * s2[p] * inv);
                }
            }
        }
    }
    Ok(NormGrads {
        input: dx,
        gamma: need_params.then(|| Tensor::new(&[d], dgamma)).transpose()?,
        beta: need_params.then(|| Tensor::new(&[d], dbeta)).transpose()?,
    })
}

/// Running statistics of a batch norm, owned by the caller.
pub struct RunningStats<'a> {
    pub mean: &'a mut Tensor,
    pub var: &'a mut Tensor,
}

/// Statistics a batch-norm forward used, needed by its backward.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
    pub training: bool,
}

fn bn_layout(input: &Tensor) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::InvalidArgument(format!(
            "batch_norm expects N×C or N×C×H×W, got {:?}",
            input.shape()
        ))),
    }
}

/// Batch normalization over every axis except channels (axis 1).
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased one into the running estimate with momentum 0.1. A training
/// batch holding a single element per channel is permitted: its variance is
/// zero, so the output collapses to `beta`, and the running variance is
/// updated with that zero.
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: RunningStats<'_>,
    training: bool,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, plane) = bn_layout(input)?;
    if gamma.shape() != [c]
        || beta.shape() != [c]
        || stats.mean.shape() != [c]
        || stats.var.shape() != [c]
    {
        return Err(shape_err("batch_norm", input.shape(), gamma.shape()));
    }
    let x = input.data();
    let count = n * plane;
    let (mean, rstd) = if training {
        let mut mean = vec![0.0f32; c];
        let mut rstd = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                s += x[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let m = s / count as f64;
            let mut ss = 0.0f64;
            for b in 0..n {
                ss += x[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|&v| (v as f64 - m).powi(2))
                    .sum::<f64>();
            }
            let var = ss / count as f64;
            let unbiased = if count > 1 {
                ss / (count - 1) as f64
            } else {
                var
            };
            mean[ch] = m as f32;
            rstd[ch] = 1.0 / (var as f32 + BN_EPS).sqrt();
            let rm = &mut stats.mean.data_mut()[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m as f32;
            let rv = &mut stats.var.data_mut()[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
        }
        (mean, rstd)
    } else {
        (
            stats.mean.data().to_vec(),
            stats
                .var
                .data()
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect(),
        )
    };
    let mut out = Tensor::zeros(input.shape());
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = rstd[ch] * g[ch];
            let shift = bt[ch] - mean[ch] * scale;
            for (o, v) in out.data_mut()[off..off + plane]
                .iter_mut()
                .zip(&x[off..off + plane])
            {
                *o = v * scale + shift;
            }
        }
    }
    out.debug_assert_finite("batch_norm");
    Ok((
        out,
        BatchNormCache {
            mean,
            rstd,
            training,
        },
    ))
}

pub fn batch_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    cache: &BatchNormCache,
    grad_out: &Tensor,
    need_input: bool,
    need_params: bool,
) -> Result<NormGrads> {
    let (n, c, plane) = bn_layout(input)?;
    input.expect_same_shape("batch_norm_backward", grad_out)?;
    let x = input.data();
    let dy = grad_out.data();
    let g = gamma.data();
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ch in 0..c {
        let (m, r) = (cache.mean[ch] as f64, cache.rstd[ch] as f64);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for (&v, &d) in x[off..off + plane].iter().zip(&dy[off..off + plane]) {
                dgamma[ch] += d as f64 * (v as f64 - m) * r;
                dbeta[ch] += d as f64;
            }
        }
    }
    let dx = need_input.then(|| {
        let mut dx = Tensor::zeros(input.shape());
        for ch in 0..c {
            let (m, r, gc) = (cache.mean[ch] as f64, cache.rstd[ch] as f64, g[ch] as f64);
            for b in 0..n {
                let off = (b * c + ch) * plane;
                let out = &mut dx.data_mut()[off..off + plane];
                for ((o, &v), &d) in out
                    .iter_mut()
                    .zip(&x[off..off + plane])
                    .zip(&dy[off..off + plane])
                {
                    let d = d as f64;
                    *o = if cache.training {
                        let xhat = (v as f64 - m) * r;
                        (gc * r / count * (count * d - dbeta[ch] - xhat * dgamma[ch])) as f32
                    } else {
                        (d * gc * r) as f32
                    };
                }
            }
        }
        dx
    });
    let (dgamma, dbeta): (Vec<f32>, Vec<f32>) = (
        dgamma.iter().map(|&v| v as f32).collect(),
        dbeta.iter().map(|&v| v as f32).collect(),
    );
    Ok(NormGrads {
        input: dx,
        gamma: need_params.then(|| Tensor::new(&[c], dgamma)).transpose()?,
        beta: need_params.then(|| Tensor::new(&[c], dbeta)).transpose()?,
    })
}
