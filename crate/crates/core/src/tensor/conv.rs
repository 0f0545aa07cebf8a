use rayon::prelude::*;

use super::gemm::gemm;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Padding rule for the network: "same" for stride-1 kernels, none for
/// patchify / downsample kernels (stride == kernel).
pub fn conv_padding(kernel: usize, stride: usize) -> usize {
    if stride == 1 {
        kernel / 2
    } else {
        0
    }
}

#[derive(Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        let (n, c_in, h, w) = input.dims4()?;
        let [c_out, c_per_group, k, k2] = *weight.shape() else {
            return Err(shape_err("conv2d weight", weight.shape(), &[0, 0, 0, 0]));
        };
        if k != k2 {
            return Err(Error::Config(format!("conv2d: non-square kernel {k}×{k2}")));
        }
        if stride == 0 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: stride {stride}, groups {groups} incompatible with {c_in}→{c_out} channels"
            )));
        }
        if c_per_group != c_in / groups {
            return Err(shape_err("conv2d", input.shape(), weight.shape()));
        }
        if bias.shape() != [c_out] {
            return Err(shape_err("conv2d bias", bias.shape(), &[c_out]));
        }
        let pad = conv_padding(k, stride);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err("conv2d", input.shape(), weight.shape()));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise_same(&self) -> bool {
        self.groups == self.c_in && self.c_out == self.c_in && self.stride == 1 && self.k % 2 == 1
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }
}

/// 2-D convolution, `weight: (C_out, C_in/groups, k, k)`, `bias: (C_out)`.
///
/// `groups == 1` runs as im2col + GEMM, stride-1 depthwise as a direct
/// kernel; other grouped configurations fall back to a plain loop nest.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    groups: usize,
) -> Result<Tensor> {
    let g = Geometry::new(input, weight, bias, stride, groups)?;
    let mut out = Tensor::zeros(&g.out_shape());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.ho * g.wo;
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();

    if g.groups == 1 {
        out.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(n, y)| {
                let xn = &x[n * in_len..(n + 1) * in_len];
                let p = g.ho * g.wo;
                for (co, row) in y.chunks_mut(p).enumerate() {
                    row.fill(b[co]);
                }
                let ckk = g.c_in * g.k * g.k;
                if g.is_pointwise() {
                    gemm(g.c_out, ckk, p, wt, false, xn, false, y, 1.0);
                } else {
                    let cols = im2col(&g, xn);
                    gemm(g.c_out, ckk, p, wt, false, &cols, false, y, 1.0);
                }
            });
    } else if g.is_depthwise_same() {
        let plane = g.h * g.w;
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, y)| {
                let c = idx % g.c_in;
                y.fill(b[c]);
                depthwise_plane(
                    &g,
                    &x[idx * plane..(idx + 1) * plane],
                    &wt[c * g.k * g.k..(c + 1) * g.k * g.k],
                    y,
                );
            });
    } else {
        grouped_direct_forward(&g, x, wt, b, out.data_mut());
    }
    out.debug_assert_finite("conv2d");
    Ok(out)
}

/// Gradients of [`conv2d`]. Input and parameter gradients are only
/// computed when requested.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    groups: usize,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads> {
    let c_out = weight.shape().first().copied().unwrap_or(0);
    let bias_stub = Tensor::zeros(&[c_out.max(1)]);
    let g = Geometry::new(input, weight, &bias_stub, stride, groups)?;
    if grad_out.shape() != g.out_shape() {
        return Err(shape_err(
            "conv2d_backward",
            grad_out.shape(),
            &g.out_shape(),
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let dy = grad_out.data();
    let in_len = g.c_in * g.h * g.w;
    let p = g.ho * g.wo;
    let out_len = g.c_out * p;

    let mut grads = ConvGrads {
        input: None,
        weight: None,
        bias: None,
    };

    if need_params {
        let mut db = vec![0.0f32; g.c_out];
        for n in 0..g.n {
            for co in 0..g.c_out {
                let row = &dy[n * out_len + co * p..n * out_len + (co + 1) * p];
                db[co] += row.iter().sum::<f32>();
            }
        }
        grads.bias = Some(Tensor::new(&[g.c_out], db)?);
    }

    if g.groups == 1 {
        let ckk = g.c_in * g.k * g.k;
        // Per-sample partials are reduced in index order so results do not
        // depend on the thread schedule.
        let partials: Vec<WeightPartials> = (0..g.n)
            .into_par_iter()
            .map(|n| {
                let xn = &x[n * in_len..(n + 1) * in_len];
                let dyn_ = &dy[n * out_len..(n + 1) * out_len];
                let cols_owned;
                let cols: &[f32] = if g.is_pointwise() {
                    xn
                } else {
                    cols_owned = im2col(&g, xn);
                    &cols_owned
                };
                let dw = need_params.then(|| {
                    let mut dw = vec![0.0; g.c_out * ckk];
                    gemm(g.c_out, p, ckk, dyn_, false, cols, true, &mut dw, 0.0);
                    dw
                });
                let dx = need_input.then(|| {
                    let mut dcols = vec![0.0; ckk * p];
                    gemm(ckk, g.c_out, p, wt, true, dyn_, false, &mut dcols, 0.0);
                    if g.is_pointwise() {
                        dcols
                    } else {
                        col2im(&g, &dcols)
                    }
                });
                (dw, dx)
            })
            .collect();
        if need_params {
            let mut dw = vec![0.0f32; g.c_out * ckk];
            for (part, _) in &partials {
                for (a, b) in dw.iter_mut().zip(part.as_ref().unwrap()) {
                    *a += b;
                }
            }
            grads.weight = Some(Tensor::new(weight.shape(), dw)?);
        }
        if need_input {
            let mut dx = Vec::with_capacity(g.n * in_len);
            for (_, part) in partials {
                dx.extend_from_slice(&part.unwrap());
            }
            grads.input = Some(Tensor::new(input.shape(), dx)?);
        }
    } else if g.is_depthwise_same() {
        let plane = g.h * g.w;
        let kk = g.k * g.k;
        if need_input {
            let mut dx = Tensor::zeros(input.shape());
            dx.data_mut()
                .par_chunks_mut(plane)
                .enumerate()
                .for_each(|(idx, dxp)| {
                    let c = idx % g.c_in;
                    depthwise_plane_input_grad(
                        &g,
                        &dy[idx * plane..(idx + 1) * plane],
                        &wt[c * kk..(c + 1) * kk],
                        dxp,
                    );
                });
            grads.input = Some(dx);
        }
        if need_params {
            let partials: Vec<Vec<f32>> = (0..g.n * g.c_in)
                .into_par_iter()
                .map(|idx| {
                    let mut dw = vec![0.0; kk];
                    depthwise_plane_weight_grad(
                        &g,
                        &x[idx * plane..(idx + 1) * plane],
                        &dy[idx * plane..(idx + 1) * plane],
                        &mut dw,
                    );
                    dw
                })
                .collect();
            let mut dw = vec![0.0f32; g.c_in * kk];
            for (idx, part) in partials.iter().enumerate() {
                let c = idx % g.c_in;
                for (a, b) in dw[c * kk..(c + 1) * kk].iter_mut().zip(part) {
                    *a += b;
                }
            }
            grads.weight = Some(Tensor::new(weight.shape(), dw)?);
        }
    } else {
        let (dx, dw) = grouped_direct_backward(&g, x, wt, dy);
        if need_input {
            grads.input = Some(Tensor::new(input.shape(), dx)?);
        }
        if need_params {
            grads.weight = Some(Tensor::new(weight.shape(), dw)?);
        }
    }
    Ok(grads)
}

/// Per-sample weight and bias gradient contributions.
type WeightPartials = (Option<Vec<f32>>, Option<Vec<f32>>);

/// Unfolds one sample into a `(C·k·k) × (Ho·Wo)` column matrix.
fn im2col(g: &Geometry, x: &[f32]) -> Vec<f32> {
    let p = g.ho * g.wo;
    let mut cols = vec![0.0f32; g.c_in * g.k * g.k * p];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut cols[((c * g.k + ki) * g.k + kj) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            row[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
fn col2im(g: &Geometry, cols: &[f32]) -> Vec<f32> {
    let p = g.ho * g.wo;
    let mut x = vec![0.0f32; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[((c * g.k + ki) * g.k + kj) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Valid output-column range for kernel column `kj` under same padding.
#[inline]
fn col_range(g: &Geometry, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo);
    (lo, hi.max(lo))
}

fn depthwise_plane(g: &Geometry, x: &[f32], w: &[f32], y: &mut [f32]) {
    for ki in 0..g.k {
        for oy in 0..g.ho {
            let iy = (oy + ki) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let src = &x[iy as usize * g.w..][..g.w];
            let dst = &mut y[oy * g.wo..][..g.wo];
            for kj in 0..g.k {
                let wv = w[ki * g.k + kj];
                let (lo, hi) = col_range(g, kj);
                if lo == hi {
                    continue;
                }
                let shift = kj as isize - g.pad as isize;
                let s = &src[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (d, v) in dst[lo..hi].iter_mut().zip(s) {
                    *d += wv * v;
                }
            }
        }
    }
}

fn depthwise_plane_input_grad(g: &Geometry, dy: &[f32], w: &[f32], dx: &mut [f32]) {
    for ki in 0..g.k {
        for oy in 0..g.ho {
            let iy = (oy + ki) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let src = &dy[oy * g.wo..][..g.wo];
            let dst = &mut dx[iy as usize * g.w..][..g.w];
            for kj in 0..g.k {
                let wv = w[ki * g.k + kj];
                let (lo, hi) = col_range(g, kj);
                if lo == hi {
                    continue;
                }
                let shift = kj as isize - g.pad as isize;
                let d = &mut dst[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (a, v) in d.iter_mut().zip(&src[lo..hi]) {
                    *a += wv * v;
                }
            }
        }
    }
}

fn depthwise_plane_weight_grad(g: &Geometry, x: &[f32], dy: &[f32], dw: &mut [f32]) {
    for ki in 0..g.k {
        for oy in 0..g.ho {
            let iy = (oy + ki) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let src = &x[iy as usize * g.w..][..g.w];
            let grad = &dy[oy * g.wo..][..g.wo];
            for kj in 0..g.k {
                let (lo, hi) = col_range(g, kj);
                if lo == hi {
                    continue;
                }
                let shift = kj as isize - g.pad as isize;
                let s = &src[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                dw[ki * g.k + kj] += s.iter().zip(&grad[lo..hi]).map(|(a, b)| a * b).sum::<f32>();
            }
        }
    }
}

fn grouped_direct_forward(g: &Geometry, x: &[f32], w: &[f32], b: &[f32], y: &mut [f32]) {
    let cig = g.c_in / g.groups;
    let cog = g.c_out / g.groups;
    for n in 0..g.n {
        for co in 0..g.c_out {
            let grp = co / cog;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = b[co];
                    for cl in 0..cig {
                        let ci = grp * cig + cl;
                        for ki in 0..g.k {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.k {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w[((co * cig + cl) * g.k + ki) * g.k + kj]
                                    * x[((n * g.c_in + ci) * g.h + iy as usize) * g.w
                                        + ix as usize];
                            }
                        }
                    }
                    y[((n * g.c_out + co) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
}

fn grouped_direct_backward(g: &Geometry, x: &[f32], w: &[f32], dy: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let cig = g.c_in / g.groups;
    let cog = g.c_out / g.groups;
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let grp = co / cog;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let gy = dy[((n * g.c_out + co) * g.ho + oy) * g.wo + ox];
                    for cl in 0..cig {
                        let ci = grp * cig + cl;
                        for ki in 0..g.k {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.k {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let wi = ((co * cig + cl) * g.k + ki) * g.k + kj;
                                let xi =
                                    ((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize;
                                dx[xi] += w[wi] * gy;
                                dw[wi] += x[xi] * gy;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
