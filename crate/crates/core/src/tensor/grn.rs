use super::Tensor;
use crate::error::{shape_err, Result};

/// Added to the cross-channel mean norm before dividing.
pub const GRN_EPS: f32 = 1e-6;

#[derive(Debug)]
pub struct GrnGrads {
    pub input: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

/// Spatial L2 norm per channel and the normalized response per channel for
/// one `C×P` sample.
fn responses(x: &[f32], c: usize, plane: usize) -> (Vec<f32>, Vec<f32>, f32) {
    let norms: Vec<f32> = (0..c)
        .map(|ch| {
            x[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|v| v * v)
                .sum::<f32>()
                .sqrt()
        })
        .collect();
    let denom = norms.iter().sum::<f32>() / c as f32 + GRN_EPS;
    let resp = norms.iter().map(|g| g / denom).collect();
    (norms, resp, denom)
}

fn check(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err("grn", input.shape(), gamma.shape()));
    }
    Ok((n, c, h * w))
}

/// Global response normalization:
/// `y = gamma·(x·N_c) + beta + x` with `N_c = ‖x_c‖ / (mean_c ‖x_c‖ + 1e-6)`.
pub fn grn(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (_, c, plane) = check(input, gamma, beta)?;
    let mut out = input.clone();
    let (g, b) = (gamma.data(), beta.data());
    if g.iter().all(|&v| v == 0.0) && b.iter().all(|&v| v == 0.0) {
        return Ok(out);
    }
    for (x, y) in input
        .data()
        .chunks(c * plane)
        .zip(out.data_mut().chunks_mut(c * plane))
    {
        let (_, resp, _) = responses(x, c, plane);
        for ch in 0..c {
            let scale = 1.0 + g[ch] * resp[ch];
            for (o, v) in y[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .zip(&x[ch * plane..(ch + 1) * plane])
            {
                *o = v * scale + b[ch];
            }
        }
    }
    out.debug_assert_finite("grn");
    Ok(out)
}

pub fn grn_backward(
    input: &Tensor,
    gamma: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
    need_params: bool,
) -> Result<GrnGrads> {
    let (_, c, plane) = check(input, gamma, gamma)?;
    input.expect_same_shape("grn_backward", grad_out)?;
    let g = gamma.data();
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let block = c * plane;
    for (bi, (x, dy)) in input
        .data()
        .chunks(block)
        .zip(grad_out.data().chunks(block))
        .enumerate()
    {
        let (norms, resp, denom) = responses(x, c, plane);
        // s_c = Σ_p dy·x over the channel's plane
        let s: Vec<f32> = (0..c)
            .map(|ch| {
                x[ch * plane..(ch + 1) * plane]
                    .iter()
                    .zip(&dy[ch * plane..(ch + 1) * plane])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        for ch in 0..c {
            dgamma[ch] += s[ch] * resp[ch];
            dbeta[ch] += dy[ch * plane..(ch + 1) * plane].iter().sum::<f32>();
        }
        if let Some(dx) = dx.as_mut() {
            // dL/dN_c = gamma_c·s_c; N_c = G_c / denom, denom = mean(G) + eps
            let d_resp: Vec<f32> = (0..c).map(|ch| g[ch] * s[ch]).collect();
            let cross: f32 = d_resp.iter().zip(&norms).map(|(a, b)| a * b).sum::<f32>()
                / (denom * denom * c as f32);
            let out = &mut dx.data_mut()[bi * block..(bi + 1) * block];
            for ch in 0..c {
                let d_norm = d_resp[ch] / denom - cross;
                let via_norm = if norms[ch] > 0.0 {
                    d_norm / norms[ch]
                } else {
                    0.0
                };
                let direct = 1.0 + g[ch] * resp[ch];
                let xs = &x[ch * plane..(ch + 1) * plane];
                let gs = &dy[ch * plane..(ch + 1) * plane];
                for ((o, v), d) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(xs).zip(gs) {
                    *o = d * direct + via_norm * v;
                }
            }
        }
    }
    Ok(GrnGrads {
        input: dx,
        gamma: need_params.then(|| Tensor::new(&[c], dgamma)).transpose()?,
        beta: need_params.then(|| Tensor::new(&[c], dbeta)).transpose()?,
    })
}
