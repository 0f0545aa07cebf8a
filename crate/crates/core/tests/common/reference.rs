//! Straightforward f64 implementations of every kernel and composed graph,
//! written from the definitions with plain loops.

use std::collections::BTreeMap;

use gazekit::model::Module;
use gazekit::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct T {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn from(t: &Tensor) -> Self {
        Self::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("not 4-d: {:?}", self.shape),
        }
    }

    pub fn at4(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        let (_, cc, h, w) = self.dims4();
        self.data[((n * cc + c) * h + i) * w + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> T {
        T::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, o: &T) -> T {
        assert_eq!(self.shape, o.shape);
        T::new(
            &self.shape,
            self.data.iter().zip(&o.data).map(|(a, b)| a + b).collect(),
        )
    }

    pub fn dot(&self, o: &T) -> f64 {
        assert_eq!(self.data.len(), o.data.len());
        self.data.iter().zip(&o.data).map(|(a, b)| a * b).sum()
    }
}

/// Parameter values of a module, by full name.
pub type Params = BTreeMap<String, T>;

pub fn params_of(m: &dyn Module) -> Params {
    m.parameters()
        .into_iter()
        .map(|p| (p.name.clone(), T::from(&p.value)))
        .collect()
}

pub fn get<'a>(p: &'a Params, prefix: &str, name: &str) -> &'a T {
    let key = format!("{prefix}.{name}");
    p.get(&key)
        .unwrap_or_else(|| panic!("missing parameter {key}"))
}

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const GRN_EPS: f64 = 1e-6;
pub const SLOPE: f64 = 0.01;

/// Cross-correlation; "same" padding for stride 1, none otherwise.
pub fn conv2d(x: &T, w: &T, b: &T, stride: usize, groups: usize) -> T {
    let (n, c_in, h, wd) = x.dims4();
    let (c_out, cpg, k, k2) = w.dims4();
    assert_eq!(k, k2);
    assert_eq!(cpg * groups, c_in);
    let pad = if stride == 1 { k / 2 } else { 0 };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let opg = c_out / groups;
    let mut y = T::zeros(&[n, c_out, ho, wo]);
    for bn in 0..n {
        for co in 0..c_out {
            let g = co / opg;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = b.data[co];
                    for ci in 0..cpg {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += w.data[((co * cpg + ci) * k + ki) * k + kj]
                                    * x.at4(bn, g * cpg + ci, ii as usize, jj as usize);
                            }
                        }
                    }
                    y.data[((bn * c_out + co) * ho + oi) * wo + oj] = acc;
                }
            }
        }
    }
    y
}

/// `x·Wᵀ + b` over the last axis.
pub fn linear(x: &T, w: &T, b: &T) -> T {
    let d_in = *x.shape.last().unwrap();
    let d_out = w.shape[0];
    let m = x.data.len() / d_in;
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = d_out;
    let mut y = T::zeros(&shape);
    for r in 0..m {
        for o in 0..d_out {
            y.data[r * d_out + o] = b.data[o]
                + (0..d_in)
                    .map(|i| x.data[r * d_in + i] * w.data[o * d_in + i])
                    .sum::<f64>();
        }
    }
    y
}

fn normalize(vals: &[f64], eps: f64) -> Vec<f64> {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    vals.iter()
        .map(|v| (v - mean) / (var + eps).sqrt())
        .collect()
}

/// Layer norm over channels at each position of `N×C×H×W`.
pub fn layer_norm_channel(x: &T, g: &T, b: &T) -> T {
    let (n, c, h, w) = x.dims4();
    let mut y = T::zeros(&x.shape);
    for bn in 0..n {
        for i in 0..h {
            for j in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| x.at4(bn, ch, i, j)).collect();
                for (ch, v) in normalize(&vals, LN_EPS).into_iter().enumerate() {
                    y.data[((bn * c + ch) * h + i) * w + j] = v * g.data[ch] + b.data[ch];
                }
            }
        }
    }
    y
}

/// Layer norm over the last axis.
pub fn layer_norm_last(x: &T, g: &T, b: &T) -> T {
    let d = *x.shape.last().unwrap();
    let mut y = T::zeros(&x.shape);
    for (row, out) in x.data.chunks(d).zip(y.data.chunks_mut(d)) {
        for (k, v) in normalize(row, LN_EPS).into_iter().enumerate() {
            out[k] = v * g.data[k] + b.data[k];
        }
    }
    y
}

pub fn gelu(x: &T) -> T {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.map(|v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh()))
}

pub fn leaky_relu(x: &T) -> T {
    x.map(|v| {
        super::record_branch(v >= 0.0);
        if v >= 0.0 {
            v
        } else {
            SLOPE * v
        }
    })
}

/// `γ·(x·N) + β + x` with `N_c = ‖x_c‖ / (mean_c ‖x_c‖ + ε)` per sample.
pub fn grn(x: &T, gamma: &T, beta: &T) -> T {
    let (n, c, h, w) = x.dims4();
    let p = h * w;
    let mut y = T::zeros(&x.shape);
    for bn in 0..n {
        let norms: Vec<f64> = (0..c)
            .map(|ch| {
                x.data[(bn * c + ch) * p..][..p]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let denom = norms.iter().sum::<f64>() / c as f64 + GRN_EPS;
        for (ch, norm) in norms.iter().enumerate() {
            let nx = norm / denom;
            for k in 0..p {
                let v = x.data[(bn * c + ch) * p + k];
                y.data[(bn * c + ch) * p + k] = gamma.data[ch] * v * nx + beta.data[ch] + v;
            }
        }
    }
    y
}

fn bn_layout(x: &T) -> (usize, usize, usize) {
    match x.shape[..] {
        [n, c] => (n, c, 1),
        [n, c, h, w] => (n, c, h * w),
        _ => panic!("bad batch norm input {:?}", x.shape),
    }
}

/// Batch norm with batch statistics (biased variance).
pub fn batch_norm_train(x: &T, g: &T, b: &T) -> T {
    let (n, c, p) = bn_layout(x);
    let mut y = T::zeros(&x.shape);
    for ch in 0..c {
        let idx: Vec<usize> = (0..n)
            .flat_map(|bn| (0..p).map(move |k| (bn * c + ch) * p + k))
            .collect();
        let vals: Vec<f64> = idx.iter().map(|&i| x.data[i]).collect();
        for (&i, v) in idx.iter().zip(normalize(&vals, BN_EPS)) {
            y.data[i] = v * g.data[ch] + b.data[ch];
        }
    }
    y
}

/// Batch norm with fixed statistics.
pub fn batch_norm_eval(x: &T, g: &T, b: &T, mean: &T, var: &T) -> T {
    let (n, c, p) = bn_layout(x);
    let mut y = x.clone();
    for bn in 0..n {
        for ch in 0..c {
            for k in 0..p {
                let i = (bn * c + ch) * p + k;
                y.data[i] = (x.data[i] - mean.data[ch]) / (var.data[ch] + BN_EPS).sqrt()
                    * g.data[ch]
                    + b.data[ch];
            }
        }
    }
    y
}

pub fn global_avg_pool(x: &T) -> T {
    let (n, c, h, w) = x.dims4();
    T::new(
        &[n, c],
        x.data
            .chunks(h * w)
            .map(|pl| pl.iter().sum::<f64>() / (h * w) as f64)
            .collect(),
    )
}

pub fn l1(pred: &T, target: &T) -> f64 {
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| {
            super::record_branch(a >= b);
            (a - b).abs()
        })
        .sum();
    sum / pred.data.len() as f64
}

/// Squared error summed over positions whose broadcast mask entry is set,
/// divided by that position count. Written as explicit index loops.
pub fn masked_mse(pred: &T, target: &T, mask: &T) -> f64 {
    let (n, c, h, w) = pred.dims4();
    let (mn, mc, mh, mw) = mask.dims4();
    let (mut sum, mut count) = (0.0, 0usize);
    for bn in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let m = mask.at4(
                        if mn == 1 { 0 } else { bn },
                        if mc == 1 { 0 } else { ch },
                        if mh == 1 { 0 } else { i },
                        if mw == 1 { 0 } else { j },
                    );
                    if m != 0.0 {
                        sum += (pred.at4(bn, ch, i, j) - target.at4(bn, ch, i, j)).powi(2);
                        count += 1;
                    }
                }
            }
        }
    }
    sum / count as f64
}

pub fn patches_to_image(y: &T, patch: usize, channels: usize) -> T {
    let (n, _, h, w) = y.dims4();
    let mut img = T::zeros(&[n, channels, h * patch, w * patch]);
    for bn in 0..n {
        for c in 0..channels {
            for i in 0..h * patch {
                for j in 0..w * patch {
                    let ch = (c * patch + i % patch) * patch + j % patch;
                    img.data[((bn * channels + c) * h * patch + i) * w * patch + j] =
                        y.at4(bn, ch, i / patch, j / patch);
                }
            }
        }
    }
    img
}

fn pointwise(x: &T, p: &Params, prefix: &str) -> T {
    conv2d(x, get(p, prefix, "weight"), get(p, prefix, "bias"), 1, 1)
}

/// Adapter on its own: `fc_up(LReLU(BN(fc_down(f))))`.
pub fn adapter(f: &T, p: &Params, prefix: &str, batch_stats: bool) -> T {
    let down = pointwise(f, p, &format!("{prefix}.fc_down"));
    let (g, b) = (get(p, prefix, "bn.weight"), get(p, prefix, "bn.bias"));
    let normed = if batch_stats {
        batch_norm_train(&down, g, b)
    } else {
        batch_norm_eval(
            &down,
            g,
            b,
            get(p, prefix, "bn.running_mean"),
            get(p, prefix, "bn.running_var"),
        )
    };
    pointwise(&leaky_relu(&normed), p, &format!("{prefix}.fc_up"))
}

/// ConvNeXt-V2 block, with the adapter when its parameters are present.
pub fn block(x: &T, p: &Params, prefix: &str, batch_stats: bool) -> T {
    let c = x.shape[1];
    let h = conv2d(
        x,
        get(p, prefix, "dwconv.weight"),
        get(p, prefix, "dwconv.bias"),
        1,
        c,
    );
    let h = layer_norm_channel(
        &h,
        get(p, prefix, "norm.weight"),
        get(p, prefix, "norm.bias"),
    );
    let h = gelu(&pointwise(&h, p, &format!("{prefix}.pw_expand")));
    let h = grn(&h, get(p, prefix, "grn.gamma"), get(p, prefix, "grn.beta"));
    let mut branch = pointwise(&h, p, &format!("{prefix}.pw_project"));
    let ad = format!("{prefix}.adapter");
    if p.contains_key(&format!("{ad}.fc_down.weight")) {
        branch = branch.add(&adapter(&branch, p, &ad, batch_stats));
    }
    branch.add(x)
}

pub fn psi(z: &T, p: &Params, prefix: &str) -> T {
    pointwise(
        &block(z, p, &format!("{prefix}.block"), true),
        p,
        &format!("{prefix}.fc"),
    )
}

pub fn image_decoder(f: &T, p: &Params, prefix: &str, patch: usize, channels: usize) -> T {
    let y = pointwise(
        &block(f, p, &format!("{prefix}.block"), true),
        p,
        &format!("{prefix}.proj"),
    );
    patches_to_image(&y, patch, channels)
}
