//! Analytic gradients of every kernel and composed graph against central
//! differences of the f64 reference.

use gazekit::model::{AdapterModule, ConvNeXtBlock, DecoderPsi, ImageDecoder, Module};
use gazekit::tensor::{
    batch_norm, batch_norm_backward, conv2d, conv2d_backward, gelu, gelu_backward, global_avg_pool,
    global_avg_pool_backward, grn, grn_backward, l1_loss, layer_norm, layer_norm_backward,
    leaky_relu, leaky_relu_backward, linear, linear_backward, masked_mse, NormAxis, RunningStats,
    LEAKY_RELU_SLOPE,
};
use gazekit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{self as r, Params, T};
use super::{case_error, forward_gap, probe, randn, randomize, Probe, CASES};

/// Worst results over all cases of one suite.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub cases: usize,
    pub max_err: f64,
    pub worst: String,
    pub max_forward_gap: f64,
    pub probes: usize,
}

impl Outcome {
    fn absorb(&mut self, err: (f64, String), gap: f64, probes: usize) {
        self.cases += 1;
        self.probes += probes;
        if err.0 >= self.max_err {
            self.max_err = err.0;
            self.worst = err.1;
        }
        self.max_forward_gap = self.max_forward_gap.max(gap);
    }

    pub fn passed(&self) -> bool {
        self.cases >= CASES && self.max_err < super::TOL && self.max_forward_gap < 1e-4
    }
}

/// One differentiable input: name, value, analytic gradient.
struct Input<'a> {
    name: String,
    value: &'a Tensor,
    grad: Tensor,
}

fn input<'a>(name: &str, value: &'a Tensor, grad: Tensor) -> Input<'a> {
    Input {
        name: name.to_string(),
        value,
        grad,
    }
}

fn check(
    inputs: &[Input],
    rng: &mut ChaCha8Rng,
    f: &dyn Fn(&[T]) -> f64,
) -> ((f64, String), usize) {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|i| i.value.shape().to_vec()).collect();
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|i| super::to_f64(i.value)).collect();
    let mut eval = |vs: &[Vec<f64>]| {
        let ts: Vec<T> = vs
            .iter()
            .zip(&shapes)
            .map(|(v, s)| T::new(s, v.clone()))
            .collect();
        f(&ts)
    };
    let probes: Vec<Probe> = inputs
        .iter()
        .enumerate()
        .map(|(k, i)| probe(&i.name, &mut values, k, i.grad.data(), rng, &mut eval))
        .collect();
    let n = probes.iter().map(|p| p.analytic.len()).sum();
    (case_error(&probes), n)
}

fn ts(inputs: &[&Tensor]) -> Vec<T> {
    inputs.iter().map(|t| T::from(t)).collect()
}

fn run_cases(mut case: impl FnMut(&mut ChaCha8Rng) -> ((f64, String), f64, usize)) -> Outcome {
    let mut out = Outcome::default();
    for seed in 0..CASES as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (err, gap, probes) = case(&mut rng);
        out.absorb(err, gap, probes);
    }
    out
}

#[derive(Clone, Copy)]
enum ConvKind {
    Dense3,
    Patchify,
    Depthwise7,
    Pointwise,
}

fn conv_suite(kind: ConvKind) -> Outcome {
    run_cases(|rng| {
        let n = rng.random_range(1..=2);
        let (c_in, c_out, k, stride, groups) = match kind {
            ConvKind::Dense3 => (rng.random_range(1..=3), rng.random_range(1..=3), 3, 1, 1),
            ConvKind::Patchify => {
                let k = [2, 4][rng.random_range(0..2)];
                (rng.random_range(1..=3), rng.random_range(1..=3), k, k, 1)
            }
            ConvKind::Depthwise7 => {
                let c = rng.random_range(1..=4);
                (c, c, 7, 1, c)
            }
            ConvKind::Pointwise => (rng.random_range(1..=4), rng.random_range(1..=4), 1, 1, 1),
        };
        let (h, w) = if stride == 1 {
            (rng.random_range(1..=8), rng.random_range(1..=8))
        } else {
            (k * rng.random_range(1..=3), k * rng.random_range(1..=3))
        };
        let x = randn(&[n, c_in, h, w], 1.0, rng);
        let wt = randn(&[c_out, c_in / groups, k, k], 0.5, rng);
        let b = randn(&[c_out], 0.5, rng);
        let y = conv2d(&x, &wt, &b, stride, groups).unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        let g = conv2d_backward(&x, &wt, &dy, stride, groups, true, true).unwrap();
        let f = |v: &[T]| r::conv2d(&v[0], &v[1], &v[2], stride, groups).dot(&T::from(&dy));
        let gap = forward_gap(
            &y,
            &r::conv2d(&T::from(&x), &T::from(&wt), &T::from(&b), stride, groups).data,
        );
        let inputs = [
            input("input", &x, g.input.unwrap()),
            input("weight", &wt, g.weight.unwrap()),
            input("bias", &b, g.bias.unwrap()),
        ];
        let (e, n) = check(&inputs, rng, &f);
        (e, gap, n)
    })
}

pub fn conv_dense() -> Outcome {
    conv_suite(ConvKind::Dense3)
}

pub fn conv_patchify() -> Outcome {
    conv_suite(ConvKind::Patchify)
}

pub fn conv_depthwise() -> Outcome {
    conv_suite(ConvKind::Depthwise7)
}

pub fn conv_pointwise() -> Outcome {
    conv_suite(ConvKind::Pointwise)
}

pub fn linear_kernel() -> Outcome {
    run_cases(|rng| {
        let (m, d_in, d_out) = (
            rng.random_range(1..=4),
            rng.random_range(1..=6),
            rng.random_range(1..=5),
        );
        let x = randn(&[m, d_in], 1.0, rng);
        let wt = randn(&[d_out, d_in], 0.5, rng);
        let b = randn(&[d_out], 0.5, rng);
        let y = linear(&x, &wt, &b).unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        let g = linear_backward(&x, &wt, &dy, true, true).unwrap();
        let f = |v: &[T]| r::linear(&v[0], &v[1], &v[2]).dot(&T::from(&dy));
        let gap = forward_gap(
            &y,
            &f_out(&[&x, &wt, &b], |v| r::linear(&v[0], &v[1], &v[2])),
        );
        let inputs = [
            input("input", &x, g.input.unwrap()),
            input("weight", &wt, g.weight.unwrap()),
            input("bias", &b, g.bias.unwrap()),
        ];
        let (e, n) = check(&inputs, rng, &f);
        (e, gap, n)
    })
}

fn f_out(inputs: &[&Tensor], f: impl Fn(&[T]) -> T) -> Vec<f64> {
    f(&ts(inputs)).data
}

/// Two features make the normalized output nearly a sign function, sharper
/// than the difference step, so cases use at least three.
pub fn layer_norm_kernel(axis: NormAxis) -> Outcome {
    run_cases(|rng| {
        let shape = match axis {
            NormAxis::Channel => vec![
                rng.random_range(1..=2),
                rng.random_range(3..=6),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            ],
            NormAxis::Last => vec![rng.random_range(1..=4), rng.random_range(3..=8)],
        };
        let d = match axis {
            NormAxis::Channel => shape[1],
            NormAxis::Last => shape[1],
        };
        let x = randn(&shape, 1.0, rng);
        let gm = randn(&[d], 1.0, rng);
        let bt = randn(&[d], 1.0, rng);
        let y = layer_norm(&x, &gm, &bt, axis).unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        let g = layer_norm_backward(&x, &gm, &dy, axis, true, true).unwrap();
        let reference = move |v: &[T]| match axis {
            NormAxis::Channel => r::layer_norm_channel(&v[0], &v[1], &v[2]),
            NormAxis::Last => r::layer_norm_last(&v[0], &v[1], &v[2]),
        };
        let gap = forward_gap(&y, &f_out(&[&x, &gm, &bt], reference));
        let f = |v: &[T]| reference(v).dot(&T::from(&dy));
        let inputs = [
            input("input", &x, g.input.unwrap()),
            input("gamma", &gm, g.gamma.unwrap()),
            input("beta", &bt, g.beta.unwrap()),
        ];
        let (e, n) = check(&inputs, rng, &f);
        (e, gap, n)
    })
}

pub fn gelu_kernel() -> Outcome {
    run_cases(|rng| {
        let x = randn(
            &[rng.random_range(1..=3), rng.random_range(1..=7)],
            2.0,
            rng,
        );
        let y = gelu(&x);
        let dy = randn(y.shape(), 1.0, rng);
        let g = gelu_backward(&x, &dy).unwrap();
        let gap = forward_gap(&y, &r::gelu(&T::from(&x)).data);
        let f = |v: &[T]| r::gelu(&v[0]).dot(&T::from(&dy));
        let (e, n) = check(&[input("input", &x, g)], rng, &f);
        (e, gap, n)
    })
}

pub fn leaky_relu_kernel() -> Outcome {
    run_cases(|rng| {
        let x = randn(
            &[rng.random_range(1..=3), rng.random_range(1..=7)],
            1.0,
            rng,
        );
        let y = leaky_relu(&x, LEAKY_RELU_SLOPE);
        let dy = randn(y.shape(), 1.0, rng);
        let g = leaky_relu_backward(&x, &dy, LEAKY_RELU_SLOPE).unwrap();
        let gap = forward_gap(&y, &r::leaky_relu(&T::from(&x)).data);
        let f = |v: &[T]| r::leaky_relu(&v[0]).dot(&T::from(&dy));
        let (e, n) = check(&[input("input", &x, g)], rng, &f);
        (e, gap, n)
    })
}

pub fn grn_kernel() -> Outcome {
    run_cases(|rng| {
        let c = rng.random_range(2..=6);
        let x = randn(
            &[
                rng.random_range(1..=2),
                c,
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            ],
            1.0,
            rng,
        );
        let gm = randn(&[c], 1.0, rng);
        let bt = randn(&[c], 1.0, rng);
        let y = grn(&x, &gm, &bt).unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        let g = grn_backward(&x, &gm, &dy, true, true).unwrap();
        let gap = forward_gap(&y, &f_out(&[&x, &gm, &bt], |v| r::grn(&v[0], &v[1], &v[2])));
        let f = |v: &[T]| r::grn(&v[0], &v[1], &v[2]).dot(&T::from(&dy));
        let inputs = [
            input("input", &x, g.input.unwrap()),
            input("gamma", &gm, g.gamma.unwrap()),
            input("beta", &bt, g.beta.unwrap()),
        ];
        let (e, n) = check(&inputs, rng, &f);
        (e, gap, n)
    })
}

pub fn batch_norm_kernel(training: bool) -> Outcome {
    run_cases(|rng| {
        let c = rng.random_range(1..=4);
        let shape = if rng.random_bool(0.5) {
            vec![rng.random_range(2..=6), c]
        } else {
            vec![
                rng.random_range(1..=3),
                c,
                rng.random_range(1..=3),
                rng.random_range(2..=3),
            ]
        };
        let x = randn(&shape, 1.0, rng);
        let gm = randn(&[c], 1.0, rng);
        let bt = randn(&[c], 1.0, rng);
        let mean = randn(&[c], 0.3, rng);
        let var = Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5));
        let (mut rm, mut rv) = (mean.clone(), var.clone());
        let (y, cache) = batch_norm(
            &x,
            &gm,
            &bt,
            RunningStats {
                mean: &mut rm,
                var: &mut rv,
            },
            training,
        )
        .unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        let g = batch_norm_backward(&x, &gm, &cache, &dy, true, true).unwrap();
        let (tm, tv) = (T::from(&mean), T::from(&var));
        let reference = |v: &[T]| {
            if training {
                r::batch_norm_train(&v[0], &v[1], &v[2])
            } else {
                r::batch_norm_eval(&v[0], &v[1], &v[2], &tm, &tv)
            }
        };
        let gap = forward_gap(&y, &f_out(&[&x, &gm, &bt], reference));
        let f = |v: &[T]| reference(v).dot(&T::from(&dy));
        let inputs = [
            input("input", &x, g.input.unwrap()),
            input("gamma", &gm, g.gamma.unwrap()),
            input("beta", &bt, g.beta.unwrap()),
        ];
        let (e, n) = check(&inputs, rng, &f);
        (e, gap, n)
    })
}

pub fn avg_pool_kernel() -> Outcome {
    run_cases(|rng| {
        let shape = [
            rng.random_range(1..=2),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        ];
        let x = randn(&shape, 1.0, rng);
        let y = global_avg_pool(&x).unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        let g = global_avg_pool_backward(&shape, &dy).unwrap();
        let gap = forward_gap(&y, &r::global_avg_pool(&T::from(&x)).data);
        let f = |v: &[T]| r::global_avg_pool(&v[0]).dot(&T::from(&dy));
        let (e, n) = check(&[input("input", &x, g)], rng, &f);
        (e, gap, n)
    })
}

pub fn l1_kernel() -> Outcome {
    run_cases(|rng| {
        let shape = [rng.random_range(1..=6), 2];
        let pred = randn(&shape, 1.0, rng);
        let target = randn(&shape, 1.0, rng);
        let (loss, g) = l1_loss(&pred, &target).unwrap();
        let tt = T::from(&target);
        let reference = r::l1(&T::from(&pred), &tt);
        let gap = (loss as f64 - reference).abs() / (1.0 + reference.abs());
        let f = |v: &[T]| r::l1(&v[0], &tt);
        let (e, n) = check(&[input("pred", &pred, g)], rng, &f);
        (e, gap, n)
    })
}

pub fn masked_mse_kernel() -> Outcome {
    run_cases(|rng| {
        let (n, c, h, w) = (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let pred = randn(&[n, c, h, w], 1.0, rng);
        let target = randn(&[n, c, h, w], 1.0, rng);
        let hot = rng.random_range(0..h * w);
        let mask = Tensor::from_fn(&[1, 1, h, w], |i| {
            if i == hot || rng.random_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let (loss, g) = masked_mse(&pred, &target, &mask).unwrap();
        let (tt, tm) = (T::from(&target), T::from(&mask));
        let reference = r::masked_mse(&T::from(&pred), &tt, &tm);
        let gap = (loss as f64 - reference).abs() / (1.0 + reference.abs());
        let f = |v: &[T]| r::masked_mse(&v[0], &tt, &tm);
        let (e, n) = check(&[input("pred", &pred, g)], rng, &f);
        (e, gap, n)
    })
}

/// Checks the input gradient and every trainable parameter's gradient of a
/// module against `reference(x, params)`.
fn module_case(
    module: &dyn Module,
    x: &Tensor,
    y: &Tensor,
    dx: Tensor,
    dy: &Tensor,
    rng: &mut ChaCha8Rng,
    reference: &dyn Fn(&T, &Params) -> T,
) -> ((f64, String), f64, usize) {
    let base = r::params_of(module);
    let trainable: Vec<_> = module
        .parameters()
        .into_iter()
        .filter(|p| p.trainable && !p.buffer)
        .collect();
    let names: Vec<String> = trainable.iter().map(|p| p.name.clone()).collect();
    let grads: Vec<Tensor> = trainable
        .iter()
        .map(|p| {
            p.grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();
    let mut inputs = vec![input("input", x, dx)];
    for ((p, g), name) in trainable.iter().zip(grads).zip(&names) {
        inputs.push(input(name, &p.value, g));
    }
    let gap = forward_gap(y, &reference(&T::from(x), &base).data);
    let tdy = T::from(dy);
    let f = |v: &[T]| {
        let mut p = base.clone();
        for (name, t) in names.iter().zip(&v[1..]) {
            p.insert(name.clone(), t.clone());
        }
        reference(&v[0], &p).dot(&tdy)
    };
    let (e, n) = check(&inputs, rng, &f);
    (e, gap, n)
}

pub fn block_graph(with_adapter: bool) -> Outcome {
    run_cases(|rng| {
        let dim = if with_adapter {
            rng.random_range(4..=6)
        } else {
            rng.random_range(3..=5)
        };
        let mut block = ConvNeXtBlock::new("b", dim, rng);
        if with_adapter {
            block.attach_adapter(4, rng).unwrap();
        }
        randomize(&mut block, if with_adapter { 0.6 } else { 0.3 }, rng);
        let x = randn(
            &[
                rng.random_range(1..=2),
                dim,
                rng.random_range(2..=4),
                rng.random_range(1..=4),
            ],
            1.0,
            rng,
        );
        let (y, cache) = block.forward_train(&x, true).unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        block.zero_grad();
        let dx = block.backward(&cache, &dy, true).unwrap().unwrap();
        module_case(&block, &x, &y, dx, &dy, rng, &|x, p| {
            r::block(x, p, "b", true)
        })
    })
}

pub fn adapter_graph(batch_stats: bool) -> Outcome {
    run_cases(|rng| {
        let dim = rng.random_range(4..=8);
        let mut adapter = AdapterModule::new("a", dim, 4, rng);
        randomize(&mut adapter, 0.5, rng);
        let x = randn(
            &[
                rng.random_range(1..=3),
                dim,
                rng.random_range(1..=3),
                rng.random_range(2..=3),
            ],
            1.0,
            rng,
        );
        let (y, cache) = adapter.clone().forward_train(&x, batch_stats).unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        adapter.zero_grad();
        let dx = adapter.backward(&cache, &dy, true).unwrap().unwrap();
        module_case(&adapter, &x, &y, dx, &dy, rng, &|x, p| {
            r::adapter(x, p, "a", batch_stats)
        })
    })
}

pub fn psi_graph() -> Outcome {
    run_cases(|rng| {
        let (ds, dt) = (rng.random_range(3..=5), rng.random_range(2..=5));
        let mut psi = DecoderPsi::new("psi", ds, dt, rng);
        randomize(&mut psi, 0.3, rng);
        let z = randn(
            &[
                rng.random_range(1..=2),
                ds,
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            ],
            1.0,
            rng,
        );
        let (y, cache) = psi.forward_train(&z).unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        psi.zero_grad();
        let dz = psi.backward(&cache, &dy, true).unwrap().unwrap();
        module_case(&psi, &z, &y, dz, &dy, rng, &|x, p| r::psi(x, p, "psi"))
    })
}

pub fn image_decoder_graph() -> Outcome {
    run_cases(|rng| {
        let (dim, patch, channels) = (rng.random_range(3..=5), 2, rng.random_range(1..=2));
        let mut dec = ImageDecoder::new("img", dim, patch, channels, rng);
        randomize(&mut dec, 0.3, rng);
        let f = randn(
            &[
                rng.random_range(1..=2),
                dim,
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            ],
            1.0,
            rng,
        );
        let (y, cache) = dec.forward_train(&f).unwrap();
        let dy = randn(y.shape(), 1.0, rng);
        dec.zero_grad();
        let df = dec.backward(&cache, &dy, true).unwrap().unwrap();
        module_case(&dec, &f, &y, df, &dy, rng, &|x, p| {
            r::image_decoder(x, p, "img", patch, channels)
        })
    })
}

pub type Suite = (&'static str, fn() -> Outcome);

/// Every suite, by name.
pub fn all() -> Vec<Suite> {
    vec![
        ("conv2d dense 3x3", conv_dense),
        ("conv2d patchify", conv_patchify),
        ("conv2d depthwise 7x7", conv_depthwise),
        ("conv2d pointwise", conv_pointwise),
        ("linear", linear_kernel),
        ("layer_norm channel", || {
            layer_norm_kernel(NormAxis::Channel)
        }),
        ("layer_norm last", || layer_norm_kernel(NormAxis::Last)),
        ("gelu", gelu_kernel),
        ("leaky_relu", leaky_relu_kernel),
        ("grn", grn_kernel),
        ("batch_norm train", || batch_norm_kernel(true)),
        ("batch_norm eval", || batch_norm_kernel(false)),
        ("global_avg_pool", avg_pool_kernel),
        ("l1_loss", l1_kernel),
        ("masked_mse", masked_mse_kernel),
        ("block", || block_graph(false)),
        ("block with adapter", || block_graph(true)),
        ("adapter batch stats", || adapter_graph(true)),
        ("adapter running stats", || adapter_graph(false)),
        ("decoder psi", psi_graph),
        ("image decoder", image_decoder_graph),
    ]
}
