#![allow(dead_code)]

pub mod detectsuite;
pub mod gradsuite;
pub mod losssuite;
pub mod reference;

use std::cell::RefCell;

use gazekit::model::Module;
use gazekit::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Central-difference step.
pub const H: f64 = 1e-3;
/// Largest accepted relative gradient error.
pub const TOL: f64 = 1e-3;
/// Random cases per gradient check.
pub const CASES: usize = 20;
/// Coordinates probed per tensor per case.
const PROBES: usize = 16;

thread_local! {
    static BRANCHES: RefCell<Option<Vec<bool>>> = const { RefCell::new(None) };
}

/// Records which side of a kink a piecewise function evaluated on.
pub fn record_branch(positive: bool) {
    BRANCHES.with(|b| {
        if let Some(v) = b.borrow_mut().as_mut() {
            v.push(positive);
        }
    });
}

fn traced(f: &mut dyn FnMut() -> f64) -> (f64, Vec<bool>) {
    BRANCHES.with(|b| *b.borrow_mut() = Some(Vec::new()));
    let y = f();
    let branches = BRANCHES.with(|b| b.borrow_mut().take().unwrap_or_default());
    (y, branches)
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    })
}

/// Fills every parameter with noise; buffers get plausible statistics.
pub fn randomize(m: &mut dyn Module, std: f64, rng: &mut ChaCha8Rng) {
    m.visit_mut(&mut |p| {
        let shape = p.value.shape().to_vec();
        p.value = if p.name.ends_with("running_var") {
            Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5))
        } else if p.buffer {
            randn(&shape, 0.3, rng)
        } else {
            randn(&shape, std, rng)
        };
    });
}

/// Central differences of `f` at `coords` of `x`. Coordinates whose two
/// probes land on different sides of a kink are skipped (`None`).
pub fn central_diff(
    x: &mut [f64],
    coords: &[usize],
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> Vec<Option<f64>> {
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + H;
            let (fp, bp) = traced(&mut || f(x));
            x[i] = orig - H;
            let (fm, bm) = traced(&mut || f(x));
            x[i] = orig;
            (bp == bm).then(|| (fp - fm) / (2.0 * H))
        })
        .collect()
}

pub fn probe_coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= PROBES {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, PROBES).into_vec();
        v.sort_unstable();
        v
    }
}

/// One tensor's analytic and numeric gradients at the probed coordinates.
pub struct Probe {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖, 10⁻³·G)`,
/// where `G` is the largest gradient norm in the case. Returns the error and
/// the worst tensor's name.
pub fn case_error(probes: &[Probe]) -> (f64, String) {
    let g = probes
        .iter()
        .map(|p| norm(&p.analytic).max(norm(&p.numeric)))
        .fold(0.0, f64::max);
    let floor = (1e-3 * g).max(1e-12);
    probes
        .iter()
        .map(|p| {
            let diff: Vec<f64> = p
                .analytic
                .iter()
                .zip(&p.numeric)
                .map(|(a, n)| a - n)
                .collect();
            let denom = norm(&p.analytic).max(norm(&p.numeric)).max(floor);
            (norm(&diff) / denom, p.name.clone())
        })
        .fold(
            (0.0, String::new()),
            |acc, e| if e.0 > acc.0 { e } else { acc },
        )
}

/// Probes tensor `k` of `inputs` against `analytic` (the full gradient of
/// that tensor) with the scalar reference `f`.
pub fn probe(
    name: &str,
    inputs: &mut [Vec<f64>],
    k: usize,
    analytic: &[f32],
    rng: &mut ChaCha8Rng,
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
) -> Probe {
    assert_eq!(inputs[k].len(), analytic.len(), "{name}: gradient length");
    let coords = probe_coords(analytic.len(), rng);
    let mut x = std::mem::take(&mut inputs[k]);
    let numeric = central_diff(&mut x, &coords, &mut |xs| {
        let mut all = inputs.to_vec();
        all[k] = xs.to_vec();
        f(&all)
    });
    inputs[k] = x;
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for (&i, v) in coords.iter().zip(numeric) {
        if let Some(v) = v {
            a.push(analytic[i] as f64);
            n.push(v);
        }
    }
    Probe {
        name: name.to_string(),
        analytic: a,
        numeric: n,
    }
}

/// Largest `|a − b| / (1 + max|b|)` between a kernel output and its
/// reference.
pub fn forward_gap(ours: &Tensor, reference: &[f64]) -> f64 {
    assert_eq!(ours.numel(), reference.len());
    let scale = 1.0 + reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ours.data()
        .iter()
        .zip(reference)
        .map(|(&a, b)| (a as f64 - b).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}
