//! Reconstruction loss against an explicit loop over masked patches.

use gazekit::distill::{
    generate_mask_with_patch, reconstruction_loss, FeaturePair, MaskSpec, GAMMA,
};
use gazekit::model::{Decoders, ModelConfig};
use gazekit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{randn, randomize};

pub const LOSS_CASES: usize = 100;
const PATCH_STRIDE: usize = 2;

pub struct Case {
    pub images: Tensor,
    pub s3: Tensor,
    pub s4: Tensor,
    pub t3: Tensor,
    pub t4: Tensor,
    pub decoders: Decoders,
    pub mask: MaskSpec,
}

fn config(dims: [usize; 4], in_channels: usize) -> ModelConfig {
    ModelConfig {
        in_channels,
        stage_depths: [1, 1, 1, 1],
        stage_dims: dims,
        patch_stride: PATCH_STRIDE,
        ..ModelConfig::student()
    }
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=2);
    let student = config(
        [
            4,
            4,
            4 * rng.random_range(1..=2),
            4 * rng.random_range(1..=2),
        ],
        c,
    );
    let teacher = config(
        [
            4,
            8,
            4 * rng.random_range(1..=3),
            4 * rng.random_range(1..=3),
        ],
        c,
    );
    let patch = student.total_stride();
    let mut decoders = Decoders::new(&student, &teacher, patch, &mut rng).unwrap();
    randomize(&mut decoders, 0.2, &mut rng);
    let (rows, cols) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let n = rng.random_range(1..=2);
    let (h, w) = (rows * patch, cols * patch);
    let mut mask = if rows * cols > 1 {
        generate_mask_with_patch(rows, cols, rng.random_range(0.2..0.8), patch, seed).unwrap()
    } else {
        MaskSpec::all_visible(rows, cols, patch)
    };
    if mask.masked_count() == 0 {
        mask.grid[0] = true;
    }
    let [_, _, d3, d4] = student.stage_dims;
    let [_, _, e3, e4] = teacher.stage_dims;
    Case {
        images: Tensor::rand_uniform(&[n, c, h, w], 0.0, 1.0, &mut rng),
        s3: randn(&[n, d3, h / (patch / 2), w / (patch / 2)], 1.0, &mut rng),
        s4: randn(&[n, d4, h / patch, w / patch], 1.0, &mut rng),
        t3: randn(&[n, e3, h / (patch / 2), w / (patch / 2)], 1.0, &mut rng),
        t4: randn(&[n, e4, h / patch, w / patch], 1.0, &mut rng),
        decoders,
        mask,
    }
}

impl Case {
    pub fn loss(&self) -> f64 {
        let student = FeaturePair {
            f3: &self.s3,
            f4: &self.s4,
        };
        let teacher = FeaturePair {
            f3: &self.t3,
            f4: &self.t4,
        };
        reconstruction_loss(&self.images, student, teacher, &self.decoders, &self.mask)
            .unwrap()
            .total as f64
    }

    fn predictions(&self) -> [Tensor; 3] {
        [
            self.decoders.image.forward(&self.s4).unwrap(),
            self.decoders.psi3.forward(&self.s3).unwrap(),
            self.decoders.psi4.forward(&self.s4).unwrap(),
        ]
    }

    /// Visits every element of `target` under a masked patch.
    fn masked_sq_error(&self, pred: &Tensor, target: &Tensor) -> f64 {
        let (n, c, h, w) = target.dims4().unwrap();
        let per_patch = h / self.mask.rows;
        let (mut sum, mut count) = (0.0f64, 0usize);
        for r in 0..self.mask.rows {
            for q in 0..self.mask.cols {
                if !self.mask.is_masked(r, q) {
                    continue;
                }
                for b in 0..n {
                    for ch in 0..c {
                        for i in r * per_patch..(r + 1) * per_patch {
                            for j in q * per_patch..(q + 1) * per_patch {
                                let k = ((b * c + ch) * h + i) * w + j;
                                sum += (pred.data()[k] as f64 - target.data()[k] as f64).powi(2);
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        sum / count as f64
    }

    pub fn brute_force(&self) -> f64 {
        let [img, p3, p4] = self.predictions();
        self.masked_sq_error(&img, &self.images)
            + GAMMA as f64
                * (self.masked_sq_error(&p3, &self.t3) + self.masked_sq_error(&p4, &self.t4))
    }

    /// Adds noise to every target element outside the masked patches.
    pub fn perturb_visible(&mut self, rng: &mut ChaCha8Rng) {
        let mask = self.mask.clone();
        for t in [&mut self.images, &mut self.t3, &mut self.t4] {
            let (n, c, h, w) = t.dims4().unwrap();
            let per_patch = h / mask.rows;
            let d = t.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            if !mask.is_masked(i / per_patch, j / per_patch) {
                                d[((b * c + ch) * h + i) * w + j] += rng.random_range(-5.0..5.0);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Replaces every target with the decoders' own predictions.
    pub fn make_exact(&mut self) {
        let [img, p3, p4] = self.predictions();
        self.images = img;
        self.t3 = p3;
        self.t4 = p4;
    }
}

pub struct LossOutcome {
    pub cases: usize,
    pub max_oracle_gap: f64,
    pub max_invariance_gap: f64,
    pub max_fixed_point: f64,
}

impl LossOutcome {
    pub fn passed(&self) -> bool {
        self.cases >= LOSS_CASES
            && self.max_oracle_gap <= 1e-5
            && self.max_invariance_gap == 0.0
            && self.max_fixed_point == 0.0
    }
}

pub fn run() -> LossOutcome {
    let mut out = LossOutcome {
        cases: 0,
        max_oracle_gap: 0.0,
        max_invariance_gap: 0.0,
        max_fixed_point: 0.0,
    };
    for seed in 0..LOSS_CASES as u64 {
        let mut case = random_case(seed);
        let (loss, oracle) = (case.loss(), case.brute_force());
        out.max_oracle_gap = out
            .max_oracle_gap
            .max((loss - oracle).abs() / oracle.abs().max(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        case.perturb_visible(&mut rng);
        out.max_invariance_gap = out.max_invariance_gap.max((case.loss() - loss).abs());
        case.make_exact();
        out.max_fixed_point = out.max_fixed_point.max(case.loss().abs());
        out.cases += 1;
    }
    out
}
