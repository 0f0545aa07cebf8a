//! Shared fixtures for the criterion benchmarks.

use gazekit::detect::FeatureGrid;
use gazekit::model::{build_student_from_teacher, build_teacher, GazeModel, ModelConfig};
use gazekit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed-initialized teacher and its student.
pub fn model_pair() -> (GazeModel, GazeModel) {
    let teacher = build_teacher(ModelConfig::teacher(), 0).expect("teacher preset is valid");
    let student = build_student_from_teacher(&teacher, 1).expect("student derives from teacher");
    (teacher, student)
}

/// One `1×1×side×side` image with values in `[0, 1)`.
pub fn image(side: usize) -> Tensor {
    Tensor::rand_uniform(
        &[1, 1, side, side],
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(7),
    )
}

/// A `height×width` grid where roughly `density` of the cells are confident.
pub fn random_grid(height: usize, width: usize, classes: usize, density: f64) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let plane = height * width;
    let mut t = Tensor::zeros(&[1, 5 + classes, height, width]);
    let d = t.data_mut();
    for cell in 0..plane {
        d[cell] = if rng.random_bool(density) { 3.0 } else { -6.0 };
        for c in 0..classes {
            d[(1 + c) * plane + cell] = rng.random_range(-2.0..2.0);
        }
        d[(1 + classes) * plane + cell] = rng.random_range(-2.0..2.0);
        d[(2 + classes) * plane + cell] = rng.random_range(-2.0..2.0);
        d[(3 + classes) * plane + cell] = rng.random_range(8.0..40.0);
        d[(4 + classes) * plane + cell] = rng.random_range(8.0..40.0);
    }
    FeatureGrid::new(t, 8).expect("grid layout is valid")
}
