//! ConvNeXt-V2 teacher and student networks, adapters and decoders.

mod adapter;
mod block;
mod config;
mod decoder;
mod layers;
mod network;

pub use adapter::{adapter_param_count, AdapterCache, AdapterModule};
pub use block::{BlockCache, ConvNeXtBlock};
pub use config::ModelConfig;
pub use decoder::{
    image_to_patches, patches_to_image, DecoderPsi, Decoders, ImageDecoder, ImageDecoderCache,
    PsiCache,
};
pub use layers::{Conv2d, Grn, LayerNorm, Linear, INIT_STD};
pub use network::{
    Downsample, GazeHead, GazeModel, HeadCache, Stage, StageFeatures, Stem, TrunkCache,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Parameter;

/// A container of named parameters.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter));

    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.visit_mut(&mut |p| out.push(p));
        out
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |p| p.trainable = trainable);
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }
}

/// Parameter count from the registry. Buffers are counted and inherit the
/// trainability of their module.
pub fn count_params(model: &dyn Module, trainable_only: bool) -> usize {
    let mut n = 0;
    model.visit(&mut |p| {
        if !trainable_only || p.trainable {
            n += p.numel();
        }
    });
    n
}

/// SHA-256 over names, shapes and value bits, in registry order.
pub fn param_digest<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        for &d in p.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Randomly initialized network, deterministic in `seed`.
pub fn build_teacher(config: ModelConfig, seed: u64) -> Result<GazeModel> {
    GazeModel::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The teacher's config with stages 2 to 4 at a quarter of the width.
pub fn student_config_for(teacher: &ModelConfig) -> ModelConfig {
    let d = teacher.stage_dims;
    ModelConfig {
        stage_dims: [d[0], d[1] / 4, d[2] / 4, d[3] / 4],
        adapters_enabled: false,
        ..teacher.clone()
    }
}

/// Student with the teacher's stem and first stage copied bit-exact and
/// fresh later stages.
pub fn build_student_from_teacher(teacher: &GazeModel, seed: u64) -> Result<GazeModel> {
    build_student_with(teacher, student_config_for(&teacher.config), seed)
}

pub fn build_student_with(
    teacher: &GazeModel,
    config: ModelConfig,
    seed: u64,
) -> Result<GazeModel> {
    let tc = &teacher.config;
    if config.stage_dims[0] != tc.stage_dims[0]
        || config.stage_depths[0] != tc.stage_depths[0]
        || config.in_channels != tc.in_channels
        || config.patch_stride != tc.patch_stride
    {
        return Err(Error::Config(format!(
            "student first stage {}×{} does not match teacher {}×{}",
            config.stage_dims[0], config.stage_depths[0], tc.stage_dims[0], tc.stage_depths[0]
        )));
    }
    if tc.adapters_enabled {
        return Err(Error::Config("teacher must not carry adapters".into()));
    }
    let mut student = GazeModel::new(
        ModelConfig {
            adapters_enabled: false,
            ..config
        },
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    student.stem = teacher.stem.clone();
    student.stages[0] = teacher.stages[0].clone();
    for p in student
        .stem
        .parameters_mut()
        .into_iter()
        .chain(student.stages[0].parameters_mut())
    {
        p.zero_grad();
    }
    Ok(student)
}

/// Attaches adapters to every block, freezing all other parameters.
pub fn attach_adapters(model: &mut GazeModel, seed: u64) -> Result<()> {
    model.attach_adapters(&mut ChaCha8Rng::seed_from_u64(seed))
}
