use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{reconstruction_loss_backward, FeaturePair, LossParts};
use super::mask::{generate_mask_with_patch, MaskSpec, DEFAULT_MASK_RATIO, DEFAULT_PATCH};
use crate::error::{Error, Result};
use crate::model::{Decoders, GazeModel, Module};
use crate::tensor::{AdamW, AdamWConfig, Tensor};

pub const LOSS_CSV_HEADER: &str = "step,total,img_term,feat3_term,feat4_term";

/// One masked batch with teacher targets computed on the unmasked images.
#[derive(Clone, Debug)]
pub struct DistillBatch {
    pub images: Tensor,
    pub mask: MaskSpec,
    pub teacher_f3: Tensor,
    pub teacher_f4: Tensor,
}

impl DistillBatch {
    pub fn new(teacher: &GazeModel, images: Tensor, mask: MaskSpec) -> Result<Self> {
        let [_, _, f3, f4] = teacher.forward_stages(&images)?;
        Ok(Self {
            images,
            mask,
            teacher_f3: f3,
            teacher_f4: f4,
        })
    }
}

/// Freezes the parts of the student that are inherited from the teacher
/// (stem and stage 1) and the gaze head, which the reconstruction loss
/// never reaches. Everything else becomes trainable.
pub fn freeze_for_distillation(student: &mut GazeModel) {
    student.set_trainable(true);
    student.stem.set_trainable(false);
    student.stages[0].set_trainable(false);
    student.head.set_trainable(false);
}

fn check_frozen(module: &dyn Module) -> Result<()> {
    let mut bad = None;
    module.visit(&mut |p| {
        if !p.trainable && p.grad.is_some() && bad.is_none() {
            bad = Some(p.name.clone());
        }
    });
    match bad {
        Some(name) => Err(Error::FrozenGradient(name)),
        None => Ok(()),
    }
}

/// One optimizer step on the reconstruction loss. The teacher only enters
/// through the precomputed targets in `batch`.
pub fn distill_step(
    student: &mut GazeModel,
    decoders: &mut Decoders,
    batch: &DistillBatch,
    optimizer: &mut AdamW,
) -> Result<LossParts> {
    student.zero_grad();
    decoders.zero_grad();
    let masked = batch.mask.apply(&batch.images)?;
    let (feats, cache) = student.forward_trunk_train(&masked, true)?;
    let grads = reconstruction_loss_backward(
        &batch.images,
        FeaturePair {
            f3: &feats[2],
            f4: &feats[3],
        },
        FeaturePair {
            f3: &batch.teacher_f3,
            f4: &batch.teacher_f4,
        },
        decoders,
        &batch.mask,
    )?;
    student.backward_trunk(&cache, [None, None, Some(&grads.d_f3), Some(&grads.d_f4)])?;
    check_frozen(student)?;
    check_frozen(decoders)?;
    optimizer.step(
        student
            .parameters_mut()
            .into_iter()
            .chain(decoders.parameters_mut()),
    )?;
    Ok(grads.parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub mask_ratio: f32,
    pub patch_size: usize,
    pub seed: u64,
    /// Stops early after this many steps in total.
    pub max_steps: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            mask_ratio: DEFAULT_MASK_RATIO,
            patch_size: DEFAULT_PATCH,
            seed: 0,
            max_steps: None,
        }
    }
}

/// Distillation state. Everything a step consumes (batch order and mask) is
/// derived from `(seed, step)`, so a run restored from a checkpoint continues
/// bit-exactly.
pub struct Distiller {
    pub config: DistillConfig,
    pub student: GazeModel,
    pub decoders: Decoders,
    pub optimizer: AdamW,
    pub step: usize,
    images: Tensor,
    teacher_f3: Tensor,
    teacher_f4: Tensor,
}

const STEP_KEY: &str = "distill.step";
const TEACHER_CHUNK: usize = 16;

impl Distiller {
    /// `images` is `N×C×H×W`; teacher targets for all of it are computed
    /// once up front since the teacher never changes.
    pub fn new(
        teacher: &GazeModel,
        mut student: GazeModel,
        decoders: Decoders,
        images: Tensor,
        config: DistillConfig,
    ) -> Result<Self> {
        let (n, _, h, w) = images.dims4()?;
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if h % config.patch_size != 0 || w % config.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "images {h}×{w} are not a whole number of {}-pixel patches",
                config.patch_size
            )));
        }
        let (mut f3s, mut f4s) = (Vec::new(), Vec::new());
        for start in (0..n).step_by(TEACHER_CHUNK) {
            let idx: Vec<usize> = (start..(start + TEACHER_CHUNK).min(n)).collect();
            let [_, _, f3, f4] = teacher.forward_stages(&images.select_batch(&idx)?)?;
            f3s.push(f3);
            f4s.push(f4);
        }
        freeze_for_distillation(&mut student);
        let optimizer = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Self {
            teacher_f3: Tensor::stack_batch(&f3s.iter().collect::<Vec<_>>())?,
            teacher_f4: Tensor::stack_batch(&f4s.iter().collect::<Vec<_>>())?,
            config,
            student,
            decoders,
            optimizer,
            step: 0,
            images,
        })
    }

    /// `images` are single `C×H×W` samples.
    pub fn from_samples(
        teacher: &GazeModel,
        student: GazeModel,
        decoders: Decoders,
        images: &[&Tensor],
        config: DistillConfig,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let batches: Vec<Tensor> = images
            .iter()
            .map(|t| crate::gaze::as_batch(t))
            .collect::<Result<_>>()?;
        Self::new(
            teacher,
            student,
            decoders,
            Tensor::stack_batch(&batches.iter().collect::<Vec<_>>())?,
            config,
        )
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.config.epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng
    }

    /// Batch indices and mask for `step`.
    pub fn plan(&self, step: usize) -> Result<(Vec<usize>, MaskSpec)> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut self.rng((1 << 32) + epoch as u64));
        let bs = self.config.batch_size;
        let idx = order[pos * bs..((pos + 1) * bs).min(order.len())].to_vec();
        let (_, _, h, w) = self.images.dims4()?;
        let p = self.config.patch_size;
        let mask_seed = self.rng(step as u64).random();
        let mask = generate_mask_with_patch(h / p, w / p, self.config.mask_ratio, p, mask_seed)?;
        Ok((idx, mask))
    }

    pub fn batch(&self, step: usize) -> Result<DistillBatch> {
        let (idx, mask) = self.plan(step)?;
        Ok(DistillBatch {
            images: self.images.select_batch(&idx)?,
            mask,
            teacher_f3: self.teacher_f3.select_batch(&idx)?,
            teacher_f4: self.teacher_f4.select_batch(&idx)?,
        })
    }

    pub fn step_once(&mut self) -> Result<LossParts> {
        let batch = self.batch(self.step)?;
        let parts = distill_step(
            &mut self.student,
            &mut self.decoders,
            &batch,
            &mut self.optimizer,
        )?;
        self.step += 1;
        Ok(parts)
    }

    /// Steps until [`Self::total_steps`], reporting each step's loss.
    pub fn run(&mut self, mut on_step: impl FnMut(usize, &LossParts)) -> Result<Vec<LossParts>> {
        let mut out = Vec::new();
        while self.step < self.total_steps() {
            let parts = self.step_once()?;
            on_step(self.step, &parts);
            out.push(parts);
        }
        Ok(out)
    }

    /// Student, decoder and optimizer state plus the step counter.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .student
            .parameters()
            .into_iter()
            .chain(self.decoders.parameters())
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        out.extend(self.optimizer.state_tensors());
        out.push((
            STEP_KEY.into(),
            Tensor::full(&[1], f32::from_bits(self.step as u32)),
        ));
        out
    }

    pub fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let own = |prefix_ok: &dyn Fn(&str) -> bool| -> Vec<(String, Tensor)> {
            entries
                .iter()
                .filter(|(n, _)| prefix_ok(n))
                .cloned()
                .collect()
        };
        let is_decoder = |n: &str| n.starts_with("decoder.");
        let is_state = |n: &str| n.starts_with("adamw.") || n == STEP_KEY;
        crate::io::assign_tensors(&mut self.decoders, &own(&|n| is_decoder(n)), true)?;
        crate::io::assign_tensors(
            &mut self.student,
            &own(&|n| !is_decoder(n) && !is_state(n)),
            true,
        )?;
        self.optimizer.load_state_tensors(entries)?;
        let step = entries
            .iter()
            .find(|(n, _)| n == STEP_KEY)
            .ok_or_else(|| Error::NameSet(format!("checkpoint lacks `{STEP_KEY}`")))?;
        self.step = step.1.data()[0].to_bits() as usize;
        Ok(())
    }
}

/// Rows are numbered from `first_step`, so a resumed run continues the count.
pub fn write_loss_csv(path: &Path, losses: &[LossParts], first_step: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOSS_CSV_HEADER}")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(
            f,
            "{},{},{},{},{}",
            first_step + i,
            l.total,
            l.image,
            l.feat3,
            l.feat4
        )?;
    }
    f.flush()?;
    Ok(())
}
