//! Masked-autoencoder distillation of a teacher into the student.

mod loss;
mod mask;
mod run;

pub use loss::{
    reconstruction_loss, reconstruction_loss_backward, FeaturePair, LossGrads, LossParts, GAMMA,
};
pub use mask::{
    generate_mask, generate_mask_with_patch, mask_to_stage, MaskSpec, DEFAULT_MASK_RATIO,
    DEFAULT_PATCH,
};
pub use run::{
    distill_step, freeze_for_distillation, write_loss_csv, DistillBatch, DistillConfig, Distiller,
    LOSS_CSV_HEADER,
};
