//! Weight files, dataset manifests, image codecs and the synthetic eye
//! generator.

mod image;
mod manifest;
mod synth;
mod weights;

pub use image::{quantize, read_image, read_pgm, read_png, resize_bilinear, write_pgm};
pub use manifest::{load_dataset, read_manifest, write_manifest, LoadOptions, ManifestRecord};
pub use synth::{
    all_subjects, render_eye, sample_gaze, split_for, subject_params, synth_generate, synthesize,
    RenderInfo, SubjectParams, SyntheticEyeConfig,
};
pub use weights::{
    assign_tensors, decode_tensors, encode_tensors, infer_config, load_model, load_weights,
    model_from_tensors, read_tensors, save_weights, write_tensors, MAGIC, VERSION,
};
