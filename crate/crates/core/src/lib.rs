//! Compact gaze estimation on CPU.
//!
//! The crate covers the whole pipeline: a ConvNeXt-V2 teacher and its
//! channel-quartered student ([`model`]), masked-autoencoder feature
//! distillation ([`distill`]), adapter fine-tuning for generalized and
//! few-shot personalized gaze regression ([`gaze`]), gaze-directed grid
//! detection filtering ([`detect`]), weight/dataset I/O with a synthetic eye
//! generator ([`io`]) and a latency harness ([`bench`]).

pub mod bench;
pub mod detect;
pub mod distill;
pub mod error;
pub mod gaze;
pub mod io;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
