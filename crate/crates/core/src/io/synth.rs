//! Synthetic eye images with exact gaze labels.
//!
//! A grayscale eye is drawn as an elliptic aperture showing the sclera, an
//! iris disk and a darker pupil. The iris center moves linearly with gaze
//! by a per-subject gain and offset, so subjects with unusual anatomy are
//! systematically mispredicted by a model that has not seen them. Optional
//! eyelid occlusion and a glare spot stress the estimator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::{quantize, write_pgm};
use super::manifest::{write_manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::gaze::{Gaze, GazeDataset, GazeSample, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub id: String,
    /// Iris radius in pixels.
    pub iris_radius: f32,
    /// Aperture height over width.
    pub eye_open: f32,
    /// Iris displacement per radian of (yaw, pitch), in pixels.
    pub gain: (f32, f32),
    /// Iris displacement at zero gaze, in pixels (x right, y down).
    pub offset: (f32, f32),
    pub glare_prob: f32,
    pub blink_prob: f32,
    pub skin_level: f32,
    pub sclera_level: f32,
    pub iris_level: f32,
    /// Center of this subject's gaze distribution.
    pub gaze_bias: Gaze,
    pub personal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEyeConfig {
    pub resolution: usize,
    pub noise_std: f32,
    pub seed: u64,
    pub glare_prob: f32,
    pub blink_prob: f32,
    /// Extra subjects with atypical anatomy, all in the personal split.
    pub personal_subjects: usize,
    /// Largest absolute pitch or yaw, in radians.
    pub gaze_range: f32,
}

impl Default for SyntheticEyeConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            noise_std: 0.02,
            seed: 0,
            glare_prob: 0.1,
            blink_prob: 0.05,
            personal_subjects: 1,
            gaze_range: 0.45,
        }
    }
}

impl SyntheticEyeConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f32| (0.0..=1.0).contains(&p);
        if self.resolution < 8 || !prob(self.glare_prob) || !prob(self.blink_prob) {
            return Err(Error::Config(format!("bad synthetic config {self:?}")));
        }
        if self.noise_std.is_nan()
            || self.noise_std < 0.0
            || self.gaze_range.is_nan()
            || self.gaze_range <= 0.0
            || self.gaze_range >= 1.2
        {
            return Err(Error::Config(format!("bad synthetic config {self:?}")));
        }
        Ok(())
    }
}

fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Anatomy of subject `index`. Personal subjects get a displaced, larger
/// iris, a wider gain and different tones.
pub fn subject_params(config: &SyntheticEyeConfig, index: usize, personal: bool) -> SubjectParams {
    let s = config.resolution as f32;
    let mut rng = subject_rng(config.seed, (index as u64) << 1 | personal as u64);
    let mut jitter = |spread: f32| rng.random_range(-spread..=spread);
    let (gx, gy) = (0.47 * s, 0.35 * s);
    let mut p = SubjectParams {
        id: if personal {
            format!("p{index:02}")
        } else {
            format!("s{index:02}")
        },
        iris_radius: s * (0.15 + jitter(0.008)),
        eye_open: 0.56 + jitter(0.04),
        gain: (gx * (1.0 + jitter(0.04)), gy * (1.0 + jitter(0.04))),
        offset: (jitter(0.015 * s), jitter(0.015 * s)),
        glare_prob: config.glare_prob,
        blink_prob: config.blink_prob,
        skin_level: 0.42 + jitter(0.04),
        sclera_level: 0.86 + jitter(0.03),
        iris_level: 0.32 + jitter(0.04),
        gaze_bias: Gaze::new(jitter(0.15), jitter(0.15)),
        personal,
    };
    if personal {
        p.iris_radius = s * 0.17;
        p.gain = (gx * 1.1, gy * 1.1);
        p.offset = (0.06 * s, -0.045 * s);
        p.skin_level = 0.3;
        p.iris_level = 0.22;
    }
    p
}

/// Where a render put its features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderInfo {
    pub iris_center: (f32, f32),
    pub blink: bool,
    pub glare: bool,
}

#[inline]
fn coverage(signed_dist: f32) -> f32 {
    (0.5 - signed_dist).clamp(0.0, 1.0)
}

/// Renders one `1×S×S` eye, quantized to 8-bit levels.
pub fn render_eye<R: Rng + ?Sized>(
    resolution: usize,
    noise_std: f32,
    subject: &SubjectParams,
    gaze: Gaze,
    rng: &mut R,
) -> (Tensor, RenderInfo) {
    let s = resolution as f32;
    let (cx, cy) = (s / 2.0, s / 2.0);
    let a = 0.42 * s;
    let b = a * subject.eye_open;
    let ix = cx + subject.gain.0 * gaze.yaw + subject.offset.0;
    let iy = cy - subject.gain.1 * gaze.pitch + subject.offset.1;
    let r = subject.iris_radius;
    let rp = 0.45 * r;
    let blink = rng.random::<f32>() < subject.blink_prob;
    let lid_y = if blink {
        cy - b + rng.random_range(0.2..0.6) * 2.0 * b
    } else {
        f32::NEG_INFINITY
    };
    let glare = rng.random::<f32>() < subject.glare_prob;
    let (gx, gy) = if glare {
        (ix + rng.random_range(-r..r), iy + rng.random_range(-r..r))
    } else {
        (0.0, 0.0)
    };
    let sigma = 0.03 * s;
    let noise = Normal::new(0.0f32, noise_std.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(resolution * resolution);
    for y in 0..resolution {
        let py = y as f32 + 0.5;
        for x in 0..resolution {
            let px = x as f32 + 0.5;
            let e = (((px - cx) / a).powi(2) + ((py - cy) / b).powi(2)).sqrt();
            let aperture = coverage((e - 1.0) * b);
            let visible = aperture * coverage(lid_y - py);
            let d = ((px - ix).powi(2) + (py - iy).powi(2)).sqrt();
            let iris = coverage(d - r);
            let pupil = coverage(d - rp);
            let mut eye = subject.sclera_level * (1.0 - iris) + subject.iris_level * iris;
            eye = eye * (1.0 - pupil) + 0.06 * pupil;
            let mut v = subject.skin_level * (1.0 - visible) + eye * visible;
            if glare {
                v += 0.8 * (-((px - gx).powi(2) + (py - gy).powi(2)) / (2.0 * sigma * sigma)).exp();
            }
            if noise_std > 0.0 {
                v += noise.sample(rng);
            }
            data.push(v);
        }
    }
    let data = quantize(&data)
        .into_iter()
        .map(|q| q as f32 / 255.0)
        .collect();
    (
        Tensor::new(&[1, resolution, resolution], data).expect("square image"),
        RenderInfo {
            iris_center: (ix, iy),
            blink,
            glare,
        },
    )
}

/// Label drawn from a mixture: mostly around the subject's bias, otherwise
/// uniform over the whole range.
pub fn sample_gaze<R: Rng + ?Sized>(subject: &SubjectParams, range: f32, rng: &mut R) -> Gaze {
    let local = Normal::new(0.0f32, 0.12).expect("finite std");
    let (p, y) = if rng.random::<f32>() < 0.6 {
        (
            subject.gaze_bias.pitch + local.sample(rng),
            subject.gaze_bias.yaw + local.sample(rng),
        )
    } else {
        (
            rng.random_range(-range..=range),
            rng.random_range(-range..=range),
        )
    };
    Gaze::new(p.clamp(-range, range), y.clamp(-range, range))
}

/// Deterministic 8:1:1 train/val/test assignment from `(subject, index)`.
pub fn split_for(subject: &str, index: usize) -> Split {
    let mut h = Sha256::new();
    h.update(subject.as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    match u64::from_le_bytes(d[..8].try_into().unwrap()) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

pub fn all_subjects(config: &SyntheticEyeConfig, n_subjects: usize) -> Vec<SubjectParams> {
    (0..n_subjects)
        .map(|i| subject_params(config, i, false))
        .chain((0..config.personal_subjects).map(|i| subject_params(config, i, true)))
        .collect()
}

/// In-memory dataset: `n_per_subject` images for each of `n_subjects`
/// regular subjects plus the configured personal subjects.
pub fn synthesize(
    config: &SyntheticEyeConfig,
    n_subjects: usize,
    n_per_subject: usize,
) -> Result<GazeDataset> {
    config.validate()?;
    if n_subjects == 0 || n_per_subject == 0 {
        return Err(Error::InvalidArgument(
            "need at least one subject and one image".into(),
        ));
    }
    let mut samples = Vec::new();
    for (k, subject) in all_subjects(config, n_subjects).into_iter().enumerate() {
        let mut rng = subject_rng(config.seed ^ 0x5eed, k as u64);
        for i in 0..n_per_subject {
            let gaze = sample_gaze(&subject, config.gaze_range, &mut rng);
            let (image, _) = render_eye(
                config.resolution,
                config.noise_std,
                &subject,
                gaze,
                &mut rng,
            );
            let split = if subject.personal {
                Split::Personal
            } else {
                split_for(&subject.id, i)
            };
            samples.push(GazeSample {
                image,
                gaze,
                subject: subject.id.clone(),
                split,
            });
        }
    }
    Ok(GazeDataset::new(samples))
}

/// Writes the synthetic set as PGM files plus `manifest.jsonl` under
/// `out_dir` and returns it.
pub fn synth_generate(
    config: &SyntheticEyeConfig,
    n_subjects: usize,
    n_per_subject: usize,
    out_dir: &Path,
) -> Result<GazeDataset> {
    let data = synthesize(config, n_subjects, n_per_subject)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    let mut records = Vec::with_capacity(data.len());
    let mut counter = std::collections::BTreeMap::<&str, usize>::new();
    for s in &data.samples {
        let n = counter.entry(&s.subject).or_default();
        let rel = format!("images/{}_{:05}.pgm", s.subject, n);
        *n += 1;
        write_pgm(&out_dir.join(&rel), &s.image)?;
        records.push(ManifestRecord {
            image: rel,
            pitch: s.gaze.pitch,
            yaw: s.gaze.yaw,
            subject: s.subject.clone(),
            split: s.split,
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    std::fs::write(
        out_dir.join("synth_config.json"),
        serde_json::to_string_pretty(config)?,
    )?;
    Ok(data)
}
