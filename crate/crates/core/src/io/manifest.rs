//! JSON-lines dataset manifests.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{read_image, resize_bilinear};
use crate::error::{Error, Result};
use crate::gaze::{Gaze, GazeDataset, GazeSample, Split};

/// One manifest line. `image` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub pitch: f32,
    pub yaw: f32,
    pub subject: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Square side images are resized to; native size when `None`.
    pub resolution: Option<usize>,
    /// Keep only records of this split.
    pub split: Option<Split>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let limit = std::f32::consts::FRAC_PI_2;
        if !(rec.pitch.abs() <= limit && rec.yaw.abs() <= limit) {
            return Err(err(format!(
                "angles ({}, {}) outside ±π/2",
                rec.pitch, rec.yaw
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

fn resolve(manifest: &Path, image: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(image)
}

/// Loads every (or every selected-split) record with its decoded image.
pub fn load_dataset(manifest: &Path, options: &LoadOptions) -> Result<GazeDataset> {
    let mut samples = Vec::new();
    for rec in read_manifest(manifest)? {
        if options.split.is_some_and(|s| s != rec.split) {
            continue;
        }
        let mut image = read_image(&resolve(manifest, &rec.image))?;
        if let Some(r) = options.resolution {
            image = resize_bilinear(&image, r, r)?;
        }
        samples.push(GazeSample {
            image,
            gaze: Gaze::new(rec.pitch, rec.yaw),
            subject: rec.subject,
            split: rec.split,
        });
    }
    Ok(GazeDataset::new(samples))
}
