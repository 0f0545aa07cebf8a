use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Personal,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Personal => "personal",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "personal" => Ok(Split::Personal),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Gaze direction in radians. Positive pitch looks up, positive yaw looks
/// toward the image's right.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Gaze {
    pub pitch: f32,
    pub yaw: f32,
}

impl Gaze {
    pub fn new(pitch: f32, yaw: f32) -> Self {
        Self { pitch, yaw }
    }
}

/// One eye image (`1×H×W`, values in `[0, 1]`) with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeSample {
    pub image: Tensor,
    pub gaze: Gaze,
    pub subject: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GazeDataset {
    pub samples: Vec<GazeSample>,
}

impl GazeDataset {
    pub fn new(samples: Vec<GazeSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn filter(&self, mut keep: impl FnMut(&GazeSample) -> bool) -> GazeDataset {
        GazeDataset::new(self.samples.iter().filter(|s| keep(s)).cloned().collect())
    }

    pub fn split(&self, split: Split) -> GazeDataset {
        self.filter(|s| s.split == split)
    }

    pub fn subject(&self, id: &str) -> GazeDataset {
        self.filter(|s| s.subject == id)
    }

    /// Images at `indices` as one `N×C×H×W` batch.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let parts: Vec<Tensor> = indices
            .iter()
            .map(|&i| as_batch(&self.samples[i].image))
            .collect::<Result<_>>()?;
        Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())
    }

    /// Labels at `indices` as an `N×2` (pitch, yaw) tensor.
    pub fn labels(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(2 * indices.len());
        for &i in indices {
            let g = self.samples[i].gaze;
            data.extend_from_slice(&[g.pitch, g.yaw]);
        }
        Tensor::new(&[indices.len(), 2], data)
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.samples.iter().map(|s| s.subject.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// A `C×H×W` sample as a `1×C×H×W` batch.
pub fn as_batch(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.clone().reshape(&shape)
}
