use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a four-stage ConvNeXt-V2 gaze network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_depths: [usize; 4],
    pub stage_dims: [usize; 4],
    /// Stem kernel size and stride.
    pub patch_stride: usize,
    /// Width of the regression head output, 2 for (pitch, yaw).
    pub head_outputs: usize,
    pub adapters_enabled: bool,
    /// Adapter bottleneck width is `dim / adapter_ratio`.
    pub adapter_ratio: usize,
}

impl ModelConfig {
    pub const TEACHER_DIMS: [usize; 4] = [40, 80, 160, 320];
    pub const STUDENT_DIMS: [usize; 4] = [40, 20, 40, 80];
    pub const ATTO_DEPTHS: [usize; 4] = [2, 2, 6, 2];

    /// ConvNeXt-V2 Atto on grayscale input.
    pub fn teacher() -> Self {
        Self {
            in_channels: 1,
            stage_depths: Self::ATTO_DEPTHS,
            stage_dims: Self::TEACHER_DIMS,
            patch_stride: 4,
            head_outputs: 2,
            adapters_enabled: false,
            adapter_ratio: 4,
        }
    }

    /// Teacher layout with stages 2 to 4 at a quarter of the width.
    pub fn student() -> Self {
        Self {
            stage_dims: Self::STUDENT_DIMS,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.head_outputs == 0 || self.patch_stride == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.stage_dims.contains(&0) || self.stage_depths.contains(&0) {
            return Err(Error::Config(format!(
                "stage dims and depths must be positive, got {:?} / {:?}",
                self.stage_dims, self.stage_depths
            )));
        }
        if self.adapter_ratio == 0 || self.stage_dims.iter().any(|d| d % self.adapter_ratio != 0) {
            return Err(Error::Config(format!(
                "adapter ratio {} must divide every stage dim {:?}",
                self.adapter_ratio, self.stage_dims
            )));
        }
        Ok(())
    }

    /// Cumulative stride at the output of each stage.
    pub fn stage_strides(&self) -> [usize; 4] {
        let s = self.patch_stride;
        [s, 2 * s, 4 * s, 8 * s]
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides()[3]
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }
}
