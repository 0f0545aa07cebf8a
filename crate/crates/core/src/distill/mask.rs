use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default side of a square mask patch, in pixels.
pub const DEFAULT_PATCH: usize = 32;
pub const DEFAULT_MASK_RATIO: f32 = 0.6;

/// Patch-level binary mask; `true` marks a hidden patch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub ratio: f32,
    pub grid: Vec<bool>,
}

impl MaskSpec {
    pub fn all_visible(rows: usize, cols: usize, patch_size: usize) -> Self {
        Self {
            patch_size,
            rows,
            cols,
            ratio: 0.0,
            grid: vec![false; rows * cols],
        }
    }

    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.grid[r * self.cols + c]
    }

    pub fn masked_count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.rows * self.patch_size, self.cols * self.patch_size)
    }

    /// `1×1×h×w` mask at a feature map of the given stride.
    pub fn to_stage(&self, stride: usize) -> Result<Tensor> {
        mask_to_stage(self, stride)
    }

    /// Images with every masked patch zeroed.
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = images.dims4()?;
        if (h, w) != self.image_size() {
            return Err(Error::InvalidArgument(format!(
                "mask covers {:?} pixels, images are {h}×{w}",
                self.image_size()
            )));
        }
        let mut out = images.clone();
        let p = self.patch_size;
        for plane in out.data_mut().chunks_mut(h * w).take(n * c) {
            for r in 0..self.rows {
                for q in 0..self.cols {
                    if self.is_masked(r, q) {
                        for y in r * p..(r + 1) * p {
                            plane[y * w + q * p..y * w + (q + 1) * p].fill(0.0);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `round(ratio·rows·cols)` patches chosen uniformly without replacement.
/// A count that rounds to zero is returned as-is; the loss rejects it.
pub fn generate_mask(rows: usize, cols: usize, ratio: f32, seed: u64) -> Result<MaskSpec> {
    generate_mask_with_patch(rows, cols, ratio, DEFAULT_PATCH, seed)
}

pub fn generate_mask_with_patch(
    rows: usize,
    cols: usize,
    ratio: f32,
    patch_size: usize,
    seed: u64,
) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} outside (0, 1)"
        )));
    }
    if rows == 0 || cols == 0 || patch_size == 0 {
        return Err(Error::InvalidArgument("mask grid must be non-empty".into()));
    }
    let total = rows * cols;
    let count = (ratio as f64 * total as f64).round() as usize;
    let mut grid = vec![false; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, total, count) {
        grid[i] = true;
    }
    Ok(MaskSpec {
        patch_size,
        rows,
        cols,
        ratio,
        grid,
    })
}

/// Replicates each patch flag over its `(patch/stride)²` feature positions.
pub fn mask_to_stage(mask: &MaskSpec, stride: usize) -> Result<Tensor> {
    if stride == 0 || !mask.patch_size.is_multiple_of(stride) {
        return Err(Error::InvalidArgument(format!(
            "patch size {} is not divisible by stride {stride}",
            mask.patch_size
        )));
    }
    let k = mask.patch_size / stride;
    let (h, w) = (mask.rows * k, mask.cols * k);
    Ok(Tensor::from_fn(&[1, 1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        if mask.is_masked(y / k, x / k) {
            1.0
        } else {
            0.0
        }
    }))
}
