//! Gaze-directed detection filtering over a dense prediction grid.
//!
//! A grid holds one record per cell with channel layout
//! `[obj, cls_0..cls_{C-1}, dx, dy, w, h]`: an objectness logit, class
//! logits, the box center offset inside the cell (logits, squashed by a
//! sigmoid) and the box size in pixels. Only the cells around the gaze
//! point are decoded and suppressed.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 2;
pub const DEFAULT_STRIDE: usize = 8;
pub const GRID_KEY: &str = "grid";
pub const STRIDE_KEY: &str = "stride";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub num_classes: usize,
    data: Tensor,
}

/// A cell `(i, j)`: row, column.
pub type Cell = (usize, usize);

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl FeatureGrid {
    /// `tensor` is `1×(5+C)×H×W` with `C ≥ 1`. Objectness may be `-∞`; NaN
    /// is rejected everywhere.
    pub fn new(tensor: Tensor, stride: usize) -> Result<Self> {
        let (n, ch, h, w) = tensor.dims4()?;
        if n != 1 || ch < 6 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid must be 1×(5+C)×H×W with C ≥ 1 and a positive stride, got {:?} stride {stride}",
                tensor.shape()
            )));
        }
        if tensor.data().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("grid contains NaN".into()));
        }
        Ok(Self {
            height: h,
            width: w,
            stride,
            num_classes: ch - 5,
            data: tensor,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn total_cells(&self) -> usize {
        self.height * self.width
    }

    fn at(&self, c: usize, (i, j): Cell) -> f32 {
        self.data.data()[(c * self.height + i) * self.width + j]
    }

    pub fn objectness(&self, cell: Cell) -> f32 {
        self.at(0, cell)
    }

    pub fn class_logits(&self, cell: Cell) -> Vec<f32> {
        (0..self.num_classes)
            .map(|c| self.at(1 + c, cell))
            .collect()
    }

    /// `(dx, dy, w, h)` raw values.
    pub fn box_params(&self, cell: Cell) -> [f32; 4] {
        let b = 1 + self.num_classes;
        [
            self.at(b, cell),
            self.at(b + 1, cell),
            self.at(b + 2, cell),
            self.at(b + 3, cell),
        ]
    }

    pub fn cell_index(&self, (i, j): Cell) -> usize {
        i * self.width + j
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    /// Center x, pixels.
    pub x: f32,
    /// Center y, pixels.
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub class_id: usize,
    pub score: f32,
    pub cell: [usize; 2],
}

impl DetectionBox {
    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn iou(&self, other: &DetectionBox) -> f32 {
        let ix = ((self.x + self.w / 2.0).min(other.x + other.w / 2.0)
            - (self.x - self.w / 2.0).max(other.x - other.w / 2.0))
        .max(0.0);
        let iy = ((self.y + self.h / 2.0).min(other.y + other.h / 2.0)
            - (self.y - self.h / 2.0).max(other.y - other.h / 2.0))
        .max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }
}

/// Cell under a gaze point, clamped into the grid. `clamped` flags a gaze
/// point outside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellPick {
    pub cell: Cell,
    pub clamped: bool,
}

pub fn gaze_to_cell(gaze: (f32, f32), grid: &FeatureGrid) -> CellPick {
    let (x, y) = gaze;
    let s = grid.stride as f32;
    let clamp_axis = |v: f32, cells: usize| -> (usize, bool) {
        if !v.is_finite() || v < 0.0 {
            (0, true)
        } else {
            let c = (v / s).floor() as usize;
            if c >= cells {
                (cells - 1, true)
            } else {
                (c, false)
            }
        }
    };
    let (j, cx) = clamp_axis(x, grid.width);
    let (i, cy) = clamp_axis(y, grid.height);
    CellPick {
        cell: (i, j),
        clamped: cx || cy,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridRegion {
    pub center: Cell,
    pub k: usize,
    /// Row-major order.
    pub cells: Vec<Cell>,
}

impl GridRegion {
    pub fn contains(&self, (i, j): Cell) -> bool {
        i.abs_diff(self.center.0) <= self.k
            && j.abs_diff(self.center.1) <= self.k
            && self.cells.contains(&(i, j))
    }
}

/// Square neighborhood of radius `k` around `center`, clipped to the grid.
pub fn region_cells(center: Cell, k: usize, grid: &FeatureGrid) -> GridRegion {
    let (ci, cj) = center;
    let rows = ci.saturating_sub(k)..(ci + k + 1).min(grid.height);
    let cols = cj.saturating_sub(k)..(cj + k + 1).min(grid.width);
    let cells = rows
        .flat_map(|i| cols.clone().map(move |j| (i, j)))
        .collect();
    GridRegion { center, k, cells }
}

/// Box for one cell under its best class (lowest id on ties), if it
/// clears `score_threshold` and has a positive size.
pub fn decode_cell(grid: &FeatureGrid, cell: Cell, score_threshold: f32) -> Option<DetectionBox> {
    let obj = sigmoid(grid.objectness(cell));
    if obj == 0.0 {
        return None;
    }
    let logits = grid.class_logits(cell);
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exp: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f32 = exp.iter().sum();
    let (class_id, &best) = exp
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("at least one class");
    let score = obj * best / sum;
    let [dx, dy, w, h] = grid.box_params(cell);
    if score.is_nan()
        || score < score_threshold
        || w <= 0.0
        || h <= 0.0
        || !w.is_finite()
        || !h.is_finite()
    {
        return None;
    }
    let s = grid.stride as f32;
    Some(DetectionBox {
        x: (cell.1 as f32 + sigmoid(dx)) * s,
        y: (cell.0 as f32 + sigmoid(dy)) * s,
        w,
        h,
        class_id,
        score,
        cell: [cell.0, cell.1],
    })
}

pub fn decode_region(
    grid: &FeatureGrid,
    region: &GridRegion,
    score_threshold: f32,
) -> Vec<DetectionBox> {
    region
        .cells
        .iter()
        .filter_map(|&c| decode_cell(grid, c, score_threshold))
        .collect()
}

/// Descending score, then lower class id, then lower row-major cell index.
fn rank(a: &DetectionBox, b: &DetectionBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.cell.cmp(&b.cell))
}

/// Greedy class-wise suppression. A box survives unless a higher-ranked
/// survivor of its class overlaps it with IoU above `iou_threshold`.
pub fn nms(boxes: &[DetectionBox], iou_threshold: f32) -> Vec<DetectionBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(rank);
    let mut keep: Vec<DetectionBox> = Vec::new();
    for b in sorted {
        if keep
            .iter()
            .all(|k| k.class_id != b.class_id || k.iou(&b) <= iou_threshold)
        {
            keep.push(b);
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub score: f32,
    pub iou: f32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            score: 0.25,
            iou: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeDetections {
    pub boxes: Vec<DetectionBox>,
    pub center: Cell,
    pub clamped: bool,
    pub cells_examined: usize,
    pub total_cells: usize,
}

pub fn detect_at_gaze(
    grid: &FeatureGrid,
    gaze: (f32, f32),
    k: usize,
    thresholds: Thresholds,
) -> Result<GazeDetections> {
    if !(thresholds.score > 0.0 && thresholds.score < 1.0)
        || !(thresholds.iou > 0.0 && thresholds.iou <= 1.0)
    {
        return Err(Error::InvalidArgument(format!(
            "thresholds must satisfy 0 < score < 1 and 0 < iou ≤ 1, got {thresholds:?}"
        )));
    }
    let pick = gaze_to_cell(gaze, grid);
    let region = region_cells(pick.cell, k, grid);
    let boxes = nms(
        &decode_region(grid, &region, thresholds.score),
        thresholds.iou,
    );
    Ok(GazeDetections {
        boxes,
        center: pick.cell,
        clamped: pick.clamped,
        cells_examined: region.cells.len(),
        total_cells: grid.total_cells(),
    })
}

/// The top surviving box at the gaze point, used as an edit region.
pub fn resolve_edit_region(
    grid: &FeatureGrid,
    gaze: (f32, f32),
    k: usize,
    thresholds: Thresholds,
) -> Result<Option<DetectionBox>> {
    Ok(detect_at_gaze(grid, gaze, k, thresholds)?
        .boxes
        .into_iter()
        .next())
}

/// Reads a grid stored as a `grid` entry of a weight file. The stride comes
/// from `stride_override`, else a `stride` entry, else [`DEFAULT_STRIDE`].
pub fn load_grid(path: &Path, stride_override: Option<usize>) -> Result<FeatureGrid> {
    let entries = crate::io::read_tensors(path)?;
    let find = |key: &str| entries.iter().find(|(n, _)| n == key).map(|(_, t)| t);
    let tensor = find(GRID_KEY)
        .ok_or_else(|| Error::NameSet(format!("{} has no `{GRID_KEY}` entry", path.display())))?;
    let stride = match stride_override {
        Some(s) => s,
        None => find(STRIDE_KEY).map_or(DEFAULT_STRIDE, |t| t.data()[0] as usize),
    };
    FeatureGrid::new(tensor.clone(), stride)
}

pub fn save_grid(path: &Path, grid: &FeatureGrid) -> Result<()> {
    let stride = Tensor::full(&[1], grid.stride as f32);
    crate::io::write_tensors(path, [(GRID_KEY, grid.tensor()), (STRIDE_KEY, &stride)])
}
