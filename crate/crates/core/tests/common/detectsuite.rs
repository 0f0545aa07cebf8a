//! Gaze-directed detection against a full-grid decode and a quadratic NMS.

use gazekit::detect::{
    detect_at_gaze, gaze_to_cell, nms, region_cells, DetectionBox, FeatureGrid, Thresholds,
};
use gazekit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRIDS: u64 = 1000;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// A grid with sparse objects, overlapping boxes and a few degenerate cells.
pub fn random_grid(rng: &mut ChaCha8Rng) -> FeatureGrid {
    let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
    let classes = rng.random_range(1..=4);
    let stride = [4, 8, 16][rng.random_range(0..3)];
    let plane = h * w;
    let mut t = Tensor::zeros(&[1, 5 + classes, h, w]);
    let d = t.data_mut();
    for cell in 0..plane {
        d[cell] = match rng.random_range(0..10) {
            0 => f32::NEG_INFINITY,
            1..=4 => rng.random_range(-6.0..-1.0),
            _ => rng.random_range(-1.0..5.0),
        };
        for c in 0..classes {
            d[(1 + c) * plane + cell] = if rng.random_range(0..8) == 0 {
                1.0
            } else {
                rng.random_range(-3.0..3.0)
            };
        }
        let b = 1 + classes;
        d[b * plane + cell] = rng.random_range(-3.0..3.0);
        d[(b + 1) * plane + cell] = rng.random_range(-3.0..3.0);
        for o in 2..4 {
            d[(b + o) * plane + cell] = if rng.random_range(0..20) == 0 {
                rng.random_range(-4.0..=0.0)
            } else {
                rng.random_range(0.5..4.0) * stride as f32
            };
        }
    }
    FeatureGrid::new(t, stride).unwrap()
}

/// Written from the channel layout alone.
pub fn decode_all(grid: &FeatureGrid, threshold: f32) -> Vec<DetectionBox> {
    let mut out = Vec::new();
    for i in 0..grid.height {
        for j in 0..grid.width {
            let obj = sigmoid(grid.objectness((i, j)));
            let logits = grid.class_logits((i, j));
            let mut best = 0;
            for c in 1..logits.len() {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            let max = logits[best];
            let sum: f32 = logits.iter().map(|l| (l - max).exp()).sum();
            let score = obj * (logits[best] - max).exp() / sum;
            let [dx, dy, bw, bh] = grid.box_params((i, j));
            if obj > 0.0 && score >= threshold && bw > 0.0 && bh > 0.0 {
                let s = grid.stride as f32;
                out.push(DetectionBox {
                    x: (j as f32 + sigmoid(dx)) * s,
                    y: (i as f32 + sigmoid(dy)) * s,
                    w: bw,
                    h: bh,
                    class_id: best,
                    score,
                    cell: [i, j],
                });
            }
        }
    }
    out
}

fn iou(a: &DetectionBox, b: &DetectionBox) -> f32 {
    let span = |c: f32, e: f32| (c - e / 2.0, c + e / 2.0);
    let ((ax0, ax1), (bx0, bx1)) = (span(a.x, a.w), span(b.x, b.w));
    let ((ay0, ay1), (by0, by1)) = (span(a.y, a.h), span(b.y, b.h));
    let inter = (ax1.min(bx1) - ax0.max(bx0)).max(0.0) * (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Pairwise suppression table, then one pass in rank order.
pub fn nms_oracle(boxes: &[DetectionBox], thr: f32) -> Vec<DetectionBox> {
    let n = boxes.len();
    let outranks = |a: &DetectionBox, b: &DetectionBox| {
        a.score > b.score
            || (a.score == b.score
                && (a.class_id < b.class_id || (a.class_id == b.class_id && a.cell < b.cell)))
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        if outranks(&boxes[a], &boxes[b]) {
            std::cmp::Ordering::Less
        } else if outranks(&boxes[b], &boxes[a]) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    let suppresses: Vec<Vec<bool>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    a != b
                        && boxes[a].class_id == boxes[b].class_id
                        && iou(&boxes[a], &boxes[b]) > thr
                })
                .collect()
        })
        .collect();
    let mut kept: Vec<usize> = Vec::new();
    for &b in &order {
        if !kept.iter().any(|&a| suppresses[a][b]) {
            kept.push(b);
        }
    }
    kept.into_iter().map(|i| boxes[i].clone()).collect()
}

/// Result of one randomized gaze query against the oracle.
pub struct Query {
    pub got: gazekit::detect::GazeDetections,
    pub want: Vec<DetectionBox>,
    pub center: (usize, usize),
    pub expected_cells: usize,
    pub k: usize,
}

pub fn region_query(seed: u64) -> Query {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = random_grid(&mut rng);
    let s = grid.stride as f32;
    let gaze = (
        rng.random_range(-10.0..grid.width as f32 * s + 10.0),
        rng.random_range(-10.0..grid.height as f32 * s + 10.0),
    );
    let k = rng.random_range(0..=3);
    let thresholds = Thresholds {
        score: rng.random_range(0.05..0.9),
        iou: rng.random_range(0.1..=1.0),
    };
    let got = detect_at_gaze(&grid, gaze, k, thresholds).unwrap();
    let ci = ((gaze.1 / s).floor().max(0.0) as usize).min(grid.height - 1);
    let cj = ((gaze.0 / s).floor().max(0.0) as usize).min(grid.width - 1);
    let inside: Vec<DetectionBox> = decode_all(&grid, thresholds.score)
        .into_iter()
        .filter(|b| b.cell[0].abs_diff(ci) <= k && b.cell[1].abs_diff(cj) <= k)
        .collect();
    let rows = (ci + k + 1).min(grid.height) - ci.saturating_sub(k);
    let cols = (cj + k + 1).min(grid.width) - cj.saturating_sub(k);
    Query {
        got,
        want: nms_oracle(&inside, thresholds.iou),
        center: (ci, cj),
        expected_cells: rows * cols,
        k,
    }
}

impl Query {
    pub fn matches(&self) -> bool {
        self.got.center == self.center
            && self.got.boxes == self.want
            && self.got.cells_examined == self.expected_cells
    }
}

/// `nms` against the oracle on the decoded boxes of one random grid.
pub fn nms_agrees(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let grid = random_grid(&mut rng);
    let boxes = decode_all(&grid, 0.01);
    let thr = rng.random_range(0.05..=1.0);
    nms(&boxes, thr) == nms_oracle(&boxes, thr)
}

/// Cells examined for an interior `k = 2` gaze on an 80×60 grid.
pub fn interior_cells() -> usize {
    let grid = FeatureGrid::new(Tensor::zeros(&[1, 6, 60, 80]), 8).unwrap();
    let gaze = (40.0 * 8.0 + 3.0, 30.0 * 8.0 + 5.0);
    let pick = gaze_to_cell(gaze, &grid);
    assert_eq!((pick.cell, pick.clamped), ((30, 40), false));
    assert_eq!(region_cells(pick.cell, 2, &grid).cells.len(), 25);
    detect_at_gaze(&grid, gaze, 2, Thresholds::default())
        .unwrap()
        .cells_examined
}
