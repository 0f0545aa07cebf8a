mod common;

use common::detectsuite::{decode_all, interior_cells, nms_agrees, region_query, GRIDS};
use gazekit::detect::{detect_at_gaze, nms, FeatureGrid, Thresholds};
use gazekit::Tensor;

#[test]
fn gaze_region_matches_full_grid_decode_restricted_to_region() {
    let mut nonempty = 0;
    for seed in 0..GRIDS {
        let q = region_query(seed);
        assert_eq!(q.got.center, q.center, "grid {seed}");
        assert_eq!(q.got.boxes, q.want, "grid {seed}");
        assert_eq!(q.got.cells_examined, q.expected_cells, "grid {seed}");
        assert!(q.got.cells_examined <= (2 * q.k + 1).pow(2));
        nonempty += usize::from(!q.want.is_empty());
    }
    assert!(
        nonempty > GRIDS as usize / 2,
        "only {nonempty} grids produced boxes"
    );
}

#[test]
fn nms_matches_quadratic_oracle() {
    for seed in 0..GRIDS {
        assert!(nms_agrees(seed), "grid {seed}");
    }
}

#[test]
fn interior_region_examines_twenty_five_cells() {
    assert_eq!(interior_cells(), 25);
}

#[test]
fn boxes_outside_region_never_suppress_inside_ones() {
    // Two same-class boxes on adjacent cells overlap completely; only the
    // lower-scored one lies inside a k = 0 region.
    let (h, w) = (1, 2);
    let plane = h * w;
    let mut t = Tensor::zeros(&[1, 6, h, w]);
    let d = t.data_mut();
    d[0] = 4.0;
    d[1] = 1.0;
    for cell in 0..plane {
        d[4 * plane + cell] = 100.0;
        d[5 * plane + cell] = 100.0;
    }
    let grid = FeatureGrid::new(t, 8).unwrap();
    let full = nms(&decode_all(&grid, 0.25), 0.5);
    assert_eq!(full.len(), 1);
    let region = detect_at_gaze(&grid, (12.0, 4.0), 0, Thresholds::default()).unwrap();
    assert_eq!(region.boxes.len(), 1);
    assert_eq!(region.boxes[0].cell, [0, 1]);
}
