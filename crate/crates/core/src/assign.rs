//! Object / background indicators for every grid prediction.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, GroundTruth};
use crate::error::{invalid, Result};
use crate::head::GridSpec;

/// How background predictions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoobjRule {
    /// Every prediction of a cell whose unit square meets no ground-truth
    /// box with positive area.
    #[default]
    CellRegion,
    /// Every non-object prediction whose decoded box has zero IoU with all
    /// ground-truth boxes.
    PredictedBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMask {
    pub obj: Vec<bool>,
    pub noobj: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
}

impl AssignmentMask {
    pub fn len(&self) -> usize {
        self.obj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obj.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.obj.iter().filter(|&&o| o).count()
    }

    /// Checks the structural invariants against `n_gt` ground truths.
    pub fn check_invariants(&self, n_gt: usize) -> std::result::Result<(), String> {
        let mut claims = vec![0usize; n_gt];
        for k in 0..self.len() {
            if self.obj[k] && self.noobj[k] {
                return Err(format!("prediction {k} is both object and background"));
            }
            match (self.obj[k], self.matched_gt[k]) {
                (true, None) => return Err(format!("object prediction {k} has no match")),
                (false, Some(_)) => return Err(format!("non-object prediction {k} has a match")),
                (true, Some(g)) if g >= n_gt => {
                    return Err(format!("prediction {k} matched to missing gt {g}"))
                }
                (true, Some(g)) => claims[g] += 1,
                _ => {}
            }
        }
        match claims.iter().position(|&c| c > 1) {
            Some(g) => Err(format!("ground truth {g} claimed {} times", claims[g])),
            None => Ok(()),
        }
    }
}

/// Marks, for each ground truth, the best-IoU prediction in the cell holding
/// its center, and marks background predictions per `rule`.
///
/// Ground truths are in grid units. When two objects share a cell, later
/// objects take their best prediction not already claimed; an object whose
/// cell has no prediction left stays unassigned.
pub fn assign_indicators(
    gts: &[GroundTruth],
    decoded: &[BBox],
    grid: &GridSpec,
    rule: NoobjRule,
) -> Result<AssignmentMask> {
    let n = grid.num_predictions();
    if decoded.len() != n {
        return Err(invalid!(
            "{} decoded boxes for a grid with {} predictions",
            decoded.len(),
            n
        ));
    }
    let s = grid.s as f64;
    for (i, gt) in gts.iter().enumerate() {
        let b = &gt.bbox;
        if !(b.x >= 0.0 && b.x <= s && b.y >= 0.0 && b.y <= s && b.w > 0.0 && b.h > 0.0) {
            return Err(invalid!("ground truth {i} lies outside the {s}×{s} grid: {b:?}"));
        }
    }

    let mut obj = vec![false; n];
    let mut matched_gt = vec![None; n];
    for (gi, gt) in gts.iter().enumerate() {
        let (cx, cy) = grid.cell_of(gt.bbox.x, gt.bbox.y);
        let mut best: Option<(usize, f64)> = None;
        for a in 0..grid.anchors {
            let k = grid.index(cx, cy, a);
            if obj[k] {
                continue;
            }
            let v = iou(&decoded[k], &gt.bbox);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            obj[k] = true;
            matched_gt[k] = Some(gi);
        }
    }

    let noobj = match rule {
        NoobjRule::CellRegion => (0..n)
            .map(|k| {
                let (cx, cy, _) = grid.locate(k);
                let cell = BBox::new(cx as f64 + 0.5, cy as f64 + 0.5, 1.0, 1.0);
                gts.iter().all(|gt| cell.intersection(&gt.bbox) <= 0.0)
            })
            .collect(),
        NoobjRule::PredictedBox => (0..n)
            .map(|k| !obj[k] && gts.iter().all(|gt| iou(&decoded[k], &gt.bbox) == 0.0))
            .collect(),
    };

    Ok(AssignmentMask {
        obj,
        noobj,
        matched_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{decode_box, Offsets};

    fn grid() -> GridSpec {
        GridSpec::new(7, vec![(0.5, 0.5), (1.0, 1.0), (2.0, 2.0)], 112).unwrap()
    }

    fn neutral_boxes(g: &GridSpec) -> Vec<BBox> {
        (0..g.num_predictions())
            .map(|k| {
                let (cx, cy, a) = g.locate(k);
                decode_box(Offsets::new(0.0, 0.0, 0.0, 0.0), (cx, cy), g.priors[a])
            })
            .collect()
    }

    fn gt(x: f64, y: f64, w: f64, h: f64) -> GroundTruth {
        GroundTruth::new(BBox::new(x, y, w, h), 0, vec![1.0])
    }

    #[test]
    fn single_object() {
        let g = grid();
        let m = assign_indicators(&[gt(3.5, 3.5, 0.9, 0.9)], &neutral_boxes(&g), &g, NoobjRule::CellRegion)
            .unwrap();
        let objs: Vec<usize> = (0..m.len()).filter(|&k| m.obj[k]).collect();
        assert_eq!(objs, vec![g.index(3, 3, 1)]);
        for a in 0..3 {
            assert!(m.noobj[g.index(0, 0, a)]);
            assert!(!m.noobj[g.index(3, 3, a)]);
        }
        m.check_invariants(1).unwrap();
    }

    #[test]
    fn no_objects_means_all_background() {
        let g = grid();
        let m = assign_indicators(&[], &neutral_boxes(&g), &g, NoobjRule::CellRegion).unwrap();
        assert!(m.noobj.iter().all(|&b| b));
        assert!(m.obj.iter().all(|&b| !b));
    }

    #[test]
    fn overlapped_but_not_responsible_cell() {
        let g = grid();
        // Spans cells (3,3)..(4,4) with its center in (3,3).
        let m = assign_indicators(&[gt(3.9, 3.9, 1.5, 1.5)], &neutral_boxes(&g), &g, NoobjRule::CellRegion)
            .unwrap();
        for a in 0..3 {
            let k = g.index(4, 4, a);
            assert!(!m.obj[k] && !m.noobj[k]);
        }
        assert_eq!(m.num_objects(), 1);
    }

    #[test]
    fn boundary_center_goes_to_lower_cell() {
        let g = grid();
        let m = assign_indicators(&[gt(3.0, 2.5, 0.4, 0.4)], &neutral_boxes(&g), &g, NoobjRule::CellRegion)
            .unwrap();
        let k = (0..m.len()).find(|&k| m.obj[k]).unwrap();
        assert_eq!(g.locate(k).0, 2);
    }

    #[test]
    fn shared_cell_takes_next_best() {
        let g = grid();
        let gts = [gt(3.5, 3.5, 1.0, 1.0), gt(3.4, 3.6, 1.0, 1.0)];
        let m = assign_indicators(&gts, &neutral_boxes(&g), &g, NoobjRule::CellRegion).unwrap();
        assert_eq!(m.matched_gt[g.index(3, 3, 1)], Some(0));
        let second = (0..m.len()).find(|&k| m.matched_gt[k] == Some(1)).unwrap();
        assert_ne!(second, g.index(3, 3, 1));
        assert_eq!(g.locate(second).0, 3);
        m.check_invariants(2).unwrap();
    }

    #[test]
    fn predicted_box_rule() {
        let g = grid();
        let m = assign_indicators(&[gt(3.5, 3.5, 0.9, 0.9)], &neutral_boxes(&g), &g, NoobjRule::PredictedBox)
            .unwrap();
        // The big anchor of the neighbouring cell overlaps the object.
        assert!(!m.noobj[g.index(4, 3, 2)]);
        assert!(m.noobj[g.index(4, 3, 0)]);
        assert!(m.noobj[g.index(0, 0, 2)]);
        m.check_invariants(1).unwrap();
    }

    #[test]
    fn rejects_out_of_grid_truth() {
        let g = grid();
        assert!(assign_indicators(&[gt(7.5, 1.0, 1.0, 1.0)], &neutral_boxes(&g), &g, NoobjRule::CellRegion).is_err());
        assert!(assign_indicators(&[], &[], &g, NoobjRule::CellRegion).is_err());
    }
}
