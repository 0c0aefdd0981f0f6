//! Turning head outputs into scored boxes.

use crate::autograd::sigmoid;
use crate::boxes::iou;
use crate::error::{shape_err, Result};
use crate::head::{decode_all, GridSpec, HeadOutputs};
use crate::metrics::Detection;

pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Greedy suppression: visit by descending confidence (ties by index) and
/// drop anything overlapping an already kept box by more than `iou_thresh`.
/// Returns the kept indices in visiting order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Decodes every prediction, keeps those with confidence at least
/// `conf_floor`, and optionally suppresses overlaps. Output is sorted by
/// descending confidence.
pub fn extract_detections(
    outputs: &HeadOutputs,
    grid: &GridSpec,
    conf_floor: f64,
    nms_iou: Option<f64>,
) -> Result<Vec<Detection>> {
    let n = grid.num_predictions();
    if outputs.t_l.len() != 4 * n || outputs.t_c.len() != n || outputs.t_s.len() % n.max(1) != 0 {
        return Err(shape_err!(
            "head outputs ({}, {}, {} values) do not fit a grid with {n} predictions",
            outputs.t_l.len(),
            outputs.t_s.len(),
            outputs.t_c.len()
        ));
    }
    let h = outputs.t_s.len() / n;
    let boxes = decode_all(outputs.t_l.data(), grid);
    let dets: Vec<Detection> = boxes
        .into_iter()
        .enumerate()
        .filter_map(|(k, bbox)| {
            let confidence = sigmoid(outputs.confidence_raw(k));
            (confidence >= conf_floor).then(|| Detection {
                bbox,
                confidence,
                semantic: outputs.semantic(k, h).to_vec(),
                predicted_class: None,
            })
        })
        .collect();
    let keep = match nms_iou {
        Some(t) => nms(&dets, t),
        None => {
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
            order
        }
    };
    Ok(keep.into_iter().map(|i| dets[i].clone()).collect())
}
