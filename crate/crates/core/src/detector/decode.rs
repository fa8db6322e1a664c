use std::cmp::Ordering;

use super::anchors::AnchorSet;
use super::network::PyramidOutputs;
use super::targets::decode;
use crate::numeric::sigmoid;
use crate::types::{BoxF, Detection};

/// Candidates kept per level before NMS.
const PRE_NMS_TOP_K: usize = 1000;

/// Total order: score descending, then class, then coordinates.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
}

/// Greedy per-class NMS: a box is dropped when it overlaps a kept box of the
/// same class by more than `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

fn clip(b: BoxF, w: f64, h: f64) -> BoxF {
    BoxF::new(
        b.x_min.clamp(0.0, w),
        b.y_min.clamp(0.0, h),
        b.x_max.clamp(0.0, w),
        b.y_max.clamp(0.0, h),
    )
}

/// Turns dense outputs into scored boxes in input-image pixels.
pub fn decode_and_nms(
    out: &PyramidOutputs,
    anchors: &AnchorSet,
    image_size: usize,
    score_thresh: f64,
    iou_thresh: f64,
    max_dets: usize,
) -> Vec<Detection> {
    let size = image_size as f64;
    let mut all = Vec::new();
    for (m, level) in anchors.levels.iter().enumerate() {
        let mut cands = Vec::new();
        for y in 0..level.height {
            for x in 0..level.width {
                for a in 0..level.sizes.len() {
                    for c in 0..out.num_classes {
                        let s = sigmoid(out.cls_logits[m].get(out.cls_channel(a, c), y, x));
                        if s > score_thresh {
                            cands.push((s, c, anchors.index(m, y, x, a), a, y, x));
                        }
                    }
                }
            }
        }
        cands.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.2.cmp(&q.2)).then(p.1.cmp(&q.1)));
        cands.truncate(PRE_NMS_TOP_K);
        for (s, c, idx, a, y, x) in cands {
            let reg = &out.reg[m];
            let d = [
                reg.get(a * 4, y, x),
                reg.get(a * 4 + 1, y, x),
                reg.get(a * 4 + 2, y, x),
                reg.get(a * 4 + 3, y, x),
            ];
            let b = clip(decode(&anchors.boxes[idx], &d), size, size);
            if b.is_well_ordered() {
                all.push(Detection {
                    bbox: b,
                    class_id: c,
                    score: s,
                });
            }
        }
    }
    let mut kept = nms(all, iou_thresh);
    kept.truncate(max_dets);
    kept
}
