use super::anchors::AnchorSet;
use crate::types::{BoxF, GroundTruthBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Background,
    Ignore,
    Positive(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// Regression offsets (dx, dy, dw, dh); meaningful for positive anchors only.
    pub reg: Vec<[f64; 4]>,
    pub num_positive: usize,
}

/// Max-IoU anchor matching: `>= pos_iou` positive, `< neg_iou` background,
/// ignore in between; every ground truth is additionally force-matched to its
/// best anchor.
pub fn assign_targets(boxes: &[GroundTruthBox], anchors: &AnchorSet, pos_iou: f64, neg_iou: f64) -> AnchorTargets {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Background; n];
    let mut reg = vec![[0.0; 4]; n];
    if boxes.is_empty() {
        return AnchorTargets {
            labels,
            reg,
            num_positive: 0,
        };
    }
    let gts: Vec<BoxF> = boxes.iter().map(|b| b.bbox()).collect();
    let mut best_gt = vec![(0usize, 0.0f64); n];
    let mut best_anchor = vec![(usize::MAX, 0.0f64); gts.len()];
    for (i, a) in anchors.boxes.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let iou = a.iou(gt);
            if iou > best_gt[i].1 {
                best_gt[i] = (g, iou);
            }
            if iou > best_anchor[g].1 {
                best_anchor[g] = (i, iou);
            }
        }
    }
    let mut matched = vec![None; n];
    for i in 0..n {
        let (g, iou) = best_gt[i];
        if iou >= pos_iou {
            matched[i] = Some(g);
        } else if iou >= neg_iou {
            labels[i] = AnchorLabel::Ignore;
        }
    }
    for (g, &(i, iou)) in best_anchor.iter().enumerate() {
        if i != usize::MAX && iou > 0.0 {
            matched[i] = Some(g);
        }
    }
    let mut num_positive = 0;
    for i in 0..n {
        if let Some(g) = matched[i] {
            labels[i] = AnchorLabel::Positive(boxes[g].class_id);
            reg[i] = encode(&anchors.boxes[i], &gts[g]);
            num_positive += 1;
        }
    }
    AnchorTargets {
        labels,
        reg,
        num_positive,
    }
}

/// Box-to-offset encoding relative to an anchor.
pub fn encode(anchor: &BoxF, gt: &BoxF) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = (anchor.x_min + aw / 2.0, anchor.y_min + ah / 2.0);
    let (gw, gh) = (gt.width(), gt.height());
    let (gcx, gcy) = (gt.x_min + gw / 2.0, gt.y_min + gh / 2.0);
    [(gcx - acx) / aw, (gcy - acy) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

const MAX_LOG_SCALE: f64 = 4.135; // ln(1000/16)

pub fn decode(anchor: &BoxF, d: &[f64; 4]) -> BoxF {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = (anchor.x_min + aw / 2.0, anchor.y_min + ah / 2.0);
    let cx = acx + d[0] * aw;
    let cy = acy + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BoxF::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}
