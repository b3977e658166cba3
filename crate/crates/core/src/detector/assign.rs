use super::{iou, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Ground-truth index each anchor is regressed toward (its best match).
    pub matched: Vec<Option<usize>>,
}

/// Labels anchors for RPN training.
///
/// Positive if the best IoU with any gt is ≥ `pos_thr`, negative if it is
/// below `neg_thr`, ignored otherwise. In addition, each gt's highest-IoU
/// anchor (lowest index on ties) is forced positive and matched to that gt.
pub fn assign_rpn_targets(anchors: &[BBox], gts: &[BBox], pos_thr: f64, neg_thr: f64) -> RpnTargets {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut matched = vec![None; anchors.len()];
    if gts.is_empty() {
        return RpnTargets { labels, matched };
    }
    let mut best_for_gt = vec![(f64::NEG_INFINITY, usize::MAX); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best.0 {
                best = (v, gi);
            }
            if v > best_for_gt[gi].0 {
                best_for_gt[gi] = (v, ai);
            }
        }
        matched[ai] = Some(best.1);
        labels[ai] = if best.0 >= pos_thr {
            AnchorLabel::Positive
        } else if best.0 < neg_thr {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (gi, &(_, ai)) in best_for_gt.iter().enumerate() {
        if ai != usize::MAX {
            labels[ai] = AnchorLabel::Positive;
            matched[ai] = Some(gi);
        }
    }
    RpnTargets { labels, matched }
}
