use crate::geometry::{iou, BBox};

/// Greedy class-wise non-maximum suppression.
///
/// Boxes scoring below `score_thresh` are dropped; the rest are visited in
/// descending score order (equal scores keep input order) and a box is kept
/// unless an already-kept box of the same class overlaps it with IoU above
/// `iou_thresh`.
pub fn nms(dets: &[BBox], iou_thresh: f64, score_thresh: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score_or_zero() >= score_thresh)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score_or_zero()
            .total_cmp(&dets[a].score_or_zero())
            .then(a.cmp(&b))
    });
    let mut kept: Vec<BBox> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(k, d) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
