//! COCO-protocol detection metrics, a duplicate-detection proxy and the
//! silhouette score of labelled embeddings.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

use super::dataset::Annotation;

/// Scored detections of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: u64,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub recall_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub num_classes: usize,
    /// `[all, small, medium, large]` as inclusive `(lo, hi)` area ranges.
    pub area_ranges: [(f64, f64); 4],
}

/// `start, start + step, ...` with `n` points, built the way NumPy's
/// `linspace` does so thresholds compare bit-exactly with reference tools.
fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    let step = (stop - start) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| start + i as f64 * step).collect();
    v[n - 1] = stop;
    v
}

impl EvalParams {
    /// IoU 0.50:0.05:0.95, 101 recall points, 100 detections per image, area
    /// buckets small < 1/100 and medium < 1/25 of `image_area`.
    pub fn coco(num_classes: usize, image_area: f64) -> Self {
        EvalParams {
            iou_thresholds: linspace(0.5, 0.95, 10),
            recall_thresholds: linspace(0.0, 1.0, 101),
            max_dets: 100,
            num_classes,
            area_ranges: [
                (0.0, 1e10),
                (0.0, image_area / 100.0),
                (image_area / 100.0, image_area / 25.0),
                (image_area / 25.0, 1e10),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    pub map_s: f64,
    pub map_m: f64,
    pub map_l: f64,
    pub mar: f64,
    /// AP over IoU 0.50:0.95 per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
}

struct ImageEval {
    scores: Vec<f64>,
    /// `[threshold][det]`.
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

fn evaluate_image(gts: &[BBox], dets: &[BBox], p: &EvalParams, area: (f64, f64)) -> ImageEval {
    let ignore_gt = |g: &BBox| g.area() < area.0 || g.area() > area.1;
    // Non-ignored ground truth first, otherwise in input order.
    let mut gorder: Vec<usize> = (0..gts.len()).collect();
    gorder.sort_by_key(|&i| ignore_gt(&gts[i]));
    let g: Vec<&BBox> = gorder.iter().map(|&i| &gts[i]).collect();
    let g_ign: Vec<bool> = g.iter().map(|b| ignore_gt(b)).collect();

    let mut dorder: Vec<usize> = (0..dets.len()).collect();
    dorder.sort_by(|&a, &b| dets[b].score_or_zero().total_cmp(&dets[a].score_or_zero()));
    dorder.truncate(p.max_dets);
    let d: Vec<&BBox> = dorder.iter().map(|&i| &dets[i]).collect();

    let ious: Vec<Vec<f64>> = d.iter().map(|dd| g.iter().map(|gg| iou(dd, gg)).collect()).collect();
    let nt = p.iou_thresholds.len();
    let mut matched = vec![vec![false; d.len()]; nt];
    let mut ignored = vec![vec![false; d.len()]; nt];
    for (t, &thr) in p.iou_thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; g.len()];
        for di in 0..d.len() {
            let mut best = thr.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for gi in 0..g.len() {
                if gt_taken[gi] {
                    continue;
                }
                if let Some(mm) = m {
                    if !g_ign[mm] && g_ign[gi] {
                        break;
                    }
                }
                if ious[di][gi] < best {
                    continue;
                }
                best = ious[di][gi];
                m = Some(gi);
            }
            if let Some(mm) = m {
                gt_taken[mm] = true;
                matched[t][di] = true;
                ignored[t][di] = g_ign[mm];
            }
        }
        for di in 0..d.len() {
            if !matched[t][di] {
                let a = d[di].area();
                ignored[t][di] = a < area.0 || a > area.1;
            }
        }
    }
    ImageEval {
        scores: d.iter().map(|b| b.score_or_zero()).collect(),
        matched,
        ignored,
        num_gt: g_ign.iter().filter(|&&x| !x).count(),
    }
}

/// Per IoU threshold: interpolated precision curve and final recall.
type Curves = Vec<(Vec<f64>, f64)>;

/// Precision at each recall threshold (`None` when the class has no
/// ground truth in range) and final recall, per IoU threshold.
fn accumulate(evals: &[ImageEval], p: &EvalParams) -> Option<Curves> {
    let num_gt: usize = evals.iter().map(|e| e.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (ei, e) in evals.iter().enumerate() {
        for (di, &s) in e.scores.iter().enumerate() {
            flat.push((s, ei, di));
        }
    }
    flat.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::with_capacity(p.iou_thresholds.len());
    for t in 0..p.iou_thresholds.len() {
        let (mut tp, mut fp) = (0.0, 0.0);
        let mut rc = Vec::new();
        let mut pr = Vec::new();
        for &(_, ei, di) in &flat {
            let e = &evals[ei];
            if e.ignored[t][di] {
                continue;
            }
            if e.matched[t][di] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            rc.push(tp / num_gt as f64);
            pr.push(tp / (tp + fp + f64::EPSILON));
        }
        let recall = rc.last().copied().unwrap_or(0.0);
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let mut q = vec![0.0; p.recall_thresholds.len()];
        for (ri, &r) in p.recall_thresholds.iter().enumerate() {
            let idx = rc.partition_point(|&x| x < r);
            if idx >= pr.len() {
                break;
            }
            q[ri] = pr[idx];
        }
        out.push((q, recall));
    }
    Some(out)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// COCO-style AP/AR over every annotated image. Detections for images that
/// are not annotated are rejected.
pub fn evaluate(detections: &[ImageDetections], annotations: &[Annotation], p: &EvalParams) -> Result<EvalReport> {
    let mut images: BTreeMap<u64, (Vec<BBox>, Vec<BBox>)> = BTreeMap::new();
    for a in annotations {
        images.entry(a.image_id).or_default().0.extend(a.boxes.iter().copied());
    }
    for d in detections {
        match images.get_mut(&d.image_id) {
            Some(entry) => entry.1.extend(d.boxes.iter().copied()),
            None => return Err(Error::Validation(format!("detections reference unknown image_id {}", d.image_id))),
        }
    }
    // [area][class] -> per-threshold (precision curve, recall)
    let mut table: Vec<Vec<Option<Curves>>> = Vec::new();
    for &area in &p.area_ranges {
        let mut per_class = Vec::new();
        for c in 0..p.num_classes {
            let evals: Vec<ImageEval> = images
                .values()
                .map(|(g, d)| {
                    let gc: Vec<BBox> = g.iter().filter(|b| b.class_id == c).copied().collect();
                    let dc: Vec<BBox> = d.iter().filter(|b| b.class_id == c).copied().collect();
                    evaluate_image(&gc, &dc, p, area)
                })
                .collect();
            per_class.push(accumulate(&evals, p));
        }
        table.push(per_class);
    }
    let ap = |area: usize, thr: Option<usize>| {
        mean(table[area].iter().flatten().flat_map(|per_t| {
            per_t
                .iter()
                .enumerate()
                .filter(move |(t, _)| thr.is_none_or(|x| x == *t))
                .flat_map(|(_, (q, _))| q.iter().copied())
        }))
    };
    let t50 = p.iou_thresholds.iter().position(|&t| (t - 0.5).abs() < 1e-12);
    let t75 = p.iou_thresholds.iter().position(|&t| (t - 0.75).abs() < 1e-12);
    let per_class_ap = table[0]
        .iter()
        .map(|c| c.as_ref().map(|per_t| mean(per_t.iter().flat_map(|(q, _)| q.iter().copied()))))
        .collect();
    Ok(EvalReport {
        map: ap(0, None),
        map50: t50.map_or(0.0, |t| ap(0, Some(t))),
        map75: t75.map_or(0.0, |t| ap(0, Some(t))),
        map_s: ap(1, None),
        map_m: ap(2, None),
        map_l: ap(3, None),
        mar: mean(table[0].iter().flatten().flat_map(|per_t| per_t.iter().map(|(_, r)| *r))),
        per_class_ap,
    })
}

/// Share of same-image detection pairs that are redundant: same class,
/// mutual IoU above `iou_dup`, and both overlapping one ground-truth box of
/// that class with IoU at least 0.5. Only detections scoring at least
/// `score_threshold` take part; with fewer than two such detections per
/// image there are no pairs and the rate is 0.
pub fn duplicate_rate(
    detections: &[ImageDetections],
    annotations: &[Annotation],
    iou_dup: f64,
    score_threshold: f64,
) -> Result<f64> {
    let gt: HashMap<u64, &Vec<BBox>> = annotations.iter().map(|a| (a.image_id, &a.boxes)).collect();
    let (mut dup, mut pairs) = (0u64, 0u64);
    for d in detections {
        let g = gt
            .get(&d.image_id)
            .ok_or_else(|| Error::Validation(format!("detections reference unknown image_id {}", d.image_id)))?;
        let kept: Vec<&BBox> = d.boxes.iter().filter(|b| b.score_or_zero() >= score_threshold).collect();
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                pairs += 1;
                let (a, b) = (kept[i], kept[j]);
                if a.class_id != b.class_id || iou(a, b) <= iou_dup {
                    continue;
                }
                let shared = g
                    .iter()
                    .any(|t| t.class_id == a.class_id && iou(a, t) >= 0.5 && iou(b, t) >= 0.5);
                if shared {
                    dup += 1;
                }
            }
        }
    }
    Ok(if pairs == 0 { 0.0 } else { dup as f64 / pairs as f64 })
}

/// Mean silhouette coefficient under Euclidean distance. Members of
/// singleton clusters score 0. `None` unless there are between 2 and
/// `n - 1` distinct labels.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let n = points.len();
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if labels.len() != n || distinct.len() < 2 || distinct.len() > n.saturating_sub(1) {
        return None;
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for j in 0..n {
            if i == j {
                continue;
            }
            let e = sums.entry(labels[j]).or_default();
            e.0 += dist(&points[i], &points[j]);
            e.1 += 1;
        }
        let own = sums.get(&labels[i]).copied().unwrap_or((0.0, 0));
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Some(total / n as f64)
}
