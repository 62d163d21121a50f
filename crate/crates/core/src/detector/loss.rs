//! Centre-radius label assignment, box coding, detection loss and the
//! weighted total objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assign_fpn_level, BBox, PyramidSpec};
use crate::numeric::{sigmoid, Real, Tape, Tensor, Var};

use super::model::LevelOutput;

/// Log-distance clamp applied before exponentiation.
pub const REG_CLAMP: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetLossConfig {
    pub cls_weight: f64,
    pub obj_weight: f64,
    pub iou_weight: f64,
    /// Positive radius around a ground-truth centre, in strides.
    pub radius: f64,
    /// Grid size used to map a ground-truth box to its pyramid level.
    pub assign_grid: usize,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        DetLossConfig {
            cls_weight: 1.0,
            obj_weight: 1.0,
            iou_weight: 5.0,
            radius: 1.5,
            assign_grid: 2,
        }
    }
}

impl DetLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("cls", self.cls_weight), ("obj", self.obj_weight), ("iou", self.iou_weight)] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("detector.{k}_weight must be >= 0")));
            }
        }
        if !(self.radius > 0.0) || self.assign_grid == 0 {
            return Err(Error::config("detector.radius must be > 0 and detector.assign_grid >= 1"));
        }
        Ok(())
    }
}

/// Centre of location `(i, j)` on a level with the given stride.
pub fn location_center(i: usize, j: usize, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
}

/// Side distances `(l, t, r, b)` from raw regression outputs.
pub fn distances(reg: [f64; 4], stride: usize) -> [f64; 4] {
    reg.map(|r| r.clamp(-REG_CLAMP, REG_CLAMP).exp() * stride as f64)
}

pub fn decode(reg: [f64; 4], center: (f64, f64), stride: usize) -> [f64; 4] {
    let [l, t, r, b] = distances(reg, stride);
    let (cx, cy) = center;
    [cx - l, cy - t, cx + r, cy + b]
}

/// Inverse of [`decode`] for a box strictly containing `center`.
pub fn encode(b: &BBox, center: (f64, f64), stride: usize) -> [f64; 4] {
    let (cx, cy) = center;
    let s = stride as f64;
    [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy].map(|d| (d / s).ln())
}

/// A positive location and the ground truth it regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Positive {
    pub image: usize,
    /// Position of the level within the pyramid spec.
    pub level: usize,
    pub i: usize,
    pub j: usize,
    pub gt: usize,
}

/// Locations within `radius` strides (Euclidean) of a ground-truth centre on
/// that box's level are positive. A location claimed by several boxes goes
/// to the smallest one (lower index on ties).
pub fn assign(spec: &PyramidSpec, shapes: &[(usize, usize)], gt: &[Vec<BBox>], cfg: &DetLossConfig) -> Vec<Positive> {
    let mut claimed: BTreeMap<(usize, usize, usize, usize), usize> = BTreeMap::new();
    for (n, boxes) in gt.iter().enumerate() {
        for (g, b) in boxes.iter().enumerate() {
            let level = assign_fpn_level(b, spec, cfg.assign_grid);
            let pos = spec.position(level).expect("assigned level exists");
            let stride = spec.levels[pos].stride;
            let (h, w) = shapes[pos];
            let (gx, gy) = b.center();
            let r = cfg.radius * stride as f64;
            for i in 0..h {
                for j in 0..w {
                    let (cx, cy) = location_center(i, j, stride);
                    if (cx - gx).powi(2) + (cy - gy).powi(2) > r * r {
                        continue;
                    }
                    claimed
                        .entry((n, pos, i, j))
                        .and_modify(|cur| {
                            if b.area() < boxes[*cur].area() {
                                *cur = g;
                            }
                        })
                        .or_insert(g);
                }
            }
        }
    }
    claimed
        .into_iter()
        .map(|((image, level, i, j), gt)| Positive { image, level, i, j, gt })
        .collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `1 - IoU` between a decoded box and `g`, with its gradient with respect
/// to the raw regression outputs.
pub fn iou_loss_and_grad(reg: [f64; 4], center: (f64, f64), stride: usize, g: &BBox) -> (f64, [f64; 4]) {
    let d = distances(reg, stride);
    let [l, t, r, b] = d;
    let (cx, cy) = center;
    let (x1, y1, x2, y2) = (cx - l, cy - t, cx + r, cy + b);
    let ix1 = x1.max(g.x1);
    let iy1 = y1.max(g.y1);
    let ix2 = x2.min(g.x2);
    let iy2 = y2.min(g.y2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let ap = (l + r) * (t + b);
    let union = ap + g.area() - inter;
    let iou = inter / union;

    // dI/dd for d = (l, t, r, b): a side moves the intersection only while
    // the prediction is the binding edge and the overlap is non-empty.
    let (mut di, live_w, live_h) = ([0.0; 4], ix2 > ix1, iy2 > iy1);
    if live_w && live_h {
        if x1 > g.x1 {
            di[0] = ih;
        }
        if y1 > g.y1 {
            di[1] = iw;
        }
        if x2 < g.x2 {
            di[2] = ih;
        }
        if y2 < g.y2 {
            di[3] = iw;
        }
    }
    let dap = [t + b, l + r, t + b, l + r];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let diou = di[k] / union - inter * (dap[k] - di[k]) / (union * union);
        let clamped = reg[k].abs() > REG_CLAMP;
        grad[k] = if clamped { 0.0 } else { -diou * d[k] };
    }
    (1.0 - iou, grad)
}

/// Detection loss value with its components (for logging).
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: f64,
    pub obj: f64,
    pub iou: f64,
    pub num_pos: usize,
}

/// Loss value and per-input gradients on plain tensors, in level order
/// `(cls, obj, reg)` per level.
pub struct RawLoss<T> {
    pub value: f64,
    pub cls: f64,
    pub obj: f64,
    pub iou: f64,
    pub num_pos: usize,
    pub grads: Vec<[Tensor<T>; 3]>,
}

/// `w_cls·cls + w_obj·obj + w_iou·iou` with
/// - cls: BCE of class logits against one-hot targets, mean over positives x classes;
/// - obj: BCE of objectness, mean over every location of every level;
/// - iou: `1 - IoU` of decoded boxes, mean over positives.
pub fn detection_loss_raw<T: Real>(
    outputs: &[[&Tensor<T>; 3]],
    spec: &PyramidSpec,
    gt: &[Vec<BBox>],
    cfg: &DetLossConfig,
) -> Result<RawLoss<T>> {
    if outputs.len() != spec.levels.len() {
        return Err(Error::config("head outputs do not match the pyramid levels"));
    }
    let mut shapes = Vec::new();
    let mut num_classes = 0;
    for (o, lv) in outputs.iter().zip(&spec.levels) {
        let [n, c, h, w] = o[0].dims4()?;
        if n != gt.len() {
            return Err(Error::config(format!("batch of {n} images but {} annotation lists", gt.len())));
        }
        if o[1].shape() != [n, 1, h, w] || o[2].shape() != [n, 4, h, w] {
            return Err(Error::config(format!("inconsistent head outputs at level {}", lv.index)));
        }
        num_classes = c;
        shapes.push((h, w));
    }
    for b in gt.iter().flatten() {
        b.validate()?;
        if b.class_id >= num_classes {
            return Err(Error::config(format!("class {} outside the head's {num_classes} classes", b.class_id)));
        }
    }
    let positives = assign(spec, &shapes, gt, cfg);
    let mut grads: Vec<[Vec<f64>; 3]> = outputs
        .iter()
        .map(|o| [vec![0.0; o[0].len()], vec![0.0; o[1].len()], vec![0.0; o[2].len()]])
        .collect();

    // Objectness over all locations.
    let mut obj_targets: Vec<Vec<f64>> = outputs.iter().map(|o| vec![0.0; o[1].len()]).collect();
    for p in &positives {
        let (h, w) = shapes[p.level];
        obj_targets[p.level][p.image * h * w + p.i * w + p.j] = 1.0;
    }
    let total_locs: usize = outputs.iter().map(|o| o[1].len()).sum();
    let inv_locs = 1.0 / total_locs as f64;
    let mut obj = 0.0;
    for (k, o) in outputs.iter().enumerate() {
        for (idx, &x) in o[1].data().iter().enumerate() {
            let x = x.as_f64();
            let y = obj_targets[k][idx];
            obj += softplus(x) - y * x;
            grads[k][1][idx] = cfg.obj_weight * (sigmoid(x) - y) * inv_locs;
        }
    }
    obj *= inv_locs;

    let (mut cls, mut iou) = (0.0, 0.0);
    if !positives.is_empty() {
        let inv_cls = 1.0 / (positives.len() * num_classes) as f64;
        let inv_pos = 1.0 / positives.len() as f64;
        for p in &positives {
            let (h, w) = shapes[p.level];
            let plane = h * w;
            let loc = p.i * w + p.j;
            let g = &gt[p.image][p.gt];
            let cls_t = outputs[p.level][0].data();
            for c in 0..num_classes {
                let idx = (p.image * num_classes + c) * plane + loc;
                let x = cls_t[idx].as_f64();
                let y = if c == g.class_id { 1.0 } else { 0.0 };
                cls += softplus(x) - y * x;
                grads[p.level][0][idx] += cfg.cls_weight * (sigmoid(x) - y) * inv_cls;
            }
            let reg_t = outputs[p.level][2].data();
            let ridx = |k: usize| (p.image * 4 + k) * plane + loc;
            let reg = [0, 1, 2, 3].map(|k| reg_t[ridx(k)].as_f64());
            let stride = spec.levels[p.level].stride;
            let (li, gi) = iou_loss_and_grad(reg, location_center(p.i, p.j, stride), stride, g);
            iou += li;
            for k in 0..4 {
                grads[p.level][2][ridx(k)] += cfg.iou_weight * gi[k] * inv_pos;
            }
        }
        cls *= inv_cls;
        iou *= inv_pos;
    }
    let value = cfg.cls_weight * cls + cfg.obj_weight * obj + cfg.iou_weight * iou;
    let grads = grads
        .into_iter()
        .zip(outputs)
        .map(|(g, o)| {
            let [a, b, c] = g;
            Ok([
                Tensor::from_vec(o[0].shape().to_vec(), a.into_iter().map(T::lit).collect())?,
                Tensor::from_vec(o[1].shape().to_vec(), b.into_iter().map(T::lit).collect())?,
                Tensor::from_vec(o[2].shape().to_vec(), c.into_iter().map(T::lit).collect())?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawLoss {
        value,
        cls,
        obj,
        iou,
        num_pos: positives.len(),
        grads,
    })
}

/// Differentiable detection loss over the head outputs of every level.
pub fn detection_loss<T: Real>(
    tape: &mut Tape<T>,
    levels: &[LevelOutput],
    spec: &PyramidSpec,
    gt: &[Vec<BBox>],
    cfg: &DetLossConfig,
) -> Result<DetectionLoss> {
    let outputs: Vec<[&Tensor<T>; 3]> = levels
        .iter()
        .map(|l| [tape.value(l.cls), tape.value(l.obj), tape.value(l.reg)])
        .collect();
    let raw = detection_loss_raw(&outputs, spec, gt, cfg)?;
    let mut inputs = Vec::new();
    let mut local = Vec::new();
    for (l, g) in levels.iter().zip(raw.grads) {
        let [gc, go, gr] = g;
        inputs.extend([l.cls, l.obj, l.reg]);
        local.extend([Some(gc), Some(go), Some(gr)]);
    }
    let total = tape.fused_scalar("detection_loss", T::lit(raw.value), inputs, local)?;
    Ok(DetectionLoss {
        total,
        cls: raw.cls,
        obj: raw.obj,
        iou: raw.iou,
        num_pos: raw.num_pos,
    })
}

/// Weights of the auxiliary objectives in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLossConfig {
    pub rcs_weight: f64,
    pub cms_weight: f64,
}

/// `L_det + λ_rcs·L_rcs + λ_cms·L_cms`. Absent or zero-weighted terms are
/// not recorded at all, so the reduced objective is `L_det` itself.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    l_det: Var,
    l_rcs: Option<Var>,
    l_cms: Option<Var>,
    cfg: &TotalLossConfig,
) -> Result<Var> {
    let mut terms = vec![(l_det, T::one())];
    for (term, weight) in [(l_rcs, cfg.rcs_weight), (l_cms, cfg.cms_weight)] {
        if let Some(v) = term {
            if weight != 0.0 {
                terms.push((v, T::lit(weight)));
            }
        }
    }
    tape.weighted_sum(&terms)
}
