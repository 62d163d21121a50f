//! Direct-summation reference implementations in plain `f64` loops.

use cgdet::geometry::BBox;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Supervised contrastive loss: anchors with at least one in-batch positive,
/// denominators over every other batch row plus different-class queue entries.
pub fn supcon(z: &[Vec<f64>], classes: &[usize], queue: &[(Vec<f64>, usize)], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..z.len() {
        let positives: Vec<usize> = (0..z.len()).filter(|&p| p != i && classes[p] == classes[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for a in 0..z.len() {
            if a != i {
                denom += (dot(&z[i], &z[a]) / tau).exp();
            }
        }
        for (q, c) in queue {
            if *c != classes[i] {
                denom += (dot(&z[i], q) / tau).exp();
            }
        }
        let mut li = 0.0;
        for &p in &positives {
            li -= ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += li / positives.len() as f64;
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Value at continuous feature coordinates `(y, x)` where cell `k` is centred
/// at `k + 0.5`; positions beyond the outer centres take the border value.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = (y - 0.5).max(0.0).min((h - 1) as f64);
    let x = (x - 0.5).max(0.0).min((w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c];
    at(y0, x0) * (1.0 - fy) * (1.0 - fx) + at(y0, x1) * (1.0 - fy) * fx + at(y1, x0) * fy * (1.0 - fx) + at(y1, x1) * fy * fx
}

/// One bilinear sample at the centre of each of `out x out` bins: `C x out x out`.
pub fn roi_pool(map: &[f64], dims: [usize; 4], n: usize, b: &BBox, out: usize, stride: f64) -> Vec<f64> {
    let [_, c, h, w] = dims;
    let bin_w = (b.x2 - b.x1) / stride / out as f64;
    let bin_h = (b.y2 - b.y1) / stride / out as f64;
    let mut v = Vec::new();
    for ch in 0..c {
        let plane = &map[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
        for i in 0..out {
            for j in 0..out {
                let y = b.y1 / stride + (i as f64 + 0.5) * bin_h;
                let x = b.x1 / stride + (j as f64 + 0.5) * bin_w;
                v.push(bilinear(plane, h, w, y, x));
            }
        }
    }
    v
}

/// `mean|s - t| + λ (1 - cos)` for `C x P` maps; the cosine is either the
/// mean over the `P` channel vectors or one cosine of the flattened maps.
pub fn consistency(s: &[f64], t: &[f64], channels: usize, lambda: f64, per_location: bool) -> f64 {
    let l1 = s.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.len() as f64;
    let cos = |a: &[f64], b: &[f64]| dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
    let one_minus_cos = if per_location {
        let p = s.len() / channels;
        let mut acc = 0.0;
        for loc in 0..p {
            let sv: Vec<f64> = (0..channels).map(|c| s[c * p + loc]).collect();
            let tv: Vec<f64> = (0..channels).map(|c| t[c * p + loc]).collect();
            acc += 1.0 - cos(&sv, &tv);
        }
        acc / p as f64
    } else {
        1.0 - cos(s, t)
    };
    l1 + lambda * one_minus_cos
}

pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Pyramid position whose `grid x grid` footprint is closest in log scale.
pub fn level_for(b: &BBox, grid: usize) -> usize {
    let side = ((b.x2 - b.x1) * (b.y2 - b.y1)).sqrt();
    let cost = |k: usize| (side / (grid * STRIDES[k]) as f64).log2().abs();
    let mut best = 0;
    for k in 1..3 {
        if cost(k) < cost(best) - 1e-9 {
            best = k;
        }
    }
    best
}

pub struct Map {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

/// RoI-mode consistency: mean over usable ground-truth boxes of
/// `α_level · consistency` on pooled student and teacher patches.
#[allow(clippy::too_many_arguments)]
pub fn cms_roi(student: &[Map], teacher: &[Map], gt: &[Vec<BBox>], alpha: &[f64], lambda: f64, out: usize, min_side: f64, image: (f64, f64)) -> f64 {
    let mut terms = Vec::new();
    for (n, boxes) in gt.iter().enumerate() {
        for b in boxes {
            let x1 = b.x1.max(0.0);
            let y1 = b.y1.max(0.0);
            let x2 = b.x2.min(image.1);
            let y2 = b.y2.min(image.0);
            if x2 - x1 < min_side || y2 - y1 < min_side {
                continue;
            }
            let b = BBox::new(x1, y1, x2, y2, b.class_id).unwrap();
            let k = level_for(&b, out);
            let stride = STRIDES[k] as f64;
            let s = roi_pool(&student[k].data, student[k].dims, n, &b, out, stride);
            let t = roi_pool(&teacher[k].data, teacher[k].dims, n, &b, out, stride);
            terms.push(alpha[k] * consistency(&s, &t, student[k].dims[1], lambda, true));
        }
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

/// Full-map consistency summed over levels with weights `α`.
pub fn cms_full_map(student: &[Map], teacher: &[Map], alpha: &[f64], lambda: f64, per_location: bool) -> f64 {
    let mut total = 0.0;
    for k in 0..student.len() {
        let [n, c, h, w] = student[k].dims;
        if per_location {
            // Per-location cosine averages over every (image, location) pair.
            let per_img = c * h * w;
            let mut l1 = 0.0;
            let mut cos_acc = 0.0;
            for img in 0..n {
                let s = &student[k].data[img * per_img..(img + 1) * per_img];
                let t = &teacher[k].data[img * per_img..(img + 1) * per_img];
                let v = consistency(s, t, c, lambda, true);
                let l1_img = s.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / per_img as f64;
                l1 += l1_img / n as f64;
                cos_acc += (v - l1_img) / n as f64;
            }
            total += alpha[k] * (l1 + cos_acc);
        } else {
            total += alpha[k] * consistency(&student[k].data, &teacher[k].data, c, lambda, false);
        }
    }
    total
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce(x: f64, y: f64) -> f64 {
    -(y * sigmoid(x).ln() + (1.0 - y) * (1.0 - sigmoid(x)).ln())
}

pub struct HeadLevel {
    /// `N x C x H x W`, `N x 1 x H x W`, `N x 4 x H x W`.
    pub cls: Map,
    pub obj: Map,
    pub reg: Map,
}

/// Detection loss `w_cls·cls + w_obj·obj + w_iou·(1 - IoU)`: positives are
/// locations within `radius` strides of a box centre on the box's level,
/// the smallest box winning shared locations.
pub fn detection(levels: &[HeadLevel], gt: &[Vec<BBox>], weights: [f64; 3], radius: f64, grid: usize) -> f64 {
    let classes = levels[0].cls.dims[1];
    // (image, level, i, j) -> gt index
    let mut owner = std::collections::HashMap::new();
    for (n, boxes) in gt.iter().enumerate() {
        for (g, b) in boxes.iter().enumerate() {
            let k = level_for(b, grid);
            let s = STRIDES[k] as f64;
            let [_, _, h, w] = levels[k].obj.dims;
            let (gx, gy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
            for i in 0..h {
                for j in 0..w {
                    let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                    if ((cx - gx).powi(2) + (cy - gy).powi(2)).sqrt() > radius * s {
                        continue;
                    }
                    let area = |x: &BBox| (x.x2 - x.x1) * (x.y2 - x.y1);
                    let e = owner.entry((n, k, i, j)).or_insert(g);
                    if area(b) < area(&boxes[*e]) {
                        *e = g;
                    }
                }
            }
        }
    }
    let mut obj = 0.0;
    let mut locations = 0;
    for (k, lv) in levels.iter().enumerate() {
        let [n, _, h, w] = lv.obj.dims;
        for img in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let y = if owner.contains_key(&(img, k, i, j)) { 1.0 } else { 0.0 };
                    obj += bce(lv.obj.data[(img * h + i) * w + j], y);
                    locations += 1;
                }
            }
        }
    }
    obj /= locations as f64;
    let (mut cls, mut iou) = (0.0, 0.0);
    for (&(img, k, i, j), &g) in &owner {
        let lv = &levels[k];
        let [_, _, h, w] = lv.obj.dims;
        let b = &gt[img][g];
        for c in 0..classes {
            let y = if c == b.class_id { 1.0 } else { 0.0 };
            cls += bce(lv.cls.data[((img * classes + c) * h + i) * w + j], y);
        }
        let s = STRIDES[k] as f64;
        let d: Vec<f64> = (0..4).map(|r| lv.reg.data[((img * 4 + r) * h + i) * w + j].exp() * s).collect();
        let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
        let p = [cx - d[0], cy - d[1], cx + d[2], cy + d[3]];
        let iw = (p[2].min(b.x2) - p[0].max(b.x1)).max(0.0);
        let ih = (p[3].min(b.y2) - p[1].max(b.y1)).max(0.0);
        let inter = iw * ih;
        let union = (p[2] - p[0]) * (p[3] - p[1]) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
        iou += 1.0 - inter / union;
    }
    let m = owner.len() as f64;
    if owner.is_empty() {
        return weights[1] * obj;
    }
    weights[0] * cls / (m * classes as f64) + weights[1] * obj + weights[2] * iou / m
}

/// Six nested loops: `out[n][o][y][x] = b[o] + Σ_{c,ky,kx} w[o][c][ky][kx] · in[n][c][y·s+ky-p][x·s+kx-p]`.
pub fn conv2d(input: &Map, weight: &Map, bias: &[f64], stride: usize, pad: usize) -> Map {
    let [n, cin, h, w] = input.dims;
    let [cout, _, k, _] = weight.dims;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += weight.data[((o * cin + c) * k + ky) * k + kx] * input.data[((b * cin + c) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + y) * wo + x] = acc;
                }
            }
        }
    }
    Map { dims: [n, cout, ho, wo], data: out }
}
