//! Thermal-only inference: forward, decode, score, class-wise NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, BBox};
use crate::numeric::{sigmoid, Real, Tape, Tensor};

use super::loss::{decode, location_center};
use super::model::DetectorModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            score_threshold: 0.01,
            nms_iou: 0.65,
            max_detections: 100,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config("infer thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Detections for every image of an `N x 1 x H x W` thermal batch. Only the
/// detector runs; no training-time objective is touched.
pub fn infer<T: Real>(model: &DetectorModel<T>, thermal: &Tensor<T>, cfg: &InferConfig) -> Result<Vec<Vec<BBox>>> {
    let [n, _, img_h, img_w] = thermal.dims4()?;
    let mut tape = Tape::no_grad();
    let x = tape.constant(thermal.clone());
    let out = model.forward(&mut tape, x)?;
    let spec = model.spec();
    let mut result = Vec::with_capacity(n);
    for b in 0..n {
        let mut cands = Vec::new();
        for (lv, level) in out.levels.iter().zip(&spec.levels) {
            let cls = tape.value(lv.cls);
            let obj = tape.value(lv.obj);
            let reg = tape.value(lv.reg);
            let [_, nc, h, w] = cls.dims4()?;
            let plane = h * w;
            for i in 0..h {
                for j in 0..w {
                    let loc = i * w + j;
                    let po = sigmoid(obj.data()[b * plane + loc].as_f64());
                    if po < cfg.score_threshold {
                        continue;
                    }
                    let r = [0, 1, 2, 3].map(|k| reg.data()[(b * 4 + k) * plane + loc].as_f64());
                    let [x1, y1, x2, y2] = decode(r, location_center(i, j, level.stride), level.stride);
                    for c in 0..nc {
                        let score = po * sigmoid(cls.data()[(b * nc + c) * plane + loc].as_f64());
                        if score < cfg.score_threshold {
                            continue;
                        }
                        let raw = BBox { x1, y1, x2, y2, class_id: c, score: Some(score) };
                        if let Some(bx) = raw.clip(img_w as f64, img_h as f64) {
                            cands.push(bx.with_score(score));
                        }
                    }
                }
            }
        }
        let mut kept = nms(&cands, cfg.nms_iou, cfg.score_threshold);
        kept.truncate(cfg.max_detections);
        result.push(kept);
    }
    Ok(result)
}
