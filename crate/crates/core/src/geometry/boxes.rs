use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels. `score` is present only on detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Result<Self> {
        let b = BBox {
            x1,
            y1,
            x2,
            y2,
            class_id,
            score: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::Validation(format!("degenerate box {self:?}")));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn score_or_zero(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing positive-area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            ..*self
        };
        (b.x2 > b.x1 && b.y2 > b.y1).then_some(b)
    }
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub index: usize,
    pub stride: usize,
    pub channels: usize,
}

/// Pyramid levels 3, 4, 5 with strides doubling from level to level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub levels: Vec<LevelSpec>,
}

impl PyramidSpec {
    pub fn new(levels: Vec<LevelSpec>) -> Result<Self> {
        let spec = PyramidSpec { levels };
        spec.validate()?;
        Ok(spec)
    }

    /// Levels 3..=5 at strides 8, 16, 32 with uniform channel count.
    pub fn standard(channels: usize) -> Self {
        PyramidSpec {
            levels: (3..=5)
                .map(|k| LevelSpec {
                    index: k,
                    stride: 1 << k,
                    channels,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let idx: Vec<usize> = self.levels.iter().map(|l| l.index).collect();
        if idx != [3, 4, 5] {
            return Err(Error::config(format!("pyramid levels must be exactly [3, 4, 5], got {idx:?}")));
        }
        for w in self.levels.windows(2) {
            if w[1].stride != 2 * w[0].stride || w[0].stride == 0 {
                return Err(Error::config("pyramid strides must double across levels"));
            }
        }
        Ok(())
    }

    pub fn position(&self, level_index: usize) -> Option<usize> {
        self.levels.iter().position(|l| l.index == level_index)
    }

    pub fn stride_of(&self, level_index: usize) -> usize {
        self.levels[self.position(level_index).expect("known level")].stride
    }
}

/// Pick the level whose `grid x grid` RoI grid best matches the box scale:
/// `argmin_k |log2(sqrt(w h) / (grid * stride_k))|`, ties toward the lower
/// level.
pub fn assign_fpn_level(b: &BBox, spec: &PyramidSpec, grid: usize) -> usize {
    let side = b.area().sqrt();
    let mut best = spec.levels[0].index;
    let mut best_cost = f64::INFINITY;
    for lvl in &spec.levels {
        let cost = (side / (grid as f64 * lvl.stride as f64)).log2().abs();
        if cost < best_cost - 1e-9 {
            best_cost = cost;
            best = lvl.index;
        }
    }
    best
}
