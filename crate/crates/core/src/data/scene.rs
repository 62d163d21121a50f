//! Paired thermal / visible synthetic scenes.
//!
//! Class 0 is a filled disk, class 1 an annulus (hole radius half the outer
//! radius) and class 2 an axis-aligned rectangle. The thermal channel shows
//! objects as a faint warm offset over smooth background clutter; the
//! visible channel paints each class with its own colour and stripe pattern.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numeric::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["person", "bicycle", "car"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent as a fraction of the image side.
    pub min_frac: f64,
    pub max_frac: f64,
    pub min_side: usize,
    /// Thermal object-vs-background offset range.
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub blur_sigma: f64,
    /// Smoothing scale and amplitude of the thermal background clutter.
    pub clutter_sigma: f64,
    pub clutter_amplitude: f64,
    pub thermal_noise: f64,
    pub visible_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 128,
            min_objects: 1,
            max_objects: 6,
            min_frac: 0.08,
            max_frac: 0.3,
            min_side: 4,
            contrast_min: 0.05,
            contrast_max: 0.2,
            blur_sigma: 0.8,
            clutter_sigma: 6.0,
            clutter_amplitude: 0.08,
            thermal_noise: 0.02,
            visible_noise: 0.03,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 || !self.size.is_multiple_of(32) {
            return Err(Error::config(format!("data.size must be a positive multiple of 32, got {}", self.size)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("data object counts must satisfy 1 <= min <= max"));
        }
        if !(0.0 < self.min_frac && self.min_frac <= self.max_frac && self.max_frac < 1.0) {
            return Err(Error::config("data size fractions must satisfy 0 < min <= max < 1"));
        }
        if (self.min_frac * self.size as f64) < self.min_side as f64 {
            return Err(Error::config("data.min_frac yields objects below data.min_side"));
        }
        if !(0.0 <= self.contrast_min && self.contrast_min <= self.contrast_max) {
            return Err(Error::config("data contrast range must satisfy 0 <= min <= max"));
        }
        for (k, v) in [
            ("blur_sigma", self.blur_sigma),
            ("clutter_sigma", self.clutter_sigma),
            ("clutter_amplitude", self.clutter_amplitude),
            ("thermal_noise", self.thermal_noise),
            ("visible_noise", self.visible_noise),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("data.{k} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub bbox: BBox,
    /// Thermal offset applied to the object's pixels.
    pub delta: f64,
    /// Row-major pixel coverage over the whole image.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `1 x H x W`.
    pub thermal: Tensor<f32>,
    /// `3 x H x W`.
    pub visible: Tensor<f32>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn gt(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Annulus { cx: f64, cy: f64, r: f64 },
    Rect { x1: f64, y1: f64, x2: f64, y2: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Annulus { cx, cy, r } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= r * r && d2 > 0.25 * r * r
            }
            Shape::Rect { x1, y1, x2, y2 } => x >= x1 && x < x2 && y >= y1 && y < y2,
        }
    }
}

/// Mask over pixel centres and its tight box.
fn rasterize(shape: &Shape, class_id: usize, size: usize) -> Option<(Vec<bool>, BBox)> {
    let mut mask = vec![false; size * size];
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for i in 0..size {
        for j in 0..size {
            if shape.contains(j as f64 + 0.5, i as f64 + 0.5) {
                mask[i * size + j] = true;
                x1 = x1.min(j);
                y1 = y1.min(i);
                x2 = x2.max(j + 1);
                y2 = y2.max(i + 1);
            }
        }
    }
    if x1 == usize::MAX {
        return None;
    }
    let b = BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64, class_id).ok()?;
    Some((mask, b))
}

/// Separable Gaussian blur with clamped borders, in place on an `h x w` plane.
pub fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; plane.len()];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let jj = (j as isize + t as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * plane[i * w + jj];
            }
            tmp[i * w + j] = acc;
        }
    }
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let ii = (i as isize + t as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[ii * w + j];
            }
            plane[i * w + j] = acc;
        }
    }
}

const PALETTE: [[f64; 3]; NUM_CLASSES] = [[0.9, 0.2, 0.2], [0.2, 0.85, 0.25], [0.2, 0.3, 0.9]];

fn stripe(class_id: usize, i: usize, j: usize) -> f64 {
    let on = match class_id {
        0 => (i / 2).is_multiple_of(2),
        1 => ((i + j) / 2).is_multiple_of(2),
        _ => (j / 2).is_multiple_of(2),
    };
    if on {
        1.0
    } else {
        0.6
    }
}

/// Render one scene; fully determined by `(spec, seed)`.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size;
    let sz = n as f64;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let target = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < target && attempts < 200 {
        attempts += 1;
        let class_id = rng.gen_range(0..NUM_CLASSES);
        let side = || (spec.min_frac, spec.max_frac);
        let (lo, hi) = side();
        let shape = if class_id == 2 {
            let w = rng.gen_range(lo..=hi) * sz;
            let h = rng.gen_range(lo..=hi) * sz;
            let x1 = rng.gen_range(1.0..(sz - 1.0 - w));
            let y1 = rng.gen_range(1.0..(sz - 1.0 - h));
            Shape::Rect { x1, y1, x2: x1 + w, y2: y1 + h }
        } else {
            let r = 0.5 * rng.gen_range(lo..=hi) * sz;
            let cx = rng.gen_range((1.0 + r)..(sz - 1.0 - r));
            let cy = rng.gen_range((1.0 + r)..(sz - 1.0 - r));
            if class_id == 0 {
                Shape::Disk { cx, cy, r }
            } else {
                Shape::Annulus { cx, cy, r }
            }
        };
        let Some((mask, bbox)) = rasterize(&shape, class_id, n) else { continue };
        if bbox.width() < spec.min_side as f64 || bbox.height() < spec.min_side as f64 {
            continue;
        }
        let gap = 2.0;
        let clashes = objects.iter().any(|o| {
            bbox.x1 < o.bbox.x2 + gap && o.bbox.x1 < bbox.x2 + gap && bbox.y1 < o.bbox.y2 + gap && o.bbox.y1 < bbox.y2 + gap
        });
        if clashes {
            continue;
        }
        let delta = rng.gen_range(spec.contrast_min..=spec.contrast_max);
        objects.push(SceneObject { bbox, delta, mask });
    }

    // Thermal: smooth clutter around mid-grey, warm objects, optics blur, sensor noise.
    let mut clutter: Vec<f64> = (0..n * n).map(|_| unit.sample(&mut rng)).collect();
    gaussian_blur(&mut clutter, n, n, spec.clutter_sigma);
    let peak = clutter.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut thermal: Vec<f64> = clutter.iter().map(|v| 0.5 + spec.clutter_amplitude * v / peak).collect();
    for o in &objects {
        for (t, &m) in thermal.iter_mut().zip(&o.mask) {
            if m {
                *t += o.delta;
            }
        }
    }
    gaussian_blur(&mut thermal, n, n, spec.blur_sigma);
    for t in thermal.iter_mut() {
        *t += spec.thermal_noise * unit.sample(&mut rng);
    }

    // Visible: textured grey background, class colour times class stripes.
    let mut visible = vec![0.0; 3 * n * n];
    for ch in 0..3 {
        for p in 0..n * n {
            visible[ch * n * n + p] = 0.4 + 0.05 * ((p / n + 3 * (p % n) + 7 * ch) % 5) as f64 / 4.0;
        }
    }
    for o in &objects {
        let c = o.bbox.class_id;
        for (p, &m) in o.mask.iter().enumerate() {
            if m {
                let s = stripe(c, p / n, p % n);
                for ch in 0..3 {
                    visible[ch * n * n + p] = PALETTE[c][ch] * s;
                }
            }
        }
    }
    for v in visible.iter_mut() {
        *v += spec.visible_noise * unit.sample(&mut rng);
    }

    Ok(Scene {
        thermal: Tensor::from_vec(vec![1, n, n], thermal.into_iter().map(|v| v as f32).collect())?,
        visible: Tensor::from_vec(vec![3, n, n], visible.into_iter().map(|v| v as f32).collect())?,
        objects,
    })
}
