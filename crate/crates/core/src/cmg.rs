//! Cross-modal guidance: align the thermal student's pyramid with the
//! pyramid of a frozen teacher trained on visible images.
//!
//! Per level `k` the consistency term is `mean|S_k - T_k| + λ·(1 - cos)`,
//! weighted by `α_k`. It is evaluated either over whole maps or over RoIAlign
//! patches of the ground-truth boxes.

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::detector::{DetectorModel, FeatureNet, ModelConfig, ObjectiveConfig, StepRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::geometry::{assign_fpn_level, roi_align, roi_align_tensor, BBox, FeaturePyramid, PyramidTensors};
use crate::numeric::probe::{self, Aux};
use crate::numeric::{Real, Tape, Tensor, Var};

/// Guards the cosine denominator against all-zero feature vectors.
pub const COS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmgMode {
    FullMap,
    Roi,
}

/// How `cos(S_k, T_k)` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineVariant {
    /// Channel-vector cosine at every spatial location, averaged.
    PerLocation,
    /// One cosine between the flattened maps.
    GlobalFlatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmgConfig {
    pub enabled: bool,
    /// `α_k` for levels 3, 4, 5.
    pub level_weights: Vec<f64>,
    /// `λ` on the cosine term.
    pub cosine_weight: f64,
    pub mode: CmgMode,
    pub cosine_variant: CosineVariant,
    pub roi_output_size: usize,
    /// Boxes with a side shorter than this (pixels) are skipped in RoI mode.
    pub min_roi_side: f64,
    /// `λ_cms` in the total objective.
    pub weight: f64,
}

impl Default for CmgConfig {
    fn default() -> Self {
        CmgConfig {
            enabled: false,
            level_weights: vec![1.0, 1.0, 1.0],
            cosine_weight: 1.0,
            mode: CmgMode::Roi,
            cosine_variant: CosineVariant::PerLocation,
            roi_output_size: 7,
            min_roi_side: 3.0,
            weight: 1.0,
        }
    }
}

impl CmgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_weights.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::config("cmg.level_weights must be >= 0"));
        }
        if !(self.cosine_weight >= 0.0) || !(self.weight >= 0.0) {
            return Err(Error::config("cmg.cosine_weight and cmg.weight must be >= 0"));
        }
        if self.roi_output_size == 0 {
            return Err(Error::config("cmg.roi_output_size must be >= 1"));
        }
        if !(self.min_roi_side >= 0.0) {
            return Err(Error::config("cmg.min_roi_side must be >= 0"));
        }
        Ok(())
    }

    fn alpha(&self, position: usize) -> Result<f64> {
        self.level_weights
            .get(position)
            .copied()
            .ok_or_else(|| Error::config(format!("cmg.level_weights has no entry for pyramid level #{position}")))
    }
}

/// Feature consistency between a student map and a constant teacher map of
/// identical `N x C x H x W` shape. Returns the value and `d/dS`.
pub fn feature_consistency<T: Real>(s: &Tensor<T>, t: &Tensor<T>, lambda: f64, variant: CosineVariant) -> Result<(f64, Vec<f64>)> {
    if s.shape() != t.shape() {
        return Err(Error::config(format!(
            "student {:?} and teacher {:?} feature shapes differ",
            s.shape(),
            t.shape()
        )));
    }
    let [n, c, h, w] = s.dims4()?;
    let numel = s.len() as f64;
    let sd = s.data();
    let td = t.data();
    let mut grad = vec![0.0; s.len()];
    let mut l1 = 0.0;
    for (k, (&a, &b)) in sd.iter().zip(td).enumerate() {
        let d = a.as_f64() - b.as_f64();
        l1 += d.abs();
        grad[k] = if d > 0.0 {
            1.0 / numel
        } else if d < 0.0 {
            -1.0 / numel
        } else {
            0.0
        };
    }
    l1 /= numel;
    if lambda == 0.0 {
        return Ok((l1, grad));
    }
    let plane = h * w;
    // Groups of indices whose vectors are compared by cosine.
    let groups: Vec<Vec<usize>> = match variant {
        CosineVariant::PerLocation => (0..n)
            .flat_map(|b| (0..plane).map(move |p| (0..c).map(|ch| (b * c + ch) * plane + p).collect()))
            .collect(),
        CosineVariant::GlobalFlatten => vec![(0..s.len()).collect()],
    };
    let inv_groups = 1.0 / groups.len() as f64;
    let mut cos_term = 0.0;
    for idx in &groups {
        let sv: Vec<f64> = idx.iter().map(|&i| sd[i].as_f64()).collect();
        let tv: Vec<f64> = idx.iter().map(|&i| td[i].as_f64()).collect();
        let sn = sv.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
        let tn = tv.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
        // 1 - cos = ½‖ŝ - t̂‖² for unit vectors; exact zero when s == t.
        let diff: Vec<f64> = sv.iter().zip(&tv).map(|(a, b)| a / sn - b / tn).collect();
        let term = 0.5 * diff.iter().map(|x| x * x).sum::<f64>();
        cos_term += term;
        let scale = lambda * inv_groups;
        if sn > COS_EPS {
            let dot: f64 = sv.iter().zip(&tv).map(|(a, b)| (a / sn) * (b / tn)).sum();
            for (k, &i) in idx.iter().enumerate() {
                grad[i] += scale * (-(tv[k] / tn) + (sv[k] / sn) * dot) / sn;
            }
        } else {
            for (k, &i) in idx.iter().enumerate() {
                grad[i] += scale * diff[k] / COS_EPS;
            }
        }
    }
    Ok((l1 + lambda * cos_term * inv_groups, grad))
}

/// Consistency loss between the student pyramid (on the tape) and detached
/// teacher features. Differentiable with respect to the student only.
pub fn cms_loss<T: Real>(
    tape: &mut Tape<T>,
    student: &FeaturePyramid,
    teacher: &PyramidTensors<T>,
    gt: &[Vec<BBox>],
    cfg: &CmgConfig,
) -> Result<Var> {
    probe::aux(Aux::Cmg);
    if student.levels.len() != teacher.levels.len() {
        return Err(Error::config("student and teacher pyramids have different depths"));
    }
    for (k, (&s, t)) in student.levels.iter().zip(&teacher.levels).enumerate() {
        if tape.value(s).shape() != t.shape() {
            return Err(Error::config(format!(
                "pyramid level #{k}: student {:?} vs teacher {:?}",
                tape.value(s).shape(),
                t.shape()
            )));
        }
    }
    let mut inputs = Vec::new();
    let mut local = Vec::new();
    let mut value = 0.0;
    match cfg.mode {
        CmgMode::FullMap => {
            for (k, (&s, t)) in student.levels.iter().zip(&teacher.levels).enumerate() {
                let alpha = cfg.alpha(k)?;
                if alpha == 0.0 {
                    continue;
                }
                let (v, g) = feature_consistency(tape.value(s), t, cfg.cosine_weight, cfg.cosine_variant)?;
                value += alpha * v;
                inputs.push(s);
                local.push(g.into_iter().map(|x| x * alpha).collect::<Vec<_>>());
            }
        }
        CmgMode::Roi => {
            let (img_h, img_w) = student.image_size(tape)?;
            let out = cfg.roi_output_size;
            let mut terms = Vec::new();
            for (n, boxes) in gt.iter().enumerate() {
                for b in boxes {
                    let Some(b) = b.clip(img_w as f64, img_h as f64) else { continue };
                    if b.width() < cfg.min_roi_side || b.height() < cfg.min_roi_side {
                        continue;
                    }
                    let level = assign_fpn_level(&b, &student.spec, out);
                    let pos = student.spec.position(level).expect("assigned level exists");
                    let stride = student.spec.levels[pos].stride;
                    let Some(sp) = roi_align(tape, student.levels[pos], n, &b, out, stride)? else { continue };
                    let tp = roi_align_tensor(&teacher.levels[pos], n, &b, out, stride)?.expect("same geometry as student");
                    terms.push((sp, tp, cfg.alpha(pos)?));
                }
            }
            if terms.is_empty() {
                return Ok(tape.constant(Tensor::scalar(T::zero())));
            }
            let inv_r = 1.0 / terms.len() as f64;
            for (sp, tp, alpha) in terms {
                let (v, g) = feature_consistency(tape.value(sp), &tp, cfg.cosine_weight, cfg.cosine_variant)?;
                value += alpha * v * inv_r;
                inputs.push(sp);
                local.push(g.into_iter().map(|x| x * alpha * inv_r).collect());
            }
        }
    }
    if inputs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let local = inputs
        .iter()
        .zip(local)
        .map(|(&v, g)| Tensor::from_vec(tape.value(v).shape().to_vec(), g.into_iter().map(T::lit).collect()).map(Some))
        .collect::<Result<Vec<_>>>()?;
    tape.fused_scalar("cms_loss", T::lit(value), inputs, local)
}

/// Frozen backbone and neck of a detector trained on visible images.
#[derive(Debug, Clone)]
pub struct TeacherBundle<T> {
    pub net: FeatureNet<T>,
}

impl<T: Real> TeacherBundle<T> {
    /// Freeze every parameter of `net`.
    pub fn new(mut net: FeatureNet<T>) -> Self {
        net.store.freeze_all();
        TeacherBundle { net }
    }

    pub fn in_channels(&self) -> usize {
        self.net.cfg.in_channels
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn checksum(&self) -> String {
        self.net.store.checksum()
    }

    pub fn is_frozen(&self) -> bool {
        self.net.store.iter().all(|p| p.frozen)
    }
}

/// Teacher pyramid for a batch of visible images, with no graph attached.
pub fn teacher_forward<T: Real>(bundle: &TeacherBundle<T>, visible: &Tensor<T>) -> Result<PyramidTensors<T>> {
    let [_, c, _, _] = visible.dims4()?;
    if c != bundle.in_channels() {
        return Err(Error::config(format!(
            "teacher expects {} input channels, got {c}",
            bundle.in_channels()
        )));
    }
    let mut tape = Tape::no_grad();
    let x = tape.constant(visible.clone());
    let pyr = bundle.net.forward(&mut tape, x)?;
    Ok(pyr.detach(&tape))
}

/// Train a detector on the visible images of `split` with the detection loss
/// alone, then freeze its backbone and neck as the teacher. `epochs = 0`
/// yields a randomly initialised (but frozen) teacher. Returns the full
/// detector too, for checkpointing and evaluation.
pub fn pretrain_teacher(
    split: &Split,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    epochs: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(TeacherBundle<f32>, DetectorModel<f32>)> {
    if split.is_empty() {
        return Err(Error::config("teacher pretraining needs a non-empty visible split"));
    }
    let cfg = ModelConfig { in_channels: 3, ..model_cfg.clone() };
    let visible = split.visible();
    let mut state = TrainState::new(&cfg, train.clone(), ObjectiveConfig::default(), None)?;
    state.fit(&visible, epochs, &mut on_step)?;
    let model = state.model;
    Ok((TeacherBundle::new(model.net.clone()), model))
}
