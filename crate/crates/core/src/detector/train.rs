//! Objective assembly, one optimisation step, and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmg::{cms_loss, teacher_forward, CmgConfig, TeacherBundle};
use crate::data::{Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::{BBox, PyramidTensors};
use crate::numeric::{Real, Sgd, Tape, Tensor, Var};
use crate::rcs::{build_sets, embed_rois, supcon_loss, MemoryQueue, RcsConfig, RcsHead, RoiEmbedding};
use crate::seed::derive_seed;

use super::loss::{detection_loss, total_loss, DetLossConfig, TotalLossConfig};
use super::model::{DetectorModel, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            momentum: 0.9,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            warmup_steps: 50,
            schedule: Schedule::Cosine,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.lr must be > 0 and train.momentum in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate for `step` out of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Cosine if total > 0 => {
                let t = (step as f64 / total as f64).min(1.0);
                0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::Cosine => 1.0,
        };
        self.lr * warm * decay
    }
}

/// Every knob of the training objective.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub det: DetLossConfig,
    pub rcs: RcsConfig,
    pub cmg: CmgConfig,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.det.validate()?;
        self.rcs.validate()?;
        self.cmg.validate()
    }

    pub fn rcs_active(&self) -> bool {
        self.rcs.enabled && self.rcs.weight != 0.0
    }

    pub fn cmg_active(&self) -> bool {
        self.cmg.enabled && self.cmg.weight != 0.0
    }

    pub fn weights(&self) -> TotalLossConfig {
        TotalLossConfig {
            rcs_weight: if self.rcs.enabled { self.rcs.weight } else { 0.0 },
            cms_weight: if self.cmg.enabled { self.cmg.weight } else { 0.0 },
        }
    }
}

/// One mini-batch of standardised images: `N x 1 x H x W` thermal,
/// optional `N x 3 x H x W` visible.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub thermal: Tensor<T>,
    pub visible: Option<Tensor<T>>,
    pub gt: Vec<Vec<BBox>>,
}

/// Per-image, per-channel standardisation to zero mean and unit variance.
/// Every image enters the network this way, in training and inference.
pub fn standardize(image: &Tensor<f32>) -> Vec<f64> {
    let shape = image.shape();
    let c = shape[0];
    let plane = image.len() / c.max(1);
    let mut out = Vec::with_capacity(image.len());
    for ch in image.data().chunks(plane) {
        let n = ch.len() as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt().max(1e-6);
        out.extend(ch.iter().map(|&v| (v as f64 - mean) * inv));
    }
    out
}

fn stack<T: Real>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::config(format!("expected C x H x W images, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for t in images {
        if t.shape() != shape.as_slice() {
            return Err(Error::config(format!("image shapes {:?} and {:?} differ", t.shape(), shape)));
        }
        data.extend(standardize(t).into_iter().map(T::lit));
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::from_vec(full, data)
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&Sample], with_visible: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let thermal = stack(&samples.iter().map(|s| &s.thermal).collect::<Vec<_>>())?;
        let visible = if with_visible {
            Some(stack(&samples.iter().map(|s| &s.visible).collect::<Vec<_>>())?)
        } else {
            None
        };
        Ok(Batch { thermal, visible, gt: samples.iter().map(|s| s.gt.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }
}

/// Recorded objective of one forward pass.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub total: Var,
    pub l_det: f64,
    pub l_rcs: f64,
    pub l_cms: f64,
    /// Detached embeddings of this batch, for the memory queue.
    pub embeddings: Vec<RoiEmbedding<T>>,
}

/// `L_det + λ_rcs·L_rcs + λ_cms·L_cms` on `input` (the thermal batch).
/// Inactive objectives are not evaluated at all.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Real>(
    tape: &mut Tape<T>,
    model: &DetectorModel<T>,
    rcs_head: &RcsHead<T>,
    queue: &MemoryQueue<T>,
    teacher: Option<&PyramidTensors<T>>,
    input: Var,
    gt: &[Vec<BBox>],
    cfg: &ObjectiveConfig,
) -> Result<Objective<T>> {
    let out = model.forward(tape, input)?;
    let det = detection_loss(tape, &out.levels, &model.spec(), gt, &cfg.det)?;
    let mut l_rcs = None;
    let mut embeddings = Vec::new();
    if cfg.rcs_active() {
        if let Some(e) = embed_rois(tape, &out.pyramid, gt, &cfg.rcs, rcs_head)? {
            let cb = build_sets(&e.classes, queue);
            l_rcs = Some(supcon_loss(tape, e.z, &cb, queue, cfg.rcs.temperature)?);
            embeddings = e.embeddings(tape);
        }
    }
    let mut l_cms = None;
    if cfg.cmg_active() {
        let t = teacher.ok_or_else(|| Error::config("cmg.enabled requires a teacher"))?;
        l_cms = Some(cms_loss(tape, &out.pyramid, t, gt, &cfg.cmg)?);
    }
    let total = total_loss(tape, det.total, l_rcs, l_cms, &cfg.weights())?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    Ok(Objective {
        total,
        l_det: tape.value(det.total).item().as_f64(),
        l_rcs: val(l_rcs),
        l_cms: val(l_cms),
        embeddings,
    })
}

/// Per-step loss breakdown, one JSON line in the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_det: f64,
    pub l_rcs: f64,
    pub l_cms: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// Model, auxiliary head, optimiser, queue and teacher of one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DetectorModel<f32>,
    pub rcs_head: RcsHead<f32>,
    pub queue: MemoryQueue<f32>,
    pub teacher: Option<TeacherBundle<f32>>,
    pub sgd: Sgd,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub step: u64,
    /// Step count the schedule is laid out over.
    pub total_steps: u64,
}

/// Initial detector weights for a seed; independent of every auxiliary
/// setting.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<DetectorModel<f32>> {
    DetectorModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "model", 0)))
}

impl TrainState {
    pub fn new(
        model_cfg: &ModelConfig,
        train: TrainConfig,
        objective: ObjectiveConfig,
        teacher: Option<TeacherBundle<f32>>,
    ) -> Result<Self> {
        train.validate()?;
        objective.validate()?;
        if objective.cmg.enabled && teacher.is_none() {
            return Err(Error::config("cmg.enabled requires a teacher checkpoint"));
        }
        if let Some(t) = &teacher {
            if t.model_config().pyramid_channels != model_cfg.pyramid_channels || t.model_config().base_width != model_cfg.base_width {
                return Err(Error::config("teacher architecture differs from the student's"));
            }
        }
        let model = init_model(model_cfg, train.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, "rcs_head", 0));
        let rcs_head = RcsHead::new(model_cfg.pyramid_channels, objective.rcs.embed_dim, &mut rng);
        let queue = MemoryQueue::new(objective.rcs.queue_capacity);
        Ok(TrainState {
            model,
            rcs_head,
            queue,
            teacher,
            sgd: Sgd::new(train.lr, train.momentum),
            train,
            objective,
            step: 0,
            total_steps: 0,
        })
    }

    pub fn needs_visible(&self) -> bool {
        self.objective.cmg_active()
    }

    /// Forward, backward, momentum update, queue refresh.
    pub fn train_step(&mut self, batch: &Batch<f32>) -> Result<StepRecord> {
        let lr = self.train.lr_at(self.step, self.total_steps);
        let teacher_feats = match (&self.teacher, self.objective.cmg_active()) {
            (Some(t), true) => {
                let vis = batch.visible.as_ref().ok_or_else(|| Error::config("cmg needs the visible images"))?;
                Some(teacher_forward(t, vis)?)
            }
            _ => None,
        };
        let mut tape = Tape::new();
        let input = tape.constant(batch.thermal.clone());
        let obj = objective(
            &mut tape,
            &self.model,
            &self.rcs_head,
            &self.queue,
            teacher_feats.as_ref(),
            input,
            &batch.gt,
            &self.objective,
        )?;
        let record = StepRecord {
            step: self.step,
            l_det: obj.l_det,
            l_rcs: obj.l_rcs,
            l_cms: obj.l_cms,
            l_total: tape.value(obj.total).item() as f64,
            lr,
        };
        if !record.l_total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss, aborting: {}",
                serde_json::to_string(&record).expect("serialisable")
            )));
        }
        let mut grads = tape.backward(obj.total)?;
        if self.train.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > self.train.grad_clip {
                grads.scale((self.train.grad_clip / norm) as f32);
            }
        }
        let [net, head] = self.model.stores_mut();
        for store in [net, head, &mut self.rcs_head.store] {
            store.accumulate(&grads);
            self.sgd.step(store, lr);
        }
        self.queue.push(&obj.embeddings);
        self.step += 1;
        Ok(record)
    }

    /// Lay the learning-rate schedule out over `epochs` more epochs of
    /// `split`, starting from the current step.
    pub fn plan(&mut self, split: &Split, epochs: usize) -> Result<()> {
        if split.is_empty() {
            return Err(Error::config(format!("split '{}' is empty", split.name)));
        }
        let per_epoch = split.len().div_ceil(self.train.batch_size) as u64;
        self.total_steps = self.step + per_epoch * epochs as u64;
        Ok(())
    }

    /// One pass over `split` in the order fixed by `(train.seed, epoch)`.
    pub fn run_epoch(&mut self, split: &Split, epoch: usize, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut order: Vec<usize> = (0..split.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.train.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let with_visible = self.needs_visible();
        let mut records = Vec::new();
        for chunk in order.chunks(self.train.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &split.samples[i]).collect();
            let batch = Batch::from_samples(&samples, with_visible)?;
            let rec = self.train_step(&batch)?;
            on_step(&rec);
            records.push(rec);
        }
        Ok(records)
    }

    /// Run `epochs` over `split`, calling `on_step` after every step.
    pub fn fit(&mut self, split: &Split, epochs: usize, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        self.plan(split, epochs)?;
        let mut records = Vec::new();
        for epoch in 0..epochs {
            records.extend(self.run_epoch(split, epoch, &mut on_step)?);
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_split, SceneSpec};

    fn tiny_split() -> Split {
        let spec = SceneSpec { size: 64, max_objects: 3, ..Default::default() };
        make_split(&spec, 11, "train", 4).unwrap()
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let c = TrainConfig { warmup_steps: 10, ..Default::default() };
        assert!((c.lr_at(0, 100) - 0.001 * (0.05 + 0.95 * 0.5 * 2.0)).abs() < 1e-12);
        assert!(c.lr_at(9, 100) > c.lr_at(0, 100));
        assert!(c.lr_at(99, 100) < c.lr_at(10, 100));
        let flat = TrainConfig { warmup_steps: 0, schedule: Schedule::Constant, ..Default::default() };
        assert_eq!(flat.lr_at(57, 100), flat.lr);
    }

    #[test]
    fn cmg_without_teacher_is_rejected() {
        let mut obj = ObjectiveConfig::default();
        obj.cmg.enabled = true;
        let r = TrainState::new(&ModelConfig::default(), TrainConfig::default(), obj, None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn seeded_steps_repeat_bit_identically() {
        let split = tiny_split();
        let run = || {
            let mut obj = ObjectiveConfig::default();
            obj.rcs.enabled = true;
            let mut st = TrainState::new(&ModelConfig::default(), TrainConfig { batch_size: 2, ..Default::default() }, obj, None).unwrap();
            let recs = st.fit(&split, 2, |_| {}).unwrap();
            (recs, st.model.checksum(), st.queue.len())
        };
        let (a, ca, qa) = run();
        let (b, cb, _) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(qa > 0);
        assert!(a.iter().any(|r| r.l_rcs > 0.0));
    }

    #[test]
    fn inactive_auxiliaries_log_zero() {
        let split = tiny_split();
        let mut obj = ObjectiveConfig::default();
        obj.rcs.enabled = true;
        obj.rcs.weight = 0.0;
        let mut st = TrainState::new(&ModelConfig::default(), TrainConfig::default(), obj, None).unwrap();
        let recs = st.fit(&split, 1, |_| {}).unwrap();
        assert!(recs.iter().all(|r| r.l_rcs == 0.0 && r.l_cms == 0.0 && r.l_total == r.l_det));
        assert!(st.queue.is_empty());
    }
}
