//! End-to-end runs shared by the CLI, the examples and the acceptance
//! checks: teacher pretraining, training one ablation cell, evaluation and
//! embedding separability.

use serde::{Deserialize, Serialize};

use crate::cmg::TeacherBundle;
use crate::data::{duplicate_rate, evaluate, silhouette, EvalParams, EvalReport, ImageDetections, Split};
use crate::detector::{infer, Batch, DetectorModel, InferConfig, ModelConfig, ObjectiveConfig, StepRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::numeric::Tape;
use crate::rcs::{embed_rois, RcsConfig, RcsHead};

/// The four ablation cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Baseline,
    Rcs,
    Cmg,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Baseline, Preset::Rcs, Preset::Cmg, Preset::Full];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Rcs => "rcs",
            Preset::Cmg => "cmg",
            Preset::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset '{s}' (baseline, rcs, cmg, full)")))
    }

    pub fn uses_rcs(self) -> bool {
        matches!(self, Preset::Rcs | Preset::Full)
    }

    pub fn uses_cmg(self) -> bool {
        matches!(self, Preset::Cmg | Preset::Full)
    }

    /// Switch the auxiliary objectives on or off; weights are left alone.
    pub fn apply(self, obj: &mut ObjectiveConfig) {
        obj.rcs.enabled = self.uses_rcs();
        obj.cmg.enabled = self.uses_cmg();
    }
}

/// Scored detections on every image of a split, batch by batch.
pub fn detect_split(model: &DetectorModel<f32>, split: &Split, cfg: &InferConfig, batch_size: usize) -> Result<Vec<ImageDetections>> {
    let mut out = Vec::with_capacity(split.len());
    for chunk in split.samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Batch::<f32>::from_samples(&refs, false)?;
        for (s, boxes) in chunk.iter().zip(infer(model, &batch.thermal, cfg)?) {
            out.push(ImageDetections { image_id: s.image_id, boxes });
        }
    }
    Ok(out)
}

/// Evaluation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Pair-overlap IoU of the duplicate proxy.
    pub duplicate_iou: f64,
    /// Minimum score for a detection to count in the duplicate proxy.
    pub duplicate_score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { duplicate_iou: 0.5, duplicate_score_threshold: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub duplicate_rate: f64,
}

pub fn evaluate_model(
    model: &DetectorModel<f32>,
    split: &Split,
    infer_cfg: &InferConfig,
    eval_cfg: &EvalConfig,
) -> Result<Evaluation> {
    let (h, w) = split.image_size().ok_or_else(|| Error::config("cannot evaluate an empty split"))?;
    let dets = detect_split(model, split, infer_cfg, 8)?;
    let anns = split.annotations();
    let report = evaluate(&dets, &anns, &EvalParams::coco(model.cfg().num_classes, (h * w) as f64))?;
    let duplicate_rate = duplicate_rate(&dets, &anns, eval_cfg.duplicate_iou, eval_cfg.duplicate_score_threshold)?;
    Ok(Evaluation { report, duplicate_rate })
}

/// Mean silhouette, by class, of the RoI embeddings of every ground-truth
/// box in `split` as produced by `head` on the model's pyramid.
pub fn embedding_silhouette(model: &DetectorModel<f32>, head: &RcsHead<f32>, split: &Split, rcs: &RcsConfig) -> Result<Option<f64>> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for chunk in split.samples.chunks(8) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Batch::<f32>::from_samples(&refs, false)?;
        let mut tape = Tape::no_grad();
        let x = tape.constant(batch.thermal.clone());
        let pyr = model.net.forward(&mut tape, x)?;
        if let Some(e) = embed_rois(&mut tape, &pyr, &batch.gt, rcs, head)? {
            for emb in e.embeddings(&tape) {
                points.push(emb.z.iter().map(|&v| v as f64).collect::<Vec<f64>>());
                labels.push(emb.class_id);
            }
        }
    }
    Ok(silhouette(&points, &labels))
}

/// Outcome of training and evaluating one (preset, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub preset: Preset,
    pub seed: u64,
    pub map: f64,
    pub map50: f64,
    pub duplicate_rate: f64,
    pub silhouette: Option<f64>,
    /// Largest auxiliary loss values seen while training.
    pub max_l_rcs: f64,
    pub max_l_cms: f64,
    pub steps: u64,
    pub model_checksum: String,
}

#[derive(Debug, Clone)]
pub struct CellSetup<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub objective: &'a ObjectiveConfig,
    pub infer: &'a InferConfig,
    pub eval: &'a EvalConfig,
}

/// Train `preset` with `seed` on `train` and evaluate on `val`.
pub fn run_cell(
    setup: &CellSetup<'_>,
    preset: Preset,
    seed: u64,
    teacher: Option<&TeacherBundle<f32>>,
    train: &Split,
    val: &Split,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(CellResult, TrainState)> {
    let mut obj = setup.objective.clone();
    preset.apply(&mut obj);
    let tcfg = TrainConfig { seed, ..setup.train.clone() };
    let teacher = if preset.uses_cmg() {
        Some(teacher.ok_or_else(|| Error::config(format!("preset {} needs a teacher", preset.name())))?.clone())
    } else {
        None
    };
    let mut state = TrainState::new(setup.model, tcfg.clone(), obj, teacher)?;
    let (mut max_rcs, mut max_cms) = (0.0f64, 0.0f64);
    state.fit(train, tcfg.epochs, |r| {
        max_rcs = max_rcs.max(r.l_rcs);
        max_cms = max_cms.max(r.l_cms);
        on_step(r);
    })?;
    let ev = evaluate_model(&state.model, val, setup.infer, setup.eval)?;
    let sil = embedding_silhouette(&state.model, &state.rcs_head, val, &setup.objective.rcs)?;
    let result = CellResult {
        preset,
        seed,
        map: ev.report.map,
        map50: ev.report.map50,
        duplicate_rate: ev.duplicate_rate,
        silhouette: sil,
        max_l_rcs: max_rcs,
        max_l_cms: max_cms,
        steps: state.step,
        model_checksum: state.model.checksum(),
    };
    Ok((result, state))
}
