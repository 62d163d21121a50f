//! Flat `key = value` run configuration with presets, file loading and
//! command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cmg::{CmgConfig, CmgMode, CosineVariant};
use crate::data::SceneSpec;
use crate::detector::{DetLossConfig, InferConfig, ModelConfig, ObjectiveConfig, Schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::experiment::{EvalConfig, Preset};
use crate::rcs::RcsConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Bool,
    Uint,
    Float,
    FloatList,
    UintList,
    Choice(&'static [&'static str]),
    PresetList,
    /// Locations on disk; excluded from the config digest.
    Path,
    /// Execution knobs that cannot change results; excluded from the digest.
    Runtime,
}

const PRESETS: &[&str] = &["baseline", "rcs", "cmg", "full"];

/// Every accepted key with its default.
const KEYS: &[(&str, &str, Kind)] = &[
    ("data.seed", "0", Kind::Uint),
    ("data.image_size", "64", Kind::Uint),
    ("data.n_train", "200", Kind::Uint),
    ("data.n_val", "50", Kind::Uint),
    ("data.min_objects", "1", Kind::Uint),
    ("data.max_objects", "6", Kind::Uint),
    ("data.min_frac", "0.08", Kind::Float),
    ("data.max_frac", "0.3", Kind::Float),
    ("data.contrast_min", "0.05", Kind::Float),
    ("data.contrast_max", "0.2", Kind::Float),
    ("data.clutter_amplitude", "0.08", Kind::Float),
    ("data.thermal_noise", "0.02", Kind::Float),
    ("data.visible_noise", "0.03", Kind::Float),
    ("data.train_limit", "0", Kind::Uint),
    ("train.lr", "0.01", Kind::Float),
    ("train.momentum", "0.9", Kind::Float),
    ("train.epochs", "30", Kind::Uint),
    ("train.batch_size", "4", Kind::Uint),
    ("train.seed", "0", Kind::Uint),
    ("train.warmup_steps", "50", Kind::Uint),
    ("train.schedule", "cosine", Kind::Choice(&["cosine", "constant"])),
    ("train.grad_clip", "10", Kind::Float),
    ("train.checkpoint_every", "10", Kind::Uint),
    ("teacher.epochs", "30", Kind::Uint),
    ("detector.base_width", "16", Kind::Uint),
    ("detector.pyramid_channels", "32", Kind::Uint),
    ("detector.cls_weight", "1", Kind::Float),
    ("detector.obj_weight", "1", Kind::Float),
    ("detector.iou_weight", "5", Kind::Float),
    ("detector.center_radius", "1.5", Kind::Float),
    ("detector.assign_grid", "2", Kind::Uint),
    ("detector.score_threshold", "0.01", Kind::Float),
    ("detector.nms_iou", "0.65", Kind::Float),
    ("detector.max_detections", "100", Kind::Uint),
    ("rcs.enabled", "false", Kind::Bool),
    ("rcs.grid_size", "5", Kind::Uint),
    ("rcs.embed_dim", "128", Kind::Uint),
    ("rcs.temperature", "0.1", Kind::Float),
    ("rcs.queue_capacity", "64", Kind::Uint),
    ("rcs.weight", "1", Kind::Float),
    ("cmg.enabled", "false", Kind::Bool),
    ("cmg.level_weights", "1,1,1", Kind::FloatList),
    ("cmg.cosine_weight", "1", Kind::Float),
    ("cmg.mode", "roi", Kind::Choice(&["roi", "full_map"])),
    ("cmg.cosine_variant", "per_location", Kind::Choice(&["per_location", "global_flatten"])),
    ("cmg.roi_output_size", "7", Kind::Uint),
    ("cmg.min_roi_side", "3", Kind::Float),
    ("cmg.weight", "1", Kind::Float),
    ("cmg.teacher_checkpoint", "runs/teacher", Kind::Path),
    ("eval.split", "val", Kind::Choice(&["val", "train"])),
    ("eval.duplicate_iou", "0.5", Kind::Float),
    ("eval.duplicate_score_threshold", "0.3", Kind::Float),
    ("ablate.seeds", "0,1,2", Kind::UintList),
    ("ablate.presets", "baseline,rcs,cmg,full", Kind::PresetList),
    ("ablate.jobs", "1", Kind::Runtime),
    ("gradcheck.seeds", "10", Kind::Uint),
    ("gradcheck.h", "1e-5", Kind::Float),
    ("gradcheck.tol", "1e-4", Kind::Float),
    ("io.data", "data", Kind::Path),
    ("io.out", "runs/out", Kind::Path),
    ("io.checkpoint", "runs/out/final", Kind::Path),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|&(_, _, kind)| kind)
}

/// Resolved configuration: every key holds a validated, canonical value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn canonical(key: &str, kind: Kind, raw: &str) -> Result<String> {
    let raw = raw.trim();
    let bad = |what: &str| Error::config(format!("{key}: expected {what}, got '{raw}'"));
    Ok(match kind {
        Kind::Bool => match raw {
            "true" | "1" | "yes" | "on" => "true".into(),
            "false" | "0" | "no" | "off" => "false".into(),
            _ => return Err(bad("a boolean")),
        },
        Kind::Uint => raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.to_string(),
        Kind::Runtime => match raw.parse::<u64>() {
            Ok(n) if n >= 1 => n.to_string(),
            _ => return Err(bad("a positive integer")),
        },
        Kind::Float => {
            let v = raw.parse::<f64>().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
            format!("{v:?}")
        }
        Kind::FloatList => raw
            .split(',')
            .map(|s| canonical(key, Kind::Float, s))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        Kind::UintList => raw
            .split(',')
            .map(|s| canonical(key, Kind::Uint, s))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        Kind::PresetList => {
            let names: Vec<&str> = raw.split(',').map(str::trim).collect();
            for n in &names {
                if !PRESETS.contains(n) {
                    return Err(bad("a comma-separated list of presets"));
                }
            }
            names.join(",")
        }
        Kind::Choice(options) => {
            if !options.contains(&raw) {
                return Err(bad(&format!("one of {options:?}")));
            }
            raw.to_string()
        }
        Kind::Path => raw.to_string(),
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "preset" {
            return self.apply_preset(value);
        }
        let kind = kind_of(key).ok_or_else(|| Error::config(format!("unknown config key '{key}'")))?;
        let v = canonical(key, kind, value)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// Switch the auxiliary objectives to one of the four ablation cells.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let p = Preset::parse(name.trim())?;
        self.set("rcs.enabled", if p.uses_rcs() { "true" } else { "false" })?;
        self.set("cmg.enabled", if p.uses_cmg() { "true" } else { "false" })
    }

    /// Apply a `key = value` file; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.load_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load_str(&mut self, text: &str) -> Result<()> {
        let mut later = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            // Presets act as defaults: explicit keys win wherever they appear.
            if k == "preset" {
                self.apply_preset(v)?;
            } else {
                later.push((n + 1, k.to_string(), v.to_string()));
            }
        }
        for (n, k, v) in later {
            self.set(&k, &v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {n}: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn uint(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    pub fn uint_list(&self, key: &str) -> Vec<u64> {
        self.get(key).split(',').map(|s| s.parse().expect("validated")).collect()
    }

    /// SHA-256 over every result-relevant `key=value` line in key order
    /// (paths and runtime knobs are left out).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if matches!(kind_of(k), Some(Kind::Path | Kind::Runtime)) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The resolved configuration in file syntax.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn scene(&self) -> Result<SceneSpec> {
        let spec = SceneSpec {
            size: self.usize("data.image_size"),
            min_objects: self.usize("data.min_objects"),
            max_objects: self.usize("data.max_objects"),
            min_frac: self.float("data.min_frac"),
            max_frac: self.float("data.max_frac"),
            contrast_min: self.float("data.contrast_min"),
            contrast_max: self.float("data.contrast_max"),
            clutter_amplitude: self.float("data.clutter_amplitude"),
            thermal_noise: self.float("data.thermal_noise"),
            visible_noise: self.float("data.visible_noise"),
            ..SceneSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            base_width: self.usize("detector.base_width"),
            pyramid_channels: self.usize("detector.pyramid_channels"),
            ..ModelConfig::default()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            lr: self.float("train.lr"),
            momentum: self.float("train.momentum"),
            epochs: self.usize("train.epochs"),
            batch_size: self.usize("train.batch_size"),
            seed: self.uint("train.seed"),
            warmup_steps: self.usize("train.warmup_steps"),
            schedule: match self.get("train.schedule") {
                "constant" => Schedule::Constant,
                _ => Schedule::Cosine,
            },
            grad_clip: self.float("train.grad_clip"),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn objective(&self) -> Result<ObjectiveConfig> {
        let obj = ObjectiveConfig {
            det: DetLossConfig {
                cls_weight: self.float("detector.cls_weight"),
                obj_weight: self.float("detector.obj_weight"),
                iou_weight: self.float("detector.iou_weight"),
                radius: self.float("detector.center_radius"),
                assign_grid: self.usize("detector.assign_grid"),
            },
            rcs: RcsConfig {
                enabled: self.flag("rcs.enabled"),
                grid_size: self.usize("rcs.grid_size"),
                embed_dim: self.usize("rcs.embed_dim"),
                temperature: self.float("rcs.temperature"),
                queue_capacity: self.usize("rcs.queue_capacity"),
                weight: self.float("rcs.weight"),
            },
            cmg: CmgConfig {
                enabled: self.flag("cmg.enabled"),
                level_weights: self.get("cmg.level_weights").split(',').map(|s| s.parse().expect("validated")).collect(),
                cosine_weight: self.float("cmg.cosine_weight"),
                mode: match self.get("cmg.mode") {
                    "full_map" => CmgMode::FullMap,
                    _ => CmgMode::Roi,
                },
                cosine_variant: match self.get("cmg.cosine_variant") {
                    "global_flatten" => CosineVariant::GlobalFlatten,
                    _ => CosineVariant::PerLocation,
                },
                roi_output_size: self.usize("cmg.roi_output_size"),
                min_roi_side: self.float("cmg.min_roi_side"),
                weight: self.float("cmg.weight"),
            },
        };
        obj.validate()?;
        Ok(obj)
    }

    pub fn infer(&self) -> Result<InferConfig> {
        let c = InferConfig {
            score_threshold: self.float("detector.score_threshold"),
            nms_iou: self.float("detector.nms_iou"),
            max_detections: self.usize("detector.max_detections"),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            duplicate_iou: self.float("eval.duplicate_iou"),
            duplicate_score_threshold: self.float("eval.duplicate_score_threshold"),
        }
    }

    pub fn presets(&self) -> Vec<Preset> {
        self.get("ablate.presets")
            .split(',')
            .map(|s| Preset::parse(s).expect("validated"))
            .collect()
    }

    /// `data.train_limit = 0` means the whole split.
    pub fn train_limit(&self) -> Option<usize> {
        match self.usize("data.train_limit") {
            0 => None,
            n => Some(n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_the_key() {
        let mut c = RunConfig::default();
        let err = c.load_str("train.lr = 0.02\nrcs.temprature = 0.1\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("rcs.temprature")), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn values_are_canonicalised_for_the_digest() {
        let mut a = RunConfig::default();
        a.set("train.lr", "0.010").unwrap();
        let b = RunConfig::default();
        assert_eq!(a.digest(), b.digest());
        a.set("io.out", "/elsewhere").unwrap();
        a.set("ablate.jobs", "4").unwrap();
        assert_eq!(a.digest(), b.digest());
        a.set("train.seed", "3").unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn preset_applies_before_explicit_keys() {
        let mut c = RunConfig::default();
        c.load_str("rcs.enabled = false # keep contrastive off\npreset = full\n").unwrap();
        assert!(!c.flag("rcs.enabled"));
        assert!(c.flag("cmg.enabled"));
    }

    #[test]
    fn typed_views_reflect_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train().unwrap(), TrainConfig::default());
        assert_eq!(c.infer().unwrap(), InferConfig::default());
        assert_eq!(c.objective().unwrap(), ObjectiveConfig::default());
        assert_eq!(c.scene().unwrap().size, 64);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(c.set("train.epochs", "-1").is_err());
        assert!(c.set("cmg.mode", "sideways").is_err());
        assert!(c.set("ablate.presets", "baseline,bogus").is_err());
        assert!(c.set("train.lr", "nan").is_err());
        assert!(c.set("ablate.jobs", "0").is_err());
    }
}
