//! Backbone, feature pyramid and decoupled anchor-free head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{FeaturePyramid, LevelSpec, PyramidSpec};
use crate::numeric::{params::hex, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub pyramid_channels: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            base_width: 16,
            pyramid_channels: 32,
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.pyramid_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("model widths and class count must be >= 1"));
        }
        Ok(())
    }

    pub fn pyramid_spec(&self) -> PyramidSpec {
        PyramidSpec::standard(self.pyramid_channels)
    }

    /// Channel widths of the stem and the four stages.
    fn stage_widths(&self) -> [usize; 5] {
        let b = self.base_width;
        [b, b, 2 * b, 4 * b, 4 * b]
    }
}

/// Initial objectness / classification bias: `σ(-4.6) ≈ 0.01`.
pub const PRIOR_BIAS: f64 = -4.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

fn add_conv<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Conv {
    let weight = store.add_he(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
    Conv { weight, bias }
}

fn apply<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, conv: Conv, x: Var, stride: usize) -> Result<Var> {
    let w = tape.param(store, conv.weight);
    let b = tape.param(store, conv.bias);
    let k = store.get(conv.weight).tensor.shape()[2];
    tape.conv2d(x, w, b, stride, k / 2)
}

/// Backbone and FPN neck: everything up to the pyramid. The teacher is one
/// of these, frozen.
#[derive(Debug, Clone)]
pub struct FeatureNet<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    /// Stem plus four stride-2 stages (strides 2, 4, 8, 16, 32).
    pub stages: Vec<Conv>,
    /// 1x1 laterals for levels 3, 4, 5.
    pub laterals: Vec<Conv>,
}

impl<T: Real> FeatureNet<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let widths = cfg.stage_widths();
        let mut cin = cfg.in_channels;
        let mut stages = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            stages.push(add_conv(&mut store, &format!("backbone.stage{i}"), cin, w, 3, rng));
            cin = w;
        }
        let laterals = (0..3)
            .map(|k| add_conv(&mut store, &format!("fpn.lateral{}", k + 3), widths[k + 2], cfg.pyramid_channels, 1, rng))
            .collect();
        Ok(FeatureNet {
            cfg: cfg.clone(),
            store,
            stages,
            laterals,
        })
    }

    /// `image` is `N x C x H x W` with `H`, `W` divisible by 32.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<FeaturePyramid> {
        let [_, c, h, w] = tape.value(image).dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::config(format!(
                "input has {c} channels, model expects {}",
                self.cfg.in_channels
            )));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!("image size {h}x{w} must be a positive multiple of 32")));
        }
        let mut x = image;
        let mut taps = Vec::new();
        for (i, &conv) in self.stages.iter().enumerate() {
            let y = apply(tape, &self.store, conv, x, 2)?;
            x = tape.silu(y)?;
            if i >= 2 {
                taps.push(x);
            }
        }
        let mut lat: Vec<Var> = Vec::with_capacity(3);
        for (k, &conv) in self.laterals.iter().enumerate() {
            lat.push(apply(tape, &self.store, conv, taps[k], 1)?);
        }
        let mut levels = vec![lat[2]];
        for k in (0..2).rev() {
            let up = tape.upsample_nearest2x(levels[0])?;
            levels.insert(0, tape.add(lat[k], up)?);
        }
        Ok(FeaturePyramid {
            spec: self.cfg.pyramid_spec(),
            levels,
        })
    }
}

/// Shared decoupled head applied to every pyramid level.
#[derive(Debug, Clone)]
pub struct Head<T> {
    pub store: ParamStore<T>,
    pub cls_conv: Conv,
    pub cls_out: Conv,
    pub reg_conv: Conv,
    pub reg_out: Conv,
    pub obj_out: Conv,
}

/// Raw per-level head outputs.
#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    /// `N x num_classes x H x W` logits.
    pub cls: Var,
    /// `N x 1 x H x W` logits.
    pub obj: Var,
    /// `N x 4 x H x W` log-distances to the left, top, right, bottom sides.
    pub reg: Var,
}

impl<T: Real> Head<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.pyramid_channels;
        let mut store = ParamStore::new();
        let cls_conv = add_conv(&mut store, "head.cls_conv", c, c, 3, rng);
        let cls_out = add_conv(&mut store, "head.cls_out", c, cfg.num_classes, 1, rng);
        let reg_conv = add_conv(&mut store, "head.reg_conv", c, c, 3, rng);
        let reg_out = add_conv(&mut store, "head.reg_out", c, 4, 1, rng);
        let obj_out = add_conv(&mut store, "head.obj_out", c, 1, 1, rng);
        for conv in [cls_out, obj_out] {
            let p = store.get_mut(conv.bias);
            p.tensor = p.tensor.map(|_| T::lit(PRIOR_BIAS));
        }
        for conv in [cls_out, obj_out, reg_out] {
            let p = store.get_mut(conv.weight);
            p.tensor = p.tensor.map(|v| v * T::lit(0.1));
        }
        Head {
            store,
            cls_conv,
            cls_out,
            reg_conv,
            reg_out,
            obj_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, feature: Var) -> Result<LevelOutput> {
        let s = &self.store;
        let c = apply(tape, s, self.cls_conv, feature, 1)?;
        let c = tape.silu(c)?;
        let cls = apply(tape, s, self.cls_out, c, 1)?;
        let r = apply(tape, s, self.reg_conv, feature, 1)?;
        let r = tape.silu(r)?;
        let reg = apply(tape, s, self.reg_out, r, 1)?;
        let obj = apply(tape, s, self.obj_out, r, 1)?;
        Ok(LevelOutput { cls, obj, reg })
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel<T> {
    pub net: FeatureNet<T>,
    pub head: Head<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    /// One entry per pyramid level, finest first.
    pub levels: Vec<LevelOutput>,
}

impl<T: Real> DetectorModel<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let net = FeatureNet::new(cfg, rng)?;
        let head = Head::new(cfg, rng);
        Ok(DetectorModel { net, head })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn spec(&self) -> PyramidSpec {
        self.net.cfg.pyramid_spec()
    }

    pub fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<ForwardOutput> {
        let pyramid = self.net.forward(tape, image)?;
        let levels = pyramid
            .levels
            .iter()
            .map(|&f| self.head.forward(tape, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput { pyramid, levels })
    }

    pub fn stores(&self) -> [&ParamStore<T>; 2] {
        [&self.net.store, &self.head.store]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 2] {
        [&mut self.net.store, &mut self.head.store]
    }

    pub fn num_scalars(&self) -> usize {
        self.stores().iter().map(|s| s.num_scalars()).sum()
    }

    /// Digest of parameter names and shapes.
    pub fn arch_hash(&self) -> String {
        arch_hash(self.stores().iter().flat_map(|s| s.iter()).map(|p| (p.name.as_str(), p.tensor.shape())))
    }

    /// Digest of names, shapes and values of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.stores() {
            h.update(s.checksum().as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn cast<U: Real>(&self) -> DetectorModel<U> {
        DetectorModel {
            net: FeatureNet {
                cfg: self.net.cfg.clone(),
                store: self.net.store.cast(),
                stages: self.net.stages.clone(),
                laterals: self.net.laterals.clone(),
            },
            head: Head {
                store: self.head.store.cast(),
                cls_conv: self.head.cls_conv,
                cls_out: self.head.cls_out,
                reg_conv: self.head.reg_conv,
                reg_out: self.head.reg_out,
                obj_out: self.head.obj_out,
            },
        }
    }
}

pub(crate) fn arch_hash<'a>(params: impl Iterator<Item = (&'a str, &'a [usize])>) -> String {
    let mut h = Sha256::new();
    for (name, shape) in params {
        h.update(name.as_bytes());
        h.update([0]);
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
    }
    hex(&h.finalize())[..16].to_string()
}

/// Level shapes `(h, w)` for an input of `height x width`.
pub fn level_shapes(spec: &PyramidSpec, height: usize, width: usize) -> Vec<(usize, usize)> {
    spec.levels.iter().map(|l: &LevelSpec| (height / l.stride, width / l.stride)).collect()
}
