//! Checkpoints: one CGT1 file per parameter plus a `manifest.txt` of
//! `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::cgt;

use super::model::{DetectorModel, ModelConfig};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub arch_hash: String,
    pub step: u64,
    pub seed: u64,
    pub config_digest: String,
    /// `detector` or `teacher`.
    pub kind: String,
    pub model: ModelConfig,
}

impl Manifest {
    fn render(&self) -> String {
        let m = &self.model;
        format!(
            "arch_hash={}\nstep={}\nseed={}\nconfig_digest={}\nkind={}\nin_channels={}\nbase_width={}\npyramid_channels={}\nnum_classes={}\n",
            self.arch_hash, self.step, self.seed, self.config_digest, self.kind, m.in_channels, m.base_width, m.pyramid_channels, m.num_classes
        )
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset: start,
                message: format!("expected key=value, got '{line}'"),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k).cloned().ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("manifest lacks '{k}'"),
            })
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("manifest '{k}' is not an integer"),
            })
        };
        Ok(Manifest {
            arch_hash: get("arch_hash")?,
            step: num("step")?,
            seed: num("seed")?,
            config_digest: get("config_digest")?,
            kind: get("kind")?,
            model: ModelConfig {
                in_channels: num("in_channels")? as usize,
                base_width: num("base_width")? as usize,
                pyramid_channels: num("pyramid_channels")? as usize,
                num_classes: num("num_classes")? as usize,
            },
        })
    }
}

pub fn save(dir: &Path, model: &DetectorModel<f32>, step: u64, seed: u64, config_digest: &str, kind: &str) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for store in model.stores() {
        for p in store.iter() {
            cgt::write_tensor(&dir.join(format!("{}.cgt", p.name)), &p.tensor)?;
        }
    }
    let manifest = Manifest {
        arch_hash: model.arch_hash(),
        step,
        seed,
        config_digest: config_digest.to_string(),
        kind: kind.to_string(),
        model: model.cfg().clone(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}

pub fn load(dir: &Path) -> Result<(DetectorModel<f32>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = DetectorModel::<f32>::new(&manifest.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    if model.arch_hash() != manifest.arch_hash {
        return Err(Error::config(format!(
            "checkpoint arch hash {} does not match the architecture {}",
            manifest.arch_hash,
            model.arch_hash()
        )));
    }
    for store in model.stores_mut() {
        for p in store.iter_mut() {
            let t = cgt::read_tensor::<f32>(&dir.join(format!("{}.cgt", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::config(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
    }
    Ok((model, manifest))
}
