//! On-disk dataset: `<root>/{train,val}/<id>_thermal.cgt`, `<id>_visible.cgt`
//! and one `annotations.jsonl` per split.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numeric::cgt;
use crate::numeric::Tensor;
use crate::seed::derive_seed;

use super::scene::{render_scene, SceneSpec};

pub const SPLITS: [&str; 2] = ["train", "val"];
pub const ANNOTATIONS: &str = "annotations.jsonl";

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    /// `1 x H x W`.
    pub thermal: Tensor<f32>,
    /// `3 x H x W`.
    pub visible: Tensor<f32>,
    pub gt: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.samples
            .iter()
            .map(|s| Annotation { image_id: s.image_id, boxes: s.gt.clone() })
            .collect()
    }

    /// The same split with each visible image standing in for the thermal
    /// one, so detector code can train and evaluate on the RGB modality.
    pub fn visible(&self) -> Split {
        Split {
            name: format!("{}-visible", self.name),
            samples: self
                .samples
                .iter()
                .map(|s| Sample { thermal: s.visible.clone(), ..s.clone() })
                .collect(),
        }
    }

    /// `(height, width)` of the images; all images share it.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.thermal.shape()[1], s.thermal.shape()[2]))
    }
}

fn file_name(id: u64, modality: &str) -> String {
    format!("{id:05}_{modality}.cgt")
}

/// Seed of image `id` in `split`.
pub fn image_seed(master: u64, split: &str, id: u64) -> u64 {
    derive_seed(master, split, id)
}

/// Render the scene for one image of a split, in memory.
pub fn make_sample(spec: &SceneSpec, master: u64, split: &str, id: u64) -> Result<Sample> {
    let scene = render_scene(spec, image_seed(master, split, id))?;
    let gt = scene.gt();
    Ok(Sample { image_id: id, thermal: scene.thermal, visible: scene.visible, gt })
}

/// In-memory split without touching disk.
pub fn make_split(spec: &SceneSpec, master: u64, split: &str, n: usize) -> Result<Split> {
    let samples = (0..n as u64).map(|id| make_sample(spec, master, split, id)).collect::<Result<_>>()?;
    Ok(Split { name: split.to_string(), samples })
}

/// Write `n_train` + `n_val` paired samples under `root`. Refuses to touch a
/// non-empty directory unless `force`.
pub fn generate_dataset(spec: &SceneSpec, n_train: usize, n_val: usize, seed: u64, root: &Path, force: bool) -> Result<()> {
    spec.validate()?;
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory is not empty (use --force)"),
            ));
        }
        if non_empty {
            for split in SPLITS {
                let dir = root.join(split);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
            }
        }
    }
    for (split, n) in [("train", n_train), ("val", n_val)] {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut lines = String::new();
        for id in 0..n as u64 {
            let s = make_sample(spec, seed, split, id)?;
            cgt::write_tensor(&dir.join(file_name(id, "thermal")), &s.thermal)?;
            cgt::write_tensor(&dir.join(file_name(id, "visible")), &s.visible)?;
            let line = serde_json::to_string(&Annotation { image_id: id, boxes: s.gt }).expect("serialisable");
            lines.push_str(&line);
            lines.push('\n');
        }
        let path = dir.join(ANNOTATIONS);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(lines.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: start,
            message: format!("annotation line {}: {e}", n + 1),
        })?;
        for b in &a.boxes {
            b.validate()?;
        }
        out.push(a);
    }
    Ok(out)
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// Load a split; with `limit`, only the first `limit` images.
pub fn load_split(root: &Path, split: &str, limit: Option<usize>) -> Result<Split> {
    let dir = split_dir(root, split);
    let anns = read_annotations(&dir.join(ANNOTATIONS))?;
    let take = limit.unwrap_or(anns.len()).min(anns.len());
    let mut samples = Vec::with_capacity(take);
    for a in anns.into_iter().take(take) {
        let thermal = cgt::read_tensor::<f32>(&dir.join(file_name(a.image_id, "thermal")))?;
        let visible = cgt::read_tensor::<f32>(&dir.join(file_name(a.image_id, "visible")))?;
        samples.push(Sample { image_id: a.image_id, thermal, visible, gt: a.boxes });
    }
    Ok(Split { name: split.to_string(), samples })
}
