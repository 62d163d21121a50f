use crate::error::{Error, Result};
use crate::geometry::PyramidSpec;
use crate::numeric::{Real, Tape, Tensor, Var};

/// Per-level feature maps living on a tape (the student's `S_k`).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub spec: PyramidSpec,
    pub levels: Vec<Var>,
}

/// Detached per-level feature maps (the teacher's `T_k`).
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidTensors<T> {
    pub spec: PyramidSpec,
    pub levels: Vec<Tensor<T>>,
}

impl FeaturePyramid {
    pub fn level(&self, index: usize) -> Var {
        self.levels[self.spec.position(index).expect("known level")]
    }

    pub fn detach<T: Real>(&self, tape: &Tape<T>) -> PyramidTensors<T> {
        PyramidTensors {
            spec: self.spec.clone(),
            levels: self.levels.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }

    /// `(height, width)` of the input image implied by the finest level.
    pub fn image_size<T: Real>(&self, tape: &Tape<T>) -> Result<(usize, usize)> {
        image_size(&self.spec, tape.value(self.levels[0]))
    }
}

impl<T: Real> PyramidTensors<T> {
    pub fn level(&self, index: usize) -> &Tensor<T> {
        &self.levels[self.spec.position(index).expect("known level")]
    }

    pub fn image_size(&self) -> Result<(usize, usize)> {
        image_size(&self.spec, &self.levels[0])
    }
}

fn image_size<T: Real>(spec: &PyramidSpec, finest: &Tensor<T>) -> Result<(usize, usize)> {
    let [_, _, h, w] = finest.dims4()?;
    let s = spec
        .levels
        .first()
        .ok_or_else(|| Error::config("empty pyramid"))?
        .stride;
    Ok((h * s, w * s))
}
