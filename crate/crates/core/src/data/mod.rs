//! Synthetic paired dataset, file layout and evaluation.

pub mod dataset;
pub mod eval;
pub mod scene;

pub use dataset::{generate_dataset, load_split, make_split, read_annotations, Annotation, Sample, Split};
pub use eval::{duplicate_rate, evaluate, silhouette, EvalParams, EvalReport, ImageDetections};
pub use scene::{render_scene, Scene, SceneSpec, NUM_CLASSES};
