//! Box algebra, pyramid level assignment, RoIAlign and NMS.

mod boxes;
mod nms;
mod pyramid;
mod roi_align;

pub use boxes::{assign_fpn_level, intersection, iou, BBox, LevelSpec, PyramidSpec};
pub use nms::nms;
pub use pyramid::{FeaturePyramid, PyramidTensors};
pub use roi_align::{roi_align, roi_align_tensor, roi_taps, MIN_FEATURE_SIDE};
