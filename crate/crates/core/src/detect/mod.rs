//! Single-class anchor-grid detection: decoding, suppression, target
//! assignment, loss, and training.

pub mod assign;
mod boxes;
pub mod decode;
pub mod loss;
mod nms;
pub mod train;

pub use assign::{assign_targets, best_anchor, BoxTarget, GridTargets};
pub use boxes::{shape_iou, Anchor, BoundingBox, Detection, DEFAULT_ANCHORS};
pub use decode::{decode_box, decode_predictions, encode_box, BoxLogits, HeadGeometry};
pub use loss::{detection_loss, LossReport, LossWeights};
pub use nms::nms;
pub use train::{
    accumulate_gradients, evaluate_map50, head_geometries, prepare_sample, train_detector, Detector, DetectorCurves,
    DetectorTrainConfig, DetectorTraining,
};
