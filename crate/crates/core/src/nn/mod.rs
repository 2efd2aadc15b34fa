//! Network construction: declarative specs, executable models, the CNN-SENet
//! classifier, detector backbones, and head replacement for transfer learning.

mod build;
mod model;
mod spec;
mod surgery;

pub use build::{
    build_cnn_senet, build_cnn_senet_with, build_detector_backbone, build_detector_backbone_at,
    build_tiny_detector, CnnSenetOptions, DetectorPreset, CNN_SENET_INPUT, TINY_ANCHORS,
};
pub use model::{Forward, Model, BN_EPSILON, BN_MOMENTUM};
pub use spec::{se_hidden, InputShape, LayerSpec, NetworkSpec};
pub use surgery::replace_head;
