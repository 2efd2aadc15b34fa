//! Images, datasets, checkpoints, and synthetic data.

pub mod checkpoint;
pub mod dataset;
pub mod image;
pub mod synthetic;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use dataset::{
    format_annotations, histogram, load_classification_dataset, load_detection_dataset, parse_annotations,
    save_classification_dataset, save_detection_dataset, split, Dataset, DatasetSplit, Label, LabeledImage,
    Provenance, SplitFractions,
};
pub use image::{images_to_batch, Image};
