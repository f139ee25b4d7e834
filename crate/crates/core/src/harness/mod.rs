//! Synthetic data, the training loop, and detection / evaluation drivers
//! used by the `cdk` command line.

mod data;
mod detect;
mod train;

pub use data::{
    flip_horizontal, format_labels, gen_dataset, image_from_bytes, image_to_bytes, load_dataset, parse_labels,
    read_image, sample_id, synthetic_scene, synthetic_scenes, write_image, Sample, SyntheticScene, IMAGE_EXT,
    IMAGE_MAGIC, LABEL_EXT, SYNTHETIC_CLASSES,
};
pub use detect::{
    dataset_recall, detect, format_detections, parse_detections, predict, DetectionLine, DEFAULT_NMS_IOU, DEFAULT_TOP_N,
};
pub use train::{anchor_grid_for, loss_and_grads, train, write_log, LogRow, TrainConfig, TrainOutcome, LOG_HEADER};
