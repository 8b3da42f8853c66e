//! Slice classifier: lung-cropped preprocessing, augmentation, training,
//! slice scoring and Grad-CAM activation maps.

mod augment;
mod infer;
mod model;
mod preprocess;
mod train;

pub use augment::{augment, AugmentationConfig};
pub use infer::{cam_weights, grad_cam, predict_slice, score_and_map, CamParts, GradCamMap};
pub use model::{Preprocessing, TrainedModel, MODEL_JSON, MODEL_WEIGHTS};
pub use preprocess::{bilinear_resize, lung_crop, preprocess_slice, preprocess_slice_in, PreparedSlice, SliceCrop};
pub use train::{
    load_training_slices, select_balanced, split_by_study, train, train_from_manifest, EpochRecord, TrainConfig,
    TrainHistory,
};

use thiserror::Error;

use crate::lung_seg::SegError;
use crate::nn::NnError;
use crate::volume_io::VolumeError;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("lung mask is empty")]
    EmptyMaskSlice,
    #[error("training data needs both normal and abnormal slices")]
    SingleClassData,
    #[error("manifest has no rows")]
    EmptyManifest,
    #[error("model activation calibration is {0}, must be > 0")]
    UncalibratedModel(f64),
    #[error("no per-slice labels for study {0} (missing ground-truth sidecar)")]
    MissingSliceLabels(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Segmentation(#[from] SegError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ClassifierError> = std::result::Result<T, E>;

/// A preprocessed `size`×`size` slice image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub image: Vec<f32>,
    pub size: usize,
    pub abnormal: bool,
    pub study_id: String,
    pub z: usize,
}
