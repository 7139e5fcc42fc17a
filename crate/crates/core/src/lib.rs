//! Per-campaign logistic response models for ad targeting.
//!
//! One binary model is trained per campaign from click logs: the campaign's
//! clicks are the positives and every other campaign's clicks in the same
//! window are the negatives. Features are chosen by a fixed exploration ladder
//! scored with ROC area on a held-out calibration set, the accept threshold is
//! the ROC point farthest from the chance diagonal, and the per-campaign
//! models are combined into an ensemble scored as a plain sum of betas.

pub mod calibration;
pub mod dataset;
pub mod explorer;
pub mod impression;
pub mod irls;
pub mod model;
pub mod polytomous;
pub mod scoring;
pub mod synth;

pub use impression::{Dimension, Impression};
pub use irls::{fit, DesignMatrix, FitConfig, FitResult};
pub use model::{BinaryModel, FeatureIndex, FeatureKey, LabeledVector};
