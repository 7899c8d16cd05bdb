//! Two-view relative pose estimation at desk scale.
//!
//! The crate pairs an attention-based sparse-keypoint pose regressor with a
//! classical epipolar-geometry pipeline (mutual-NN matching, normalized
//! 8-point, RANSAC, cheirality decomposition), plus the synthetic data,
//! losses, optimizer, and metrics needed to train and evaluate both on a
//! laptop.

pub mod rng;

pub mod baseline;

pub mod geometry;

pub mod keypoints;

pub mod metrics;

pub mod model;

pub mod tensor;

pub mod training;

pub mod verify;
