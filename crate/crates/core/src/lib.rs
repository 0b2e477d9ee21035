//! Fair classification on tabular data through feature disentanglement,
//! directional augmentation of sensitive features and imputation-calibrated
//! fine-tuning.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod disentangle;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod trainer;
