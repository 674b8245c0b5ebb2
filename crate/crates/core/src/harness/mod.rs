//! Training, evaluation, ablations and image output.

pub mod ablate;
pub mod config;
pub mod render;
pub mod train;

pub use ablate::{ablate, variants, AblationAxis, AblationTable, Variant};
pub use config::{OptimizerKind, TrainConfig, SEED_ENV};
pub use render::{render_labels, render_weights};
pub use train::{evaluate, evaluate_model, fit, load_model, save_model, train, RunRecord, TrainedRun, Trainer};
