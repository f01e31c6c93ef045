//! Orchestration: configuration, the forward graph, training, evaluation
//! and artifact emission.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod render;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use config::{AblationFlags, EvalSpec, ModelSpec, PipelineConfig};
pub use eval::{evaluate, evaluate_ground_truth, load_scene_set, predict, Prediction};
pub use model::{Forward, Model, OutputGrads, ViewGeometry};
pub use train::{evaluate_losses, prepare, train, training_scenes, LogRecord, Prepared, StepLosses, TrainRun};
