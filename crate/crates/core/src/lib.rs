pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod geometry;
pub mod view_transform;
pub mod fusion;
pub mod heads;
pub mod losses;
pub mod augmentation;
pub mod metrics;
pub mod synth;
pub mod pipeline;
pub mod gradsuite;
