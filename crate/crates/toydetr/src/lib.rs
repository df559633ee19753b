//! Desk-scale detection transformer used to study style-shift robustness.
//!
//! Synthetic shape scenes ([`scene`]) feed a small conv/attention detector
//! ([`model`]) trained with a Hungarian-matched set loss ([`loss`],
//! [`matcher`]) by [`train`], and scored with VOC-style AP ([`eval`],
//! [`evaluate`]).

pub mod ablation;
pub mod checkpoint;
mod error;
pub mod eval;
pub mod evaluate;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod matcher;
pub mod model;
pub mod optim;
pub mod params;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, Prediction, PredictionGrad, RunMode, ToyDetr};
pub use scene::{DomainSpec, SceneSample};
pub use train::{TrainConfig, TrainState};
