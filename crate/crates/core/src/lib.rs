//! Adaptively placed multi-grid scene representation networks for 3D scalar
//! fields: model, density-driven grid placement, training, domain
//! decomposition, and volume rendering.

pub mod decomposition;
pub mod density;
pub mod error;
pub mod model;
pub mod optim;
pub mod real;
pub mod render;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use model::{load_model, save_model, ApmgModel, FeatureGrids, GridTransform, ModelConfig};
pub use real::Real;
pub use render::{render_frame, Camera, Image, RenderConfig, TransferFunction};
pub use trainer::{train_single, DensityError, TrainConfig};
pub use volume::{load_volume, synth_volume, Extent, RawVolumeFile, SynthSpec, Volume, VolumeHeader, VolumeSource};
