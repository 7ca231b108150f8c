//! Traffic-scene encoding with a graph-attention backbone, safety-field
//! supervision, masked-roadmap pre-training, downstream prediction heads and
//! synthetic scenario generation.

pub mod backbone;
mod error;
pub mod field;
pub mod geom;
pub mod heads;
pub mod model;
pub mod pretrain;
pub mod scenario;
pub mod scene;
pub mod train;

pub use backbone::{Backbone, BackboneConfig};
pub use error::{Error, Result};
pub use field::FieldParams;
pub use geom::Vec2;
pub use heads::{FinetuneConfig, Intention, Task, TaskModel};
pub use model::{param_count, ModelConfig, ModelParts};
pub use pretrain::{PretrainConfig, PretrainModel};
pub use scenario::{Family, GenConfig, LabeledScene};
pub use scene::{FeatureConfig, Scene};
