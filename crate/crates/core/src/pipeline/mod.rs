//! The coarse-to-fine scene-flow network and everything needed to train it.

mod config;
mod loss;
mod model;
mod optim;
mod scene;

pub use config::{NetworkConfig, TrainConfig};
pub use loss::{sequence_loss, LossWeights};
pub use model::{FlowMambaModel, ForwardOutput, LevelOutput, Pyramid, PyramidLevel};
pub use optim::{train_step, CosineSchedule, SceneRef, TrainState};
pub use scene::{
    generate_scene, ObjectShape, RigidTransform, SceneSpec, SyntheticScene, TransformFamily, MAX_ROTATION_DEG,
    MAX_TRANSLATION, MIN_POINTS_PER_OBJECT,
};
