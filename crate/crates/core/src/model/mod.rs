//! Network assembly, parameter accounting and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod medlitenet;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointMeta, EMA_PREFIX};
pub use config::ModelConfig;
pub use medlitenet::{predict_mask, Features, MedLiteNet, ParamBreakdown, MODULES};
