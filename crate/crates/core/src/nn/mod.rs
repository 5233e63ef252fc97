//! A small neural-network engine: dense, recurrent and normalisation layers
//! with hand-written gradients, AdamW and early-stopped training.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use model::{InputShape, Model, ModelSpec, RecurrentCell};
pub use ops::Mode;
pub use optim::{AdamW, AdamWConfig};
pub use train::{train_model, TrainingConfig, TrainingResult};
