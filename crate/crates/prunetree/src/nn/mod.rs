//! Training substrate: topology, parameters, kernels, training, datasets,
//! FLOP accounting, and checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod flops;
pub mod idx;
pub mod model;
pub mod ops;
pub mod spec;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{Batch, Dataset};
pub use flops::count_flops;
pub use model::{init_model, Forward, ModelState, Params};
pub use spec::{ConvSpec, HeadSpec, NetworkSpec, ResidualBlockSpec, Stage};
pub use train::{train, TrainConfig, TrainReport};
