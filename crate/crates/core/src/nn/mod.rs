//! Reverse-mode autodiff, the segmentation network and its training loop.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, NormStats, Var};
pub use model::{forward, forward_graph, Mode, ModelParams, NetworkConfig, NetworkOutputs};
pub use optim::{LrSchedule, OptimizerState, StepOutcome};
pub use tensor::Tensor;
pub use train::{assemble_batch, train, train_step, EpochLog, SampleSource, TrainConfig, TrainProgress};
