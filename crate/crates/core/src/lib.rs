//! Hierarchical block-wise fine-tuning on a small reverse-mode autodiff
//! engine, with a simulated host/device memory ledger and closed-form
//! memory estimates.
//!
//! A model is a stack of layer units (embedding, hidden units, head). The
//! [`GroupSchedule`] partitions the units into `k` groups of `m` and cycles
//! through them. Each training step only the current group is trainable and
//! only its optimizer state is resident on the device. The learning rate
//! advances once per full sweep.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod estimate;
pub mod memory;
pub mod model;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::{load_dataset, BatchStream, Dataset, InputShape, TaskSpec};
pub use error::{Error, Result};
pub use estimate::{estimate_fpft, estimate_hift, trainable_peak_fraction, Bytes, EstimateReport, Footprint};
pub use memory::{
    move_state_to_device, move_state_to_host, Category, MemoryLedger, MemoryReport, Placement, Precision,
};
pub use model::{build_model, Activation, Arch, LayerId, LayerKind, LayeredModel, ParamSet, UnitKind};
pub use optim::{state_footprint, Hyperparams, OptimizerKind, OptimizerState};
pub use report::{compare_runs, emit_metrics, ComparisonReport};
pub use schedule::{group_count, Decay, GroupSchedule, LrSchedule, Strategy};
pub use tape::{Tape, Var};
pub use tensor::{DType, ParamStore, Tensor};
pub use train::{train, train_fpft, train_hift, Mode, RunReport, Seeds, StepRecord, TrainConfig, Trainer};
