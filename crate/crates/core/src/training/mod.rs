//! Patch sampling, the curriculum and the optimisation loop.

pub mod checkpoint;
mod config;
mod curriculum;
mod optim;
mod patches;
mod schedule;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Convergence, TrainConfig};
pub use curriculum::{CurriculumStage, ParamGroup};
pub use optim::Adam;
pub use patches::{grid_cells, inference_grid, sample_patch, Patch, PatchFrame, MAX_REJECTIONS, MIN_PATCH_POINTS};
pub use schedule::{advance_stage, warmup_lr};
pub use trainer::{EpochRecord, StepRecord, TrainState, TrainSummary, Trainer};
