//! Batch-all triplet training.

pub mod adam;
pub mod checkpoint;
pub mod schedule;
pub mod trainer;
pub mod triplet;

pub use adam::Adam;
pub use checkpoint::{checkpoint_path, load_checkpoint, save_checkpoint, Checkpoint};
pub use schedule::LrSchedule;
pub use trainer::{
    batch_gradients, train, train_step, Control, StepRecord, TrainOptions, TrainState, TrainSummary,
};
pub use triplet::{triplet_loss_ba, Normalization, SignConvention, TripletConfig, TripletOutput};
