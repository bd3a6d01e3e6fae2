//! Initialization, loss, optimizer steps and the training loop.

mod config;
mod init;
mod loss;
mod run;
mod step;

pub use config::{Phase, TrainConfig};
pub use init::{init_weights, INIT_STD, INIT_TRUNC};
pub use loss::{compute_loss, perceptual_featurizer, LossParts, PERCEP_DIM, PERCEP_SEED};
pub use run::{
    checkpoint_path, load_optimizer, optimizer_path, run_training, save_optimizer, substream, RunOptions, TrainOutcome,
    FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER,
};
pub use step::{batch_loss, train_step, SceneBatch, StepStats};

#[cfg(test)]
mod tests;
