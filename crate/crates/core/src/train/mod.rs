//! Losses, optimizer, schedule and the training loop.

pub mod experiment;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use loss::{compound_loss, dice_loss, weighted_bce_loss, LossConfig, LossParts, P_CLAMP};
pub use optim::{adamw_step, lr_at, AdamState, OptimConfig};
pub use trainer::{
    evaluate, predict_masks, stack_images, stack_masks, train_loop, EvalRecord, IterRecord, TrainHistory,
    TrainSettings, TrainSpec,
};
