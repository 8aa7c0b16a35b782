//! Objectives, optimizer, EMA tracking and the training loop.

mod ema;
mod losses;
mod optim;

pub use ema::{EmaState, DEFAULT_EMA_DECAY};
pub use losses::{
    ce_loss, dice_loss, one_hot, scalar, soft_dice_loss, total_loss, validate_labels, LossWeights,
    DICE_SMOOTH,
};
pub use optim::AdamW;
mod trainer;

pub use trainer::{
    compute_losses, dtype_name, parse_dtype, CheckpointKind, CheckpointManifest, LossTerms, MetricsLog,
    StepMetrics, TrainConfig, Trainer, CHECKPOINT_MANIFEST, EMA_FILE, LIVE_FILE, OPTIM_FILE,
};
